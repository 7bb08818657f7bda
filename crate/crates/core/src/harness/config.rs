//! Declarative experiment configuration: TOML sections with defaults,
//! dotted-path overrides, and cross-field validation. Every run embeds the
//! resolved config in its outputs, so a summary file is enough to rerun.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::l96::step_multiple;
use crate::reservoir::MacroParams;

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub system: SystemSection,
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub assimilation: AssimSection,
    pub evaluate: EvaluateSection,
    pub macro_opt: MacroOptSection,
    pub seeds: SeedSection,
    pub paths: PathSection,
    pub sweep: Option<SweepSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SystemSection {
    pub dim: usize,
    pub forcing: f64,
    pub dt: f64,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection {
            dim: 6,
            forcing: 8.0,
            dt: 0.01,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub train_steps: usize,
    pub test_steps: usize,
    pub spinup_steps: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            train_steps: 100_000,
            test_steps: 100_000,
            spinup_steps: 1_000,
        }
    }
}

/// Macro parameters in config form; the ridge amplitude is carried as
/// ln(β) because that is the scale the optimizer searches on.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct MacroSection {
    pub rho: f64,
    pub sigma_in: f64,
    pub leak: f64,
    pub log_beta: f64,
}

impl MacroSection {
    pub fn to_params(self) -> MacroParams {
        MacroParams {
            rho: self.rho,
            sigma_in: self.sigma_in,
            leak: self.leak,
            tikhonov: self.log_beta.exp(),
        }
    }

    pub fn from_params(p: &MacroParams) -> Self {
        MacroSection {
            rho: p.rho,
            sigma_in: p.sigma_in,
            leak: p.leak,
            log_beta: p.tikhonov.ln(),
        }
    }
}

/// Tuned presets from the optimizer, kept as named defaults so standard
/// experiments need no search. Keyed by target system and hidden width.
pub const TUNED_6D_N1600: MacroSection = MacroSection {
    rho: 0.10036271,
    sigma_in: 0.06627321,
    leak: 0.70270733,
    log_beta: -18.41726026,
};

pub const TUNED_6D_N800: MacroSection = MacroSection {
    rho: 0.10000000,
    sigma_in: 0.05343709,
    leak: 0.69460913,
    log_beta: -14.33030495,
};

pub const TUNED_RING_N2000: MacroSection = MacroSection {
    rho: 0.34378377,
    sigma_in: 0.05219330,
    leak: 0.40813549,
    log_beta: -12.53138825,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub hidden_dim: usize,
    pub density: f64,
    pub washout: usize,
    /// Explicit macro parameters; required for training unless `optimize`.
    pub params: Option<MacroSection>,
    pub optimize: bool,
    /// Present for patched (ring-tiled) models, absent for global ones.
    pub layout: Option<LayoutSection>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            hidden_dim: 1600,
            density: 0.01,
            washout: 1_000,
            params: Some(TUNED_6D_N1600),
            optimize: false,
            layout: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutSection {
    pub patch_size: usize,
    pub halo: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    /// Observed components replace the network input (or the model state
    /// for the perfect-model variant) at each observation time.
    DirectInsertion,
    Etkf,
    Fourdvar,
    Letkf,
    PerfectInsertion,
    PerfectEtkf,
    PerfectFourdvar,
}

impl SchemeKind {
    pub fn is_perfect_model(self) -> bool {
        matches!(
            self,
            SchemeKind::PerfectInsertion | SchemeKind::PerfectEtkf | SchemeKind::PerfectFourdvar
        )
    }

    pub fn needs_ensemble(self) -> bool {
        matches!(self, SchemeKind::Etkf | SchemeKind::Letkf | SchemeKind::PerfectEtkf)
    }

    pub fn is_variational(self) -> bool {
        matches!(self, SchemeKind::Fourdvar | SchemeKind::PerfectFourdvar)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AssimSection {
    pub scheme: SchemeKind,
    pub ensemble_size: usize,
    pub gamma: f64,
    pub tau_obs: f64,
    pub tau_da: f64,
    /// Std of the noise actually added to observations.
    pub sigma_noise: f64,
    /// Std assumed by the assimilation (R = σ_obs² I).
    pub sigma_obs: f64,
    pub obs_nodes: Vec<usize>,
    pub duration_mtu: f64,
    /// Scores are time-averaged over cycles at or after this offset.
    pub spinup_mtu: f64,
    /// Member-init perturbation std applied to the truth window.
    pub sigma_init: f64,
    /// Constant shift added to the member-init data, for starts far from
    /// the truth.
    pub init_offset: f64,
    /// History steps used to spin hidden states up before the first cycle.
    pub init_window: usize,
    pub outer_loops: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    /// Background std for variational runs; defaults to σ_obs.
    pub sigma_b: Option<f64>,
}

impl Default for AssimSection {
    fn default() -> Self {
        AssimSection {
            scheme: SchemeKind::Etkf,
            ensemble_size: 10,
            gamma: 1.2,
            tau_obs: 0.2,
            tau_da: 0.2,
            sigma_noise: 0.5,
            sigma_obs: 0.5,
            obs_nodes: vec![0, 1, 3],
            duration_mtu: 100.0,
            spinup_mtu: 50.0,
            sigma_init: 0.5,
            init_offset: 0.0,
            init_window: 1_000,
            outer_loops: 2,
            inner_tol: 1e-8,
            inner_max_iter: 500,
            sigma_b: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    /// Forecast count for the valid-time histogram; defaults to 100000
    /// below ten nodes and 1000 otherwise.
    pub n_vpt_forecasts: Option<usize>,
    pub vpt_horizon_mtu: f64,
    pub epsilon: f64,
    pub ftle_n_ic: usize,
    pub ftle_horizons_mtu: Vec<f64>,
    pub corr_members: usize,
    pub corr_samples: usize,
    pub corr_horizon_mtu: f64,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        EvaluateSection {
            n_vpt_forecasts: None,
            vpt_horizon_mtu: 25.0,
            epsilon: 0.2,
            ftle_n_ic: 100,
            ftle_horizons_mtu: vec![0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 3.0, 5.0, 7.5, 10.0],
            corr_members: 10,
            corr_samples: 10,
            corr_horizon_mtu: 2.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MacroOptSection {
    pub n_forecasts: usize,
    pub forecast_len: usize,
    pub n_init: usize,
    pub n_iter: usize,
    pub batch: usize,
    pub n_ei_starts: usize,
}

impl Default for MacroOptSection {
    fn default() -> Self {
        MacroOptSection {
            n_forecasts: 100,
            forecast_len: 1_000,
            n_init: 10,
            n_iter: 15,
            batch: 4,
            n_ei_starts: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SeedSection {
    /// Drives data, observation noise, member perturbations, optimizer.
    pub master: u64,
    /// Network wiring, independent of the master so the same architecture
    /// can face different data.
    pub model: u64,
    /// Forecast-start sampling in the macro loss.
    pub sample: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathSection {
    pub out: PathBuf,
}

impl Default for PathSection {
    fn default() -> Self {
        PathSection {
            out: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axes: Vec<SweepAxis>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted config path, restricted to the assimilation section so grid
    /// points share one dataset and one trained model.
    pub key: String,
    pub values: Vec<toml::Value>,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let sys = &self.system;
        if sys.dim < 4 {
            return Err(Error::Config(format!("system.dim must be >= 4, got {}", sys.dim)));
        }
        if !(sys.dt > 0.0 && sys.dt.is_finite()) {
            return Err(Error::Config(format!("system.dt must be positive, got {}", sys.dt)));
        }
        if !sys.forcing.is_finite() {
            return Err(Error::Config("system.forcing must be finite".into()));
        }
        if self.dataset.train_steps < 2 || self.dataset.test_steps < 2 {
            return Err(Error::Config("dataset segments need at least 2 steps".into()));
        }

        let a = &self.assimilation;
        let stride_obs = step_multiple(a.tau_obs, sys.dt, "assimilation.tau_obs")?;
        let stride_da = step_multiple(a.tau_da, sys.dt, "assimilation.tau_da")?;
        step_multiple(a.tau_da, a.tau_obs, "tau_da / tau_obs")?;
        if a.init_window % stride_obs != 0 {
            return Err(Error::Config(format!(
                "init_window {} must be a multiple of tau_obs/dt = {stride_obs} so analysis \
                 times land on the observation grid",
                a.init_window
            )));
        }
        let n_cycles = step_multiple(a.duration_mtu, a.tau_da, "duration_mtu / tau_da")?;
        if !(a.spinup_mtu >= 0.0 && a.spinup_mtu <= a.duration_mtu) {
            return Err(Error::Config(format!(
                "spinup_mtu {} must lie in [0, duration_mtu {}]",
                a.spinup_mtu, a.duration_mtu
            )));
        }
        if a.obs_nodes.is_empty() {
            return Err(Error::Config("assimilation.obs_nodes must not be empty".into()));
        }
        let mut seen = vec![false; sys.dim];
        for &node in &a.obs_nodes {
            if node >= sys.dim {
                return Err(Error::Config(format!(
                    "obs node {node} outside the {}-node system",
                    sys.dim
                )));
            }
            if seen[node] {
                return Err(Error::Config(format!("duplicate obs node {node}")));
            }
            seen[node] = true;
        }
        if !(a.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be positive, got {}", a.gamma)));
        }
        if a.sigma_noise < 0.0 || !(a.sigma_obs > 0.0) || a.sigma_init < 0.0 {
            return Err(Error::Config(
                "need sigma_noise >= 0, sigma_obs > 0, sigma_init >= 0".into(),
            ));
        }
        if let Some(sb) = a.sigma_b {
            if !(sb > 0.0) {
                return Err(Error::Config(format!("sigma_b must be positive, got {sb}")));
            }
        }

        match a.scheme {
            SchemeKind::DirectInsertion | SchemeKind::PerfectInsertion => {
                if (a.tau_da - a.tau_obs).abs() > 1e-9 * a.tau_da.max(1.0) {
                    return Err(Error::Config(
                        "direct insertion updates at every observation: set tau_da = tau_obs".into(),
                    ));
                }
            }
            SchemeKind::Etkf | SchemeKind::Letkf | SchemeKind::PerfectEtkf => {
                if a.ensemble_size < 2 {
                    return Err(Error::Config(format!(
                        "ensemble schemes need ensemble_size >= 2, got {}",
                        a.ensemble_size
                    )));
                }
                if a.gamma < 1.0 {
                    return Err(Error::Config(format!(
                        "multiplicative inflation gamma must be >= 1, got {}",
                        a.gamma
                    )));
                }
            }
            SchemeKind::Fourdvar | SchemeKind::PerfectFourdvar => {
                if a.outer_loops == 0 {
                    return Err(Error::Config("fourdvar needs outer_loops >= 1".into()));
                }
                if !(a.inner_tol > 0.0) || a.inner_max_iter == 0 {
                    return Err(Error::Config(
                        "fourdvar needs inner_tol > 0 and inner_max_iter >= 1".into(),
                    ));
                }
            }
        }

        let m = &self.model;
        if !a.scheme.is_perfect_model() {
            if m.hidden_dim == 0 {
                return Err(Error::Config("model.hidden_dim must be positive".into()));
            }
            if !(m.density > 0.0 && m.density <= 1.0) {
                return Err(Error::Config(format!(
                    "model.density must lie in (0, 1], got {}",
                    m.density
                )));
            }
            if m.washout + 2 > self.dataset.train_steps {
                return Err(Error::Config(format!(
                    "washout {} leaves no training data in {} steps",
                    m.washout, self.dataset.train_steps
                )));
            }
            match (a.scheme, &m.layout) {
                (SchemeKind::Letkf, None) => {
                    return Err(Error::Config("letkf needs a [model.layout] section".into()));
                }
                (SchemeKind::Letkf, Some(l)) => {
                    crate::localization::PatchLayout::new(sys.dim, l.patch_size, l.halo)?;
                }
                (_, Some(_)) => {
                    return Err(Error::Config(format!(
                        "scheme {:?} runs on a global model; remove [model.layout]",
                        a.scheme
                    )));
                }
                (_, None) => {}
            }
            if a.init_window == 0 {
                return Err(Error::Config("init_window must be positive for network schemes".into()));
            }
        }

        let start_idx = a.init_window;
        let last_needed = start_idx + n_cycles * stride_da;
        if last_needed >= self.dataset.test_steps {
            return Err(Error::Config(format!(
                "test run too short: {} cycles from step {start_idx} need {last_needed} steps, have {}",
                n_cycles, self.dataset.test_steps
            )));
        }

        let e = &self.evaluate;
        if !(e.epsilon > 0.0) || !(e.vpt_horizon_mtu > 0.0) {
            return Err(Error::Config("evaluate needs epsilon > 0 and vpt_horizon_mtu > 0".into()));
        }
        if e.ftle_horizons_mtu.is_empty()
            || e.ftle_horizons_mtu.windows(2).any(|w| w[0] >= w[1])
            || e.ftle_horizons_mtu[0] <= 0.0
        {
            return Err(Error::Config(
                "ftle_horizons_mtu must be positive and strictly increasing".into(),
            ));
        }
        if e.corr_members < 2 {
            return Err(Error::Config("corr_members must be >= 2".into()));
        }

        if let Some(sweep) = &self.sweep {
            if sweep.axes.is_empty() {
                return Err(Error::Config("sweep needs at least one axis".into()));
            }
            for axis in &sweep.axes {
                if !axis.key.starts_with("assimilation.") {
                    return Err(Error::Config(format!(
                        "sweep axis '{}' must target the assimilation section",
                        axis.key
                    )));
                }
                if axis.values.is_empty() {
                    return Err(Error::Config(format!("sweep axis '{}' has no values", axis.key)));
                }
            }
        }
        Ok(())
    }

    /// Resolved background std for variational runs.
    pub fn sigma_b(&self) -> f64 {
        self.assimilation.sigma_b.unwrap_or(self.assimilation.sigma_obs)
    }

    /// Step counts derived from the time grid (validated).
    pub fn stride_da(&self) -> Result<usize> {
        step_multiple(self.assimilation.tau_da, self.system.dt, "tau_da")
    }

    pub fn n_cycles(&self) -> Result<usize> {
        step_multiple(self.assimilation.duration_mtu, self.assimilation.tau_da, "duration_mtu")
    }

    pub fn to_table(&self) -> Result<toml::Table> {
        let value = toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))?;
        match value {
            toml::Value::Table(t) => Ok(t),
            other => Err(Error::Config(format!("config serialized to non-table {other:?}"))),
        }
    }

    pub fn from_table(table: toml::Table) -> Result<Self> {
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("bad configuration: {e}")))
    }
}

/// Parse the right-hand side of an override as a TOML literal, falling
/// back to a bare string ("etkf" and etkf both work).
fn parse_value(raw: &str) -> toml::Value {
    if let Ok(table) = toml::Table::from_str(&format!("v = {raw}")) {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

/// Assign `value` at a dotted path, creating intermediate tables.
pub fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut current = table;
    loop {
        let part = parts
            .next()
            .ok_or_else(|| Error::Config(format!("empty override key '{key}'")))?;
        if part.is_empty() {
            return Err(Error::Config(format!("override key '{key}' has an empty segment")));
        }
        if parts.peek().is_none() {
            current.insert(part.to_string(), value);
            return Ok(());
        }
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry.as_table_mut().ok_or_else(|| {
            Error::Config(format!("override '{key}' descends into non-table '{part}'"))
        })?;
    }
}

pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{item}' is not KEY=VALUE")))?;
        set_path(table, key.trim(), parse_value(raw.trim()))?;
    }
    Ok(())
}

/// Build the final configuration from an optional file, CLI overrides,
/// and CLI seed/output settings, then validate it.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::Table::from_str(&text).map_err(|e| Error::Format {
                path: p.display().to_string(),
                detail: e.to_string(),
            })?
        }
        None => toml::Table::new(),
    };
    apply_overrides(&mut table, overrides)?;
    let mut cfg = ExperimentConfig::from_table(table)?;
    if let Some(s) = seed {
        cfg.seeds.master = s;
    }
    if let Some(o) = out {
        cfg.paths.out = o;
    }
    cfg.validate()?;
    Ok(cfg)
}
