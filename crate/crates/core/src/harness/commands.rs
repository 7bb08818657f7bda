//! The work behind each CLI verb. Every command reads and writes a fixed
//! layout under the configured output directory:
//!
//! ```text
//! out/dataset/   train.traj  test.traj  dataset.json
//! out/model/     reservoir.model | patched.model  train.json
//! out/run/       cycles.csv  [var_trace.csv]  summary.json
//! out/evaluate/  vpt.csv  [ftle.csv  correlation.csv]  evaluate.json
//! out/sweep/     runs/p0000/...  sweep.csv  sweep.json
//! ```
//!
//! Outputs embed the resolved configuration and all seeds; nothing depends
//! on wall-clock time, so reruns are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rayon::prelude::*;
use serde::Serialize;

use crate::assimilation::{
    cycle_direct_insertion, cycle_etkf, cycle_fourdvar, cycle_rnn_insertion, init_hidden_members,
    init_system_members, CycleConfig, CycleContext, CycleDiagnostics, CycleSummary, L96DaModel,
    RnnDaModel, VarConfig,
};
use crate::error::{Error, Result};
use crate::harness::config::{set_path, ExperimentConfig, MacroSection, SchemeKind};
use crate::harness::io;
use crate::l96::{
    generate_dataset, integrate_from, sample_observations, step_multiple, DatasetConfig,
    Trajectory,
};
use crate::localization::{
    init_patched_members, letkf_cycle, train_patched, PatchLayout, PatchedReservoir,
};
use crate::lyapunov::{ftle_profile, l96_tangent_stream, rnn_tangent_stream};
use crate::macro_training::{
    build_candidate, optimize_macro, optimize_patched_macro, EgoConfig, MacroLossConfig,
};
use crate::metrics::{climatological_std, error_correlation_rmse, nrmse, CorrReference, EnsembleTraj};
use crate::reservoir::ReservoirModel;
use crate::rng::{stream, stream_rng};

pub struct CmdOutcome {
    /// At least one cycled run tripped the divergence guard. Maps to a
    /// distinct exit code: the command completed, but the state estimate
    /// lost the truth.
    pub diverged: bool,
}

fn dataset_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.out.join("dataset")
}

fn model_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.out.join("model")
}

fn require_file(path: &Path, hint: &str) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Config(format!("{} not found; {hint}", path.display())));
    }
    Ok(())
}

#[derive(Serialize)]
struct DatasetDoc<'a> {
    config: &'a ExperimentConfig,
    train_t0: f64,
    test_t0: f64,
    sigma_clim: Vec<f64>,
}

pub fn cmd_generate(cfg: &ExperimentConfig) -> Result<CmdOutcome> {
    let dir = dataset_dir(cfg);
    fs::create_dir_all(&dir)?;
    let data = generate_dataset(&DatasetConfig {
        dim: cfg.system.dim,
        forcing: cfg.system.forcing,
        dt: cfg.system.dt,
        train_steps: cfg.dataset.train_steps,
        test_steps: cfg.dataset.test_steps,
        spinup_steps: cfg.dataset.spinup_steps,
        master_seed: cfg.seeds.master,
    })?;
    io::save_trajectory(&dir.join("train.traj"), &data.train)?;
    io::save_trajectory(&dir.join("test.traj"), &data.test)?;
    let sigma = climatological_std(&data.train)?;
    io::write_json(
        &dir.join("dataset.json"),
        &DatasetDoc {
            config: cfg,
            train_t0: data.train.t0,
            test_t0: data.test.t0,
            sigma_clim: sigma.iter().copied().collect(),
        },
    )?;
    log::info!(
        "dataset: {} train + {} test steps of a {}-node run in {}",
        cfg.dataset.train_steps,
        cfg.dataset.test_steps,
        cfg.system.dim,
        dir.display()
    );
    Ok(CmdOutcome { diverged: false })
}

#[derive(Serialize)]
struct TrainDoc<'a> {
    config: &'a ExperimentConfig,
    patched: bool,
    optimized: bool,
    params: MacroSection,
    /// Forecast loss of the accepted point (optimized runs only).
    loss: Option<f64>,
    evaluations: Option<usize>,
}

fn loss_config(cfg: &ExperimentConfig) -> MacroLossConfig {
    MacroLossConfig {
        hidden_dim: cfg.model.hidden_dim,
        density: cfg.model.density,
        n_forecasts: cfg.macro_opt.n_forecasts,
        forecast_len: cfg.macro_opt.forecast_len,
        washout: cfg.model.washout,
        reservoir_seed: cfg.seeds.model,
        sample_seed: cfg.seeds.sample,
    }
}

fn ego_config(cfg: &ExperimentConfig) -> EgoConfig {
    EgoConfig {
        n_init: cfg.macro_opt.n_init,
        n_iter: cfg.macro_opt.n_iter,
        batch: cfg.macro_opt.batch,
        n_ei_starts: cfg.macro_opt.n_ei_starts,
    }
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<CmdOutcome> {
    let train_path = dataset_dir(cfg).join("train.traj");
    require_file(&train_path, "run `rnnda generate` first")?;
    let train = io::load_trajectory(&train_path)?;
    if train.dim() != cfg.system.dim {
        return Err(Error::Config(format!(
            "stored training data has {} nodes, config asks for {}; regenerate",
            train.dim(),
            cfg.system.dim
        )));
    }
    let dir = model_dir(cfg);
    fs::create_dir_all(&dir)?;
    let loss_cfg = loss_config(cfg);

    let explicit = || {
        cfg.model.params.ok_or_else(|| {
            Error::Config("no [model.params] given and model.optimize is off".into())
        })
    };

    let doc;
    if let Some(layout_cfg) = &cfg.model.layout {
        let layout = PatchLayout::new(cfg.system.dim, layout_cfg.patch_size, layout_cfg.halo)?;
        let (params, loss, evals) = if cfg.model.optimize {
            let (p, l, res) =
                optimize_patched_macro(&layout, &train, &loss_cfg, &ego_config(cfg), cfg.seeds.master)?;
            (p, Some(l), Some(res.history.len()))
        } else {
            (explicit()?.to_params(), None, None)
        };
        let patched = train_patched(
            layout,
            cfg.model.hidden_dim,
            cfg.model.density,
            params,
            &train,
            cfg.model.washout,
            cfg.seeds.model,
        )?;
        io::save_patched(&dir.join("patched.model"), &patched)?;
        doc = TrainDoc {
            config: cfg,
            patched: true,
            optimized: cfg.model.optimize,
            params: MacroSection::from_params(&params),
            loss,
            evaluations: evals,
        };
        log::info!(
            "trained {} patches of {} units each in {}",
            patched.patches().len(),
            cfg.model.hidden_dim,
            dir.display()
        );
    } else {
        let (params, loss, evals) = if cfg.model.optimize {
            let (p, l, res) = optimize_macro(&train, &loss_cfg, &ego_config(cfg), cfg.seeds.master)?;
            (p, Some(l), Some(res.history.len()))
        } else {
            (explicit()?.to_params(), None, None)
        };
        let model = build_candidate(&params, &train, &loss_cfg)?;
        io::save_model(&dir.join("reservoir.model"), &model)?;
        doc = TrainDoc {
            config: cfg,
            patched: false,
            optimized: cfg.model.optimize,
            params: MacroSection::from_params(&params),
            loss,
            evaluations: evals,
        };
        log::info!(
            "trained a {}-unit network (rho={:.4}, sigma={:.4}, leak={:.4}) in {}",
            cfg.model.hidden_dim,
            params.rho,
            params.sigma_in,
            params.leak,
            dir.display()
        );
    }
    io::write_json(&dir.join("train.json"), &doc)?;
    Ok(CmdOutcome { diverged: false })
}

/// Dataset and model artifacts shared by run, evaluate, and every sweep
/// point. Loaded once; read-only afterwards.
pub struct LoadedInputs {
    pub train: Trajectory,
    pub test: Trajectory,
    pub global: Option<ReservoirModel>,
    pub patched: Option<PatchedReservoir>,
}

fn model_needs(scheme: SchemeKind) -> (bool, bool) {
    if scheme.is_perfect_model() {
        (false, false)
    } else {
        (scheme != SchemeKind::Letkf, scheme == SchemeKind::Letkf)
    }
}

pub fn load_inputs(
    cfg: &ExperimentConfig,
    need_global: bool,
    need_patched: bool,
) -> Result<LoadedInputs> {
    let ddir = dataset_dir(cfg);
    require_file(&ddir.join("train.traj"), "run `rnnda generate` first")?;
    let train = io::load_trajectory(&ddir.join("train.traj"))?;
    let test = io::load_trajectory(&ddir.join("test.traj"))?;
    if train.dim() != cfg.system.dim || test.dim() != cfg.system.dim {
        return Err(Error::Config(format!(
            "stored data has {} nodes, config asks for {}; regenerate",
            train.dim(),
            cfg.system.dim
        )));
    }
    let global = if need_global {
        let path = model_dir(cfg).join("reservoir.model");
        require_file(&path, "run `rnnda train` first")?;
        let model = io::load_model(&path)?;
        if model.input_dim() != cfg.system.dim {
            return Err(Error::Config(format!(
                "stored model reads {} nodes, config asks for {}; retrain",
                model.input_dim(),
                cfg.system.dim
            )));
        }
        Some(model)
    } else {
        None
    };
    let patched = if need_patched {
        let path = model_dir(cfg).join("patched.model");
        require_file(&path, "run `rnnda train` first")?;
        let patched = io::load_patched(&path)?;
        if patched.layout().system_dim() != cfg.system.dim {
            return Err(Error::Config(format!(
                "stored patched model covers {} nodes, config asks for {}; retrain",
                patched.layout().system_dim(),
                cfg.system.dim
            )));
        }
        Some(patched)
    } else {
        None
    };
    Ok(LoadedInputs {
        train,
        test,
        global,
        patched,
    })
}

fn require_global<'a>(inputs: &'a LoadedInputs) -> Result<&'a ReservoirModel> {
    inputs
        .global
        .as_ref()
        .ok_or_else(|| Error::Config("this scheme needs a trained global model".into()))
}

fn require_patched<'a>(inputs: &'a LoadedInputs) -> Result<&'a PatchedReservoir> {
    inputs
        .patched
        .as_ref()
        .ok_or_else(|| Error::Config("letkf needs a trained patched model".into()))
}

/// Truth window preceding the start column, optionally displaced by a
/// constant so the estimate can begin far from the true state.
fn init_window_traj(
    nature: &Trajectory,
    start_idx: usize,
    window: usize,
    offset: f64,
) -> Result<Trajectory> {
    if start_idx < window {
        return Err(Error::Config(format!(
            "member init needs {window} steps of history before start index {start_idx}"
        )));
    }
    let mut states = nature.states.columns(start_idx - window, window).clone_owned();
    if offset != 0.0 {
        states.add_scalar_mut(offset);
    }
    Trajectory::new(states, nature.dt, nature.time(start_idx - window))
}

fn hidden_members(
    cfg: &ExperimentConfig,
    model: &ReservoirModel,
    nature: &Trajectory,
    start_idx: usize,
    k: usize,
) -> Result<Vec<DVector<f64>>> {
    let a = &cfg.assimilation;
    let win = init_window_traj(nature, start_idx, a.init_window, a.init_offset)?;
    init_hidden_members(
        model,
        &win,
        a.init_window,
        a.init_window,
        a.sigma_init,
        k,
        cfg.seeds.master,
    )
}

fn patched_members(
    cfg: &ExperimentConfig,
    patched: &PatchedReservoir,
    nature: &Trajectory,
    start_idx: usize,
    k: usize,
) -> Result<Vec<Vec<DVector<f64>>>> {
    let a = &cfg.assimilation;
    let win = init_window_traj(nature, start_idx, a.init_window, a.init_offset)?;
    init_patched_members(
        patched,
        &win,
        a.init_window,
        a.init_window,
        a.sigma_init,
        k,
        cfg.seeds.master,
    )
}

fn system_members(
    cfg: &ExperimentConfig,
    nature: &Trajectory,
    start_idx: usize,
    k: usize,
) -> Vec<DVector<f64>> {
    let a = &cfg.assimilation;
    let mut members = init_system_members(nature, start_idx, a.sigma_init, k, cfg.seeds.master);
    if a.init_offset != 0.0 {
        for m in &mut members {
            m.add_scalar_mut(a.init_offset);
        }
    }
    members
}

fn var_config(cfg: &ExperimentConfig) -> Result<VarConfig> {
    Ok(VarConfig {
        sigma_b: cfg.sigma_b(),
        window_steps: cfg.stride_da()?,
        outer_loops: cfg.assimilation.outer_loops,
        inner_tol: cfg.assimilation.inner_tol,
        inner_max_iter: cfg.assimilation.inner_max_iter,
    })
}

#[derive(Serialize)]
struct RunDoc<'a> {
    config: &'a ExperimentConfig,
    start_time: f64,
    score_from_time: f64,
    n_cycles: usize,
    diverged: bool,
    diverged_at: Option<usize>,
    an_nrmse_obs: f64,
    an_nrmse_unobs: f64,
    an_nrmse_all: f64,
    an_rmse_all: f64,
}

pub struct RunResult {
    pub summary: CycleSummary,
    pub diverged: bool,
    pub diverged_at: Option<usize>,
}

/// One cycled twin experiment into `run_dir`. The divergence guard makes
/// a lost run a result, not an error.
pub fn run_once(
    cfg: &ExperimentConfig,
    inputs: &LoadedInputs,
    run_dir: &Path,
) -> Result<RunResult> {
    fs::create_dir_all(run_dir)?;
    let a = &cfg.assimilation;
    let test = &inputs.test;
    let sigma_clim = climatological_std(&inputs.train)?;
    let obs = sample_observations(
        test,
        &a.obs_nodes,
        a.tau_obs,
        a.sigma_noise,
        a.sigma_obs,
        cfg.seeds.master,
    )?;
    let start_idx = a.init_window;
    // Analyses at t, t+tau_da, ..., t+duration inclusive.
    let n_analyses = cfg.n_cycles()? + 1;
    let k = a.ensemble_size;
    let ctx = CycleContext {
        nature: test,
        obs: &obs,
        start_idx,
        cfg: CycleConfig::new(a.tau_da, n_analyses, a.gamma, sigma_clim),
    };

    let diag: CycleDiagnostics = match a.scheme {
        SchemeKind::PerfectEtkf => {
            let model = L96DaModel::new(cfg.system.dim, cfg.system.dt, cfg.system.forcing, &a.obs_nodes)?;
            let members = system_members(cfg, test, start_idx, k);
            cycle_etkf(&model, members, &ctx, a.sigma_obs)?
        }
        SchemeKind::PerfectInsertion => {
            let model = L96DaModel::new(cfg.system.dim, cfg.system.dt, cfg.system.forcing, &a.obs_nodes)?;
            let x0 = system_members(cfg, test, start_idx, 1).pop().expect("k = 1");
            cycle_direct_insertion(&model, x0, &ctx)?
        }
        SchemeKind::PerfectFourdvar => {
            let model = L96DaModel::new(cfg.system.dim, cfg.system.dt, cfg.system.forcing, &a.obs_nodes)?;
            let x0 = system_members(cfg, test, start_idx, 1).pop().expect("k = 1");
            cycle_fourdvar(&model, x0, &ctx, &var_config(cfg)?)?
        }
        SchemeKind::Etkf => {
            let model = require_global(inputs)?;
            let da = RnnDaModel::new(model, &a.obs_nodes)?;
            let members = hidden_members(cfg, model, test, start_idx, k)?;
            cycle_etkf(&da, members, &ctx, a.sigma_obs)?
        }
        SchemeKind::DirectInsertion => {
            let model = require_global(inputs)?;
            let s0 = hidden_members(cfg, model, test, start_idx, 1)?.pop().expect("k = 1");
            cycle_rnn_insertion(model, s0, &ctx)?
        }
        SchemeKind::Fourdvar => {
            let model = require_global(inputs)?;
            let da = RnnDaModel::new(model, &a.obs_nodes)?;
            let s0 = hidden_members(cfg, model, test, start_idx, 1)?.pop().expect("k = 1");
            cycle_fourdvar(&da, s0, &ctx, &var_config(cfg)?)?
        }
        SchemeKind::Letkf => {
            let patched = require_patched(inputs)?;
            let members = patched_members(cfg, patched, test, start_idx, k)?;
            letkf_cycle(patched, members, &ctx, a.sigma_obs)?
        }
    };

    io::write_cycles_csv(&run_dir.join("cycles.csv"), &diag.records)?;
    if a.scheme.is_variational() {
        io::write_var_trace_csv(&run_dir.join("var_trace.csv"), &diag.var_trace)?;
    }
    let start_time = test.time(start_idx);
    let score_from = start_time + a.spinup_mtu;
    let summary = diag.summary_from(score_from);
    let diverged = diag.diverged_at.is_some();
    io::write_json(
        &run_dir.join("summary.json"),
        &RunDoc {
            config: cfg,
            start_time,
            score_from_time: score_from,
            n_cycles: diag.records.len(),
            diverged,
            diverged_at: diag.diverged_at,
            an_nrmse_obs: summary.an_nrmse_obs,
            an_nrmse_unobs: summary.an_nrmse_unobs,
            an_nrmse_all: summary.an_nrmse_all,
            an_rmse_all: summary.an_rmse_all,
        },
    )?;
    if let Some(cycle) = diag.diverged_at {
        log::warn!("run in {} diverged at cycle {cycle}", run_dir.display());
    } else {
        log::info!(
            "run in {}: analysis NRMSE {:.3} (obs) / {:.3} (unobs) after spinup",
            run_dir.display(),
            summary.an_nrmse_obs,
            summary.an_nrmse_unobs
        );
    }
    Ok(RunResult {
        summary,
        diverged,
        diverged_at: diag.diverged_at,
    })
}

pub fn cmd_run(cfg: &ExperimentConfig) -> Result<CmdOutcome> {
    let (need_global, need_patched) = model_needs(cfg.assimilation.scheme);
    let inputs = load_inputs(cfg, need_global, need_patched)?;
    let result = run_once(cfg, &inputs, &cfg.paths.out.join("run"))?;
    Ok(CmdOutcome {
        diverged: result.diverged,
    })
}

/// Evenly spaced selection of `n` columns from [lo, hi]; all of them when
/// the range is smaller than the request.
fn spaced_indices(lo: usize, hi: usize, n: usize) -> Vec<usize> {
    if hi < lo || n == 0 {
        return Vec::new();
    }
    let count = hi - lo + 1;
    if n >= count {
        return (lo..=hi).collect();
    }
    if n == 1 {
        return vec![lo + (count - 1) / 2];
    }
    (0..n).map(|i| lo + i * (count - 1) / (n - 1)).collect()
}

enum EvalModel<'a> {
    Global(&'a ReservoirModel),
    Patched(&'a PatchedReservoir),
}

/// Forecast horizon split into bounded chunks so long horizons never
/// materialize a full trajectory; stops at the first tolerance crossing.
/// Matches the one-shot scan: the result is the largest lead time with
/// every earlier error below epsilon.
const VPT_CHUNK: usize = 128;

fn chunked_vpt_global(
    model: &ReservoirModel,
    s0: &DVector<f64>,
    test: &Trajectory,
    start: usize,
    horizon: usize,
    sigma_clim: &DVector<f64>,
    epsilon: f64,
    all: &[usize],
) -> Result<f64> {
    let dt = test.dt;
    let mut s = s0.clone();
    let mut x = test.state(start);
    let mut offset = 0usize;
    while offset < horizon {
        let n_chunk = (horizon - offset).min(VPT_CHUNK);
        match model.free_forecast(&s, &x, n_chunk, dt, test.time(start + offset)) {
            Ok(fc) => {
                let truth = test.states.columns(start + 1 + offset, n_chunk).clone_owned();
                let err = nrmse(&fc.states.states, &truth, sigma_clim, all)?;
                if let Some(pos) = err.iter().position(|&e| e >= epsilon) {
                    return Ok((offset + pos) as f64 * dt);
                }
                s.copy_from(&fc.hidden.column(n_chunk - 1));
                x.copy_from(&fc.states.states.column(n_chunk - 1));
                offset += n_chunk;
            }
            // Blowup this far in means the tolerance fell at the last
            // finite step at the latest.
            Err(Error::Diverged { cycle, .. }) => {
                return Ok((offset + cycle.saturating_sub(1)) as f64 * dt)
            }
            Err(e) => return Err(e),
        }
    }
    Ok(horizon as f64 * dt)
}

fn chunked_vpt_patched(
    patched: &PatchedReservoir,
    hidden0: &[DVector<f64>],
    test: &Trajectory,
    start: usize,
    horizon: usize,
    sigma_clim: &DVector<f64>,
    epsilon: f64,
    all: &[usize],
) -> Result<f64> {
    let dt = test.dt;
    let mut hidden: Vec<DVector<f64>> = hidden0.to_vec();
    let mut x = test.state(start);
    let mut offset = 0usize;
    while offset < horizon {
        let n_chunk = (horizon - offset).min(VPT_CHUNK);
        match patched.free_forecast(&mut hidden, &x, n_chunk) {
            Ok(fc) => {
                let truth = test.states.columns(start + 1 + offset, n_chunk).clone_owned();
                let err = nrmse(&fc, &truth, sigma_clim, all)?;
                if let Some(pos) = err.iter().position(|&e| e >= epsilon) {
                    return Ok((offset + pos) as f64 * dt);
                }
                x.copy_from(&fc.column(n_chunk - 1));
                offset += n_chunk;
            }
            Err(Error::Diverged { cycle, .. }) => {
                return Ok((offset + cycle.saturating_sub(1)) as f64 * dt)
            }
            Err(e) => return Err(e),
        }
    }
    Ok(horizon as f64 * dt)
}

#[derive(Serialize)]
struct VptRow {
    start_time: f64,
    vpt_mtu: f64,
}

/// One teacher-forced pass over the test run, forking a closed-loop
/// forecast at each start. The walk state is the hidden state *before*
/// consuming the start column, matching the forecast convention.
fn vpt_table(
    kind: &EvalModel,
    test: &Trajectory,
    sigma_clim: &DVector<f64>,
    starts: &[usize],
    horizon: usize,
    epsilon: f64,
) -> Result<Vec<VptRow>> {
    let all: Vec<usize> = (0..test.dim()).collect();
    let mut rows = Vec::with_capacity(starts.len());
    match kind {
        EvalModel::Global(model) => {
            let n = model.hidden_dim();
            let mut s = DVector::zeros(n);
            let mut scratch = DVector::zeros(n);
            let mut x = DVector::zeros(model.input_dim());
            let mut next = 0usize;
            for j in 0..test.len() {
                while next < starts.len() && starts[next] == j {
                    let v = chunked_vpt_global(model, &s, test, j, horizon, sigma_clim, epsilon, &all)?;
                    rows.push(VptRow {
                        start_time: test.time(j),
                        vpt_mtu: v,
                    });
                    next += 1;
                }
                if next >= starts.len() {
                    break;
                }
                x.copy_from(&test.states.column(j));
                model.step_hidden_buf(&mut s, &x, &mut scratch);
            }
        }
        EvalModel::Patched(patched) => {
            let layout = patched.layout();
            let mut hidden: Vec<DVector<f64>> = patched
                .patches()
                .iter()
                .map(|m| DVector::zeros(m.hidden_dim()))
                .collect();
            let mut scratch = hidden.clone();
            let mut next = 0usize;
            for j in 0..test.len() {
                while next < starts.len() && starts[next] == j {
                    let v = chunked_vpt_patched(
                        patched, &hidden, test, j, horizon, sigma_clim, epsilon, &all,
                    )?;
                    rows.push(VptRow {
                        start_time: test.time(j),
                        vpt_mtu: v,
                    });
                    next += 1;
                }
                if next >= starts.len() {
                    break;
                }
                let x = test.state(j);
                for (p, (model, s)) in patched.patches().iter().zip(hidden.iter_mut()).enumerate() {
                    let local = layout.gather(p, &x);
                    model.step_hidden_buf(s, &local, &mut scratch[p]);
                }
            }
        }
    }
    Ok(rows)
}

#[derive(Serialize)]
struct FtleRow {
    horizon_mtu: f64,
    network_mean: f64,
    network_std: f64,
    reference_mean: f64,
    reference_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Leading finite-time exponents of the closed-loop network against the
/// reference dynamics, from initial conditions spread over the test run.
fn ftle_table(
    cfg: &ExperimentConfig,
    model: &ReservoirModel,
    test: &Trajectory,
) -> Result<Vec<FtleRow>> {
    let dt = test.dt;
    let e = &cfg.evaluate;
    let horizons: Vec<usize> = e
        .ftle_horizons_mtu
        .iter()
        .map(|&h| step_multiple(h, dt, "ftle horizon"))
        .collect::<Result<_>>()?;
    let max_h = *horizons.last().expect("validated non-empty");
    let sync = cfg.model.washout;
    let last = test
        .len()
        .checked_sub(max_h + 2)
        .ok_or_else(|| Error::Config("test run shorter than the longest FTLE horizon".into()))?;
    let starts = spaced_indices(sync, last, e.ftle_n_ic);
    if starts.is_empty() {
        return Err(Error::Config("no admissible FTLE start columns".into()));
    }
    let mut net = vec![Vec::with_capacity(starts.len()); horizons.len()];
    let mut reference = vec![Vec::with_capacity(starts.len()); horizons.len()];
    for (i, &c) in starts.iter().enumerate() {
        let window = test.states.columns(c - sync, sync).clone_owned();
        let s = model.drive(&window, &DVector::zeros(model.hidden_dim()))?;
        let mut rng = stream_rng(cfg.seeds.master, stream::TEST + 2 * i as u64);
        let profile = ftle_profile(rnn_tangent_stream(model, s)?, &horizons, dt, &mut rng)?;
        let segment = Trajectory::new(
            test.states.columns(c, max_h + 1).clone_owned(),
            dt,
            test.time(c),
        )?;
        let mut rng = stream_rng(cfg.seeds.master, stream::TEST + 2 * i as u64 + 1);
        let ref_profile = ftle_profile(
            l96_tangent_stream(&segment, cfg.system.forcing)?,
            &horizons,
            dt,
            &mut rng,
        )?;
        for (h, (&a, &b)) in profile.iter().zip(&ref_profile).enumerate() {
            net[h].push(a);
            reference[h].push(b);
        }
    }
    Ok(horizons
        .iter()
        .enumerate()
        .map(|(h, &steps)| {
            let (nm, ns) = mean_std(&net[h]);
            let (rm, rs) = mean_std(&reference[h]);
            FtleRow {
                horizon_mtu: steps as f64 * dt,
                network_mean: nm,
                network_std: ns,
                reference_mean: rm,
                reference_std: rs,
            }
        })
        .collect())
}

#[derive(Serialize)]
struct CorrRow {
    lead_mtu: f64,
    corr_rmse: f64,
}

/// Error-correlation fidelity: free ensembles of the network against
/// matched perfect-model ensembles, scored by the elementwise RMSE of the
/// two correlation matrices at each lead time, averaged over samples.
fn correlation_table(
    cfg: &ExperimentConfig,
    model: &ReservoirModel,
    test: &Trajectory,
) -> Result<Vec<CorrRow>> {
    let dt = test.dt;
    let e = &cfg.evaluate;
    let a = &cfg.assimilation;
    let horizon = step_multiple(e.corr_horizon_mtu, dt, "corr horizon")?;
    let window = a.init_window;
    let lo = window.max(cfg.model.washout);
    let last = test
        .len()
        .checked_sub(horizon + 1)
        .ok_or_else(|| Error::Config("test run shorter than the correlation horizon".into()))?;
    let starts = spaced_indices(lo, last, e.corr_samples);
    if starts.is_empty() {
        return Err(Error::Config("no admissible correlation start columns".into()));
    }
    let k = e.corr_members;
    let columns: Vec<usize> = (0..horizon).collect();
    let mut acc = vec![0.0; horizon];
    for (i, &c) in starts.iter().enumerate() {
        let seed = cfg.seeds.master.wrapping_add(stream::TEST).wrapping_add(i as u64);
        let hs = init_hidden_members(model, test, c, window, a.sigma_init, k, seed)?;
        let x0 = test.state(c);
        let mut net_members = Vec::with_capacity(k);
        for s in &hs {
            let fc = model.free_forecast(s, &x0, horizon, dt, test.time(c))?;
            net_members.push(fc.states.states);
        }
        let mut ref_members = Vec::with_capacity(k);
        for x in system_members_at(test, c, a.sigma_init, k, seed) {
            let traj = integrate_from(&x, dt, horizon, cfg.system.forcing, test.time(c))?;
            // Drop the initial column so lead times align with the network.
            ref_members.push(traj.states.columns(1, horizon).clone_owned());
        }
        let net_ens = EnsembleTraj::new(&net_members)?;
        let ref_ens = EnsembleTraj::new(&ref_members)?;
        let rmse = error_correlation_rmse(&net_ens, &CorrReference::Ensemble(&ref_ens), &columns)?;
        for (j, v) in rmse.into_iter().enumerate() {
            acc[j] += v;
        }
    }
    let n = starts.len() as f64;
    Ok((0..horizon)
        .map(|j| CorrRow {
            lead_mtu: (j + 1) as f64 * dt,
            corr_rmse: acc[j] / n,
        })
        .collect())
}

fn system_members_at(
    nature: &Trajectory,
    start_idx: usize,
    sigma_init: f64,
    k: usize,
    seed: u64,
) -> Vec<DVector<f64>> {
    init_system_members(nature, start_idx, sigma_init, k, seed)
}

#[derive(Serialize)]
struct VptSummary {
    count: usize,
    mean_mtu: f64,
    median_mtu: f64,
    min_mtu: f64,
    max_mtu: f64,
    horizon_mtu: f64,
    epsilon: f64,
}

#[derive(Serialize)]
struct EvaluateDoc<'a> {
    config: &'a ExperimentConfig,
    vpt: VptSummary,
    /// Tangent-space diagnostics run only for global models.
    ftle: bool,
    correlation: bool,
}

pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<CmdOutcome> {
    let is_patched = cfg.model.layout.is_some();
    let inputs = load_inputs(cfg, !is_patched, is_patched)?;
    let dir = cfg.paths.out.join("evaluate");
    fs::create_dir_all(&dir)?;
    let test = &inputs.test;
    let sigma_clim = climatological_std(&inputs.train)?;
    let e = &cfg.evaluate;
    let dt = cfg.system.dt;

    let kind = if is_patched {
        EvalModel::Patched(require_patched(&inputs)?)
    } else {
        EvalModel::Global(require_global(&inputs)?)
    };

    let horizon = step_multiple(e.vpt_horizon_mtu, dt, "vpt horizon")?;
    let n_req = e
        .n_vpt_forecasts
        .unwrap_or(if cfg.system.dim <= 9 { 100_000 } else { 1_000 });
    let sync = cfg.model.washout;
    let last = test
        .len()
        .checked_sub(horizon + 1)
        .filter(|&l| l >= sync)
        .ok_or_else(|| Error::Config("test run too short for the forecast horizon".into()))?;
    let starts = spaced_indices(sync, last, n_req);
    log::info!(
        "valid time: {} forecasts of {} steps over the test run",
        starts.len(),
        horizon
    );
    let rows = vpt_table(&kind, test, &sigma_clim, &starts, horizon, e.epsilon)?;
    io::write_rows_csv(&dir.join("vpt.csv"), &rows)?;
    let mut values: Vec<f64> = rows.iter().map(|r| r.vpt_mtu).collect();
    values.sort_by(|a, b| a.total_cmp(b));
    let (mean, _) = mean_std(&values);
    let vpt_summary = VptSummary {
        count: values.len(),
        mean_mtu: mean,
        median_mtu: values[values.len() / 2],
        min_mtu: values[0],
        max_mtu: *values.last().expect("non-empty"),
        horizon_mtu: horizon as f64 * dt,
        epsilon: e.epsilon,
    };
    log::info!(
        "valid time: mean {:.2} MTU, median {:.2} MTU over {} forecasts",
        vpt_summary.mean_mtu,
        vpt_summary.median_mtu,
        vpt_summary.count
    );

    let mut wrote_ftle = false;
    let mut wrote_corr = false;
    if let EvalModel::Global(model) = kind {
        io::write_rows_csv(&dir.join("ftle.csv"), &ftle_table(cfg, model, test)?)?;
        wrote_ftle = true;
        io::write_rows_csv(
            &dir.join("correlation.csv"),
            &correlation_table(cfg, model, test)?,
        )?;
        wrote_corr = true;
    } else {
        log::info!("patched model: tangent-space diagnostics skipped");
    }

    io::write_json(
        &dir.join("evaluate.json"),
        &EvaluateDoc {
            config: cfg,
            vpt: vpt_summary,
            ftle: wrote_ftle,
            correlation: wrote_corr,
        },
    )?;
    Ok(CmdOutcome { diverged: false })
}

#[derive(Serialize)]
struct SweepPoint {
    index: usize,
    dir: String,
    values: Vec<toml::Value>,
    diverged: bool,
    diverged_at: Option<usize>,
    an_nrmse_obs: f64,
    an_nrmse_unobs: f64,
    an_nrmse_all: f64,
    an_rmse_all: f64,
}

#[derive(Serialize)]
struct SweepDoc<'a> {
    config: &'a ExperimentConfig,
    points: Vec<SweepPoint>,
}

fn render_value(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Cartesian grid over the sweep axes, first axis slowest. Points share
/// the dataset and trained model; only assimilation settings vary.
pub fn cmd_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<CmdOutcome> {
    let sweep = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("sweep needs a [[sweep.axes]] section".into()))?;

    let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
    for axis in &sweep.axes {
        let mut next = Vec::with_capacity(combos.len() * axis.values.len());
        for combo in &combos {
            for v in 0..axis.values.len() {
                let mut c = combo.clone();
                c.push(v);
                next.push(c);
            }
        }
        combos = next;
    }

    let mut point_cfgs = Vec::with_capacity(combos.len());
    for combo in &combos {
        let mut table = cfg.to_table()?;
        table.remove("sweep");
        for (axis, &vi) in sweep.axes.iter().zip(combo) {
            set_path(&mut table, &axis.key, axis.values[vi].clone())?;
        }
        let pc = ExperimentConfig::from_table(table)?;
        pc.validate()?;
        point_cfgs.push(pc);
    }

    let need_global = point_cfgs
        .iter()
        .any(|pc| model_needs(pc.assimilation.scheme).0);
    let need_patched = point_cfgs
        .iter()
        .any(|pc| model_needs(pc.assimilation.scheme).1);

    if !dataset_dir(cfg).join("train.traj").is_file() {
        cmd_generate(cfg)?;
    }
    let global_path = model_dir(cfg).join("reservoir.model");
    let patched_path = model_dir(cfg).join("patched.model");
    if (need_global && !global_path.is_file()) || (need_patched && !patched_path.is_file()) {
        cmd_train(cfg)?;
    }
    let inputs = load_inputs(cfg, need_global, need_patched)?;

    let sweep_dir = cfg.paths.out.join("sweep");
    fs::create_dir_all(sweep_dir.join("runs"))?;
    log::info!("sweep: {} points on {} threads", point_cfgs.len(), jobs.max(1));
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Result<Vec<RunResult>> = pool.install(|| {
        point_cfgs
            .par_iter()
            .enumerate()
            .map(|(i, pc)| {
                let dir = sweep_dir.join("runs").join(format!("p{i:04}"));
                run_once(pc, &inputs, &dir)
            })
            .collect()
    });
    let results = results?;

    let mut table = csv::Writer::from_path(sweep_dir.join("sweep.csv"))
        .map_err(|e| Error::Config(format!("sweep.csv: {e}")))?;
    let mut header = vec!["point".to_string()];
    header.extend(sweep.axes.iter().map(|a| a.key.clone()));
    header.extend(
        ["diverged", "an_nrmse_obs", "an_nrmse_unobs", "an_nrmse_all", "an_rmse_all"]
            .map(String::from),
    );
    table
        .write_record(&header)
        .map_err(|e| Error::Config(format!("sweep.csv: {e}")))?;

    let mut points = Vec::with_capacity(results.len());
    let mut any_diverged = false;
    for (i, (combo, result)) in combos.iter().zip(&results).enumerate() {
        let values: Vec<toml::Value> = sweep
            .axes
            .iter()
            .zip(combo)
            .map(|(axis, &vi)| axis.values[vi].clone())
            .collect();
        let mut record = vec![i.to_string()];
        record.extend(values.iter().map(render_value));
        record.push(result.diverged.to_string());
        let s = &result.summary;
        for v in [s.an_nrmse_obs, s.an_nrmse_unobs, s.an_nrmse_all, s.an_rmse_all] {
            record.push(format!("{v}"));
        }
        table
            .write_record(&record)
            .map_err(|e| Error::Config(format!("sweep.csv: {e}")))?;
        any_diverged |= result.diverged;
        points.push(SweepPoint {
            index: i,
            dir: format!("runs/p{i:04}"),
            values,
            diverged: result.diverged,
            diverged_at: result.diverged_at,
            an_nrmse_obs: s.an_nrmse_obs,
            an_nrmse_unobs: s.an_nrmse_unobs,
            an_nrmse_all: s.an_nrmse_all,
            an_rmse_all: s.an_rmse_all,
        });
    }
    table.flush()?;
    io::write_json(&sweep_dir.join("sweep.json"), &SweepDoc { config: cfg, points })?;
    Ok(CmdOutcome {
        diverged: any_diverged,
    })
}
