//! State estimation: direct insertion, ensemble transform Kalman filter
//! with multiplicative inflation, and strong-constraint incremental 4D-Var
//! with matrix-free inner solves, plus the cycled twin-experiment drivers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::{Error, Result};
use crate::l96::{integrate, step_multiple, ObservationSequence, Trajectory};
use crate::linalg::Propagator;
use crate::metrics::window_mean;
use crate::reservoir::{ClosedLoopScratch, ReservoirModel};
use crate::rng::{stream, stream_rng};

/// Eigenvalue floor when inverting the ensemble-space covariance.
const EIG_FLOOR: f64 = 1e-12;

/// x_a = x_b + Hᵀ(y - H x_b): observed components replaced, rest untouched.
pub fn direct_insertion(x_b: &DVector<f64>, y: &DVector<f64>, obs_indices: &[usize]) -> Result<DVector<f64>> {
    if y.len() != obs_indices.len() {
        return Err(Error::dimension(
            "direct_insertion",
            format!("{} observed values", obs_indices.len()),
            y.len().to_string(),
        ));
    }
    let mut x_a = x_b.clone();
    for (row, &node) in obs_indices.iter().enumerate() {
        if node >= x_b.len() {
            return Err(Error::dimension(
                "direct_insertion",
                format!("node index < {}", x_b.len()),
                node.to_string(),
            ));
        }
        x_a[node] = y[row];
    }
    Ok(x_a)
}

/// Ensemble-space pieces of one ETKF analysis.
struct EtkfTransform {
    /// Mean-update weights w̄ᵃ (k).
    w_bar: DVector<f64>,
    /// Symmetric perturbation transform Wᵃ = [(k-1)P̃ᵃ]^{1/2} (k×k).
    w_a: DMatrix<f64>,
    /// Analysis covariance in ensemble space P̃ᵃ (k×k).
    p_tilde: DMatrix<f64>,
}

/// P̃ᵃ = [(k-1)/γ·I + YᵇᵀR⁻¹Yᵇ]⁻¹ and its symmetric square root, by
/// symmetric eigendecomposition with an eigenvalue floor.
fn etkf_transform(
    y_pert: &DMatrix<f64>,
    innovation: &DVector<f64>,
    sigma_obs: f64,
    gamma: f64,
) -> Result<EtkfTransform> {
    let k = y_pert.ncols();
    let r_inv = 1.0 / (sigma_obs * sigma_obs);
    let mut a = y_pert.tr_mul(y_pert) * r_inv;
    let km1_defl = (k as f64 - 1.0) / gamma;
    for i in 0..k {
        a[(i, i)] += km1_defl;
    }
    let eig = SymmetricEigen::new(a);
    if eig.eigenvalues.iter().any(|&l| l < EIG_FLOOR) {
        return Err(Error::numerical(
            "etkf_transform",
            format!(
                "ensemble-space covariance not positive definite (min eigenvalue {:.3e} below floor {EIG_FLOOR:.0e})",
                eig.eigenvalues.min()
            ),
        ));
    }
    let q = &eig.eigenvectors;
    let inv_vals = eig.eigenvalues.map(|l| 1.0 / l);
    let p_tilde = q * DMatrix::from_diagonal(&inv_vals) * q.transpose();
    let sqrt_vals = eig.eigenvalues.map(|l| ((k as f64 - 1.0) / l).sqrt());
    let w_a = q * DMatrix::from_diagonal(&sqrt_vals) * q.transpose();
    let w_bar = &p_tilde * (y_pert.tr_mul(innovation) * r_inv);
    Ok(EtkfTransform { w_bar, w_a, p_tilde })
}

/// Kalman gain and ensemble-space analysis covariance, exposed for
/// diagnostics and the oracle tests.
pub struct GainDiagnostics {
    pub kalman_gain: DMatrix<f64>,
    pub analysis_cov_ens: DMatrix<f64>,
}

pub struct EtkfUpdate {
    /// Analysis members, same layout as the background (n×k).
    pub analysis: DMatrix<f64>,
    pub diagnostics: GainDiagnostics,
}

/// One ETKF analysis. `members` holds background members as columns in
/// whatever space the filter runs in; `z_pred` holds each member's
/// predicted observations; R = σ_obs²I; γ ≥ 1 is multiplicative inflation.
pub fn etkf_update(
    members: &DMatrix<f64>,
    z_pred: &DMatrix<f64>,
    y: &DVector<f64>,
    sigma_obs: f64,
    gamma: f64,
) -> Result<EtkfUpdate> {
    let k = members.ncols();
    if k < 2 {
        return Err(Error::Config(format!("ETKF needs k >= 2 members, got {k}")));
    }
    if z_pred.ncols() != k {
        return Err(Error::dimension("etkf_update", format!("{k} prediction columns"), z_pred.ncols().to_string()));
    }
    if y.len() != z_pred.nrows() {
        return Err(Error::dimension("etkf_update", format!("{} observations", z_pred.nrows()), y.len().to_string()));
    }
    if !(sigma_obs > 0.0) {
        return Err(Error::Config(format!("sigma_obs must be positive, got {sigma_obs}")));
    }
    if gamma < 1.0 {
        return Err(Error::Config(format!("inflation γ must be >= 1, got {gamma}")));
    }
    let mean = members.column_mean();
    let mut perts = members.clone();
    for mut col in perts.column_iter_mut() {
        col -= &mean;
    }
    let z_mean = z_pred.column_mean();
    let mut y_pert = z_pred.clone();
    for mut col in y_pert.column_iter_mut() {
        col -= &z_mean;
    }
    let innovation = y - &z_mean;
    let tf = etkf_transform(&y_pert, &innovation, sigma_obs, gamma)?;
    // Sᵃ = Sᵇ(w̄ᵃ1ᵀ + Wᵃ), recentered on the updated mean.
    let mut weights = tf.w_a.clone();
    for mut col in weights.column_iter_mut() {
        col += &tf.w_bar;
    }
    let mut analysis = &perts * &weights;
    for mut col in analysis.column_iter_mut() {
        col += &mean;
    }
    let r_inv = 1.0 / (sigma_obs * sigma_obs);
    let kalman_gain = &perts * &tf.p_tilde * y_pert.transpose() * r_inv;
    Ok(EtkfUpdate {
        analysis,
        diagnostics: GainDiagnostics {
            kalman_gain,
            analysis_cov_ens: tf.p_tilde,
        },
    })
}

pub struct BicgstabResult {
    pub x: DVector<f64>,
    /// True residual norm ‖b - A x‖ of the returned iterate.
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Biconjugate gradient stabilized solve of A x = b with matrix-free A.
/// On breakdown the iteration restarts once from a perturbed shadow
/// residual before giving up.
pub fn bicgstab(
    apply_a: impl Fn(&DVector<f64>) -> DVector<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<BicgstabResult> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("bicgstab tol must be positive, got {tol}")));
    }
    let n = b.len();
    let b_norm = b.norm();
    if b_norm == 0.0 {
        return Ok(BicgstabResult {
            x: DVector::zeros(n),
            residual_norm: 0.0,
            iterations: 0,
            converged: true,
        });
    }
    let threshold = tol * b_norm;
    let mut x = DVector::zeros(n);
    let mut r = b.clone();
    let mut best_x = x.clone();
    let mut best_res = r.norm();
    let mut iterations = 0usize;
    let mut restarted = false;
    'restart: loop {
        let mut r_hat = r.clone();
        if restarted {
            // Perturb the shadow residual so the new Krylov space is not
            // the one that just broke down.
            let mut rng = stream_rng(0x9e3779b9, stream::TEST);
            r_hat += crate::linalg::standard_normal_vector(&mut rng, n) * (1e-8 * r.norm().max(1.0));
        }
        let mut rho = 1.0;
        let mut alpha = 1.0;
        let mut omega = 1.0;
        let mut v = DVector::zeros(n);
        let mut p = DVector::zeros(n);
        while iterations < max_iter {
            iterations += 1;
            let rho_new = r_hat.dot(&r);
            if rho_new.abs() < 1e-300 {
                if restarted {
                    break 'restart;
                }
                restarted = true;
                continue 'restart;
            }
            let beta = (rho_new / rho) * (alpha / omega);
            rho = rho_new;
            p = &r + (&p - &v * omega) * beta;
            v = apply_a(&p);
            let denom = r_hat.dot(&v);
            if denom.abs() < 1e-300 {
                if restarted {
                    break 'restart;
                }
                restarted = true;
                continue 'restart;
            }
            alpha = rho / denom;
            let s = &r - &v * alpha;
            if s.norm() <= threshold {
                x += &p * alpha;
                let res = (b - apply_a(&x)).norm();
                return Ok(BicgstabResult {
                    x,
                    residual_norm: res,
                    iterations,
                    converged: res <= threshold,
                });
            }
            let t = apply_a(&s);
            let tt = t.norm_squared();
            if tt < 1e-300 {
                if restarted {
                    break 'restart;
                }
                restarted = true;
                continue 'restart;
            }
            omega = t.dot(&s) / tt;
            x += &p * alpha + &s * omega;
            r = &s - &t * omega;
            let res = r.norm();
            if res < best_res {
                best_res = res;
                best_x.copy_from(&x);
            }
            if res <= threshold {
                let true_res = (b - apply_a(&x)).norm();
                return Ok(BicgstabResult {
                    x,
                    residual_norm: true_res,
                    iterations,
                    converged: true_res <= threshold,
                });
            }
        }
        break;
    }
    let true_res = (b - apply_a(&best_x)).norm();
    Ok(BicgstabResult {
        x: best_x,
        residual_norm: true_res,
        iterations,
        converged: false,
    })
}

/// Forecast-model interface shared by the cycled schemes. Members live in
/// the model's internal state space; `to_system` maps into system space
/// for scoring, and `predict_obs` gives the observation-space equivalent.
pub trait CycleModel {
    fn state_dim(&self) -> usize;
    fn system_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn forecast(&self, s: &mut DVector<f64>, n_steps: usize) -> Result<()>;
    fn to_system(&self, s: &DVector<f64>) -> DVector<f64>;
    fn predict_obs(&self, s: &DVector<f64>) -> DVector<f64>;
}

/// Extra structure needed by the variational scheme: one-step TLM at a
/// state plus the linearized observation map and its adjoint.
pub trait VarModel: CycleModel {
    type Tlm: Propagator;
    fn tlm(&self, s: &DVector<f64>) -> Result<Self::Tlm>;
    fn obs_tangent(&self, v: &DVector<f64>) -> DVector<f64>;
    fn obs_adjoint(&self, r: &DVector<f64>) -> DVector<f64>;
}

/// Closed-loop reservoir forecaster observed through H∘W_out.
pub struct RnnDaModel<'a> {
    model: &'a ReservoirModel,
    /// Rows of W_out at the observed nodes (p×N).
    h_wout: DMatrix<f64>,
    obs_indices: Vec<usize>,
}

impl<'a> RnnDaModel<'a> {
    pub fn new(model: &'a ReservoirModel, obs_indices: &[usize]) -> Result<Self> {
        let w_out = model.w_out()?;
        if w_out.nrows() != model.input_dim() {
            return Err(Error::Alignment(format!(
                "cycled DA needs a square model (D_in {} vs D_out {})",
                model.input_dim(),
                w_out.nrows()
            )));
        }
        let mut h_wout = DMatrix::zeros(obs_indices.len(), model.hidden_dim());
        for (row, &node) in obs_indices.iter().enumerate() {
            if node >= w_out.nrows() {
                return Err(Error::dimension(
                    "RnnDaModel",
                    format!("obs node < {}", w_out.nrows()),
                    node.to_string(),
                ));
            }
            h_wout.row_mut(row).copy_from(&w_out.row(node));
        }
        Ok(RnnDaModel {
            model,
            h_wout,
            obs_indices: obs_indices.to_vec(),
        })
    }

    pub fn obs_indices(&self) -> &[usize] {
        &self.obs_indices
    }

    pub fn reservoir(&self) -> &ReservoirModel {
        self.model
    }
}

impl CycleModel for RnnDaModel<'_> {
    fn state_dim(&self) -> usize {
        self.model.hidden_dim()
    }

    fn system_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn obs_dim(&self) -> usize {
        self.h_wout.nrows()
    }

    fn forecast(&self, s: &mut DVector<f64>, n_steps: usize) -> Result<()> {
        let mut scratch = ClosedLoopScratch::for_model(self.model)?;
        for step in 0..n_steps {
            self.model.closed_loop_step(s, &mut scratch)?;
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    cycle: step + 1,
                    nrmse: f64::INFINITY,
                });
            }
        }
        Ok(())
    }

    fn to_system(&self, s: &DVector<f64>) -> DVector<f64> {
        self.model.readout(s).expect("constructed from a trained model")
    }

    fn predict_obs(&self, s: &DVector<f64>) -> DVector<f64> {
        &self.h_wout * s
    }
}

impl<'a> VarModel for RnnDaModel<'a> {
    type Tlm = crate::reservoir::RnnPropagator<'a>;

    fn tlm(&self, s: &DVector<f64>) -> Result<Self::Tlm> {
        self.model.rnn_propagator(s)
    }

    fn obs_tangent(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.h_wout * v
    }

    fn obs_adjoint(&self, r: &DVector<f64>) -> DVector<f64> {
        self.h_wout.tr_mul(r)
    }
}

/// The reference numerical model observed at selected nodes.
pub struct L96DaModel {
    pub dim: usize,
    pub dt: f64,
    pub forcing: f64,
    obs_indices: Vec<usize>,
}

impl L96DaModel {
    pub fn new(dim: usize, dt: f64, forcing: f64, obs_indices: &[usize]) -> Result<Self> {
        if dim < 4 {
            return Err(Error::dimension("L96DaModel", ">= 4", dim.to_string()));
        }
        for &i in obs_indices {
            if i >= dim {
                return Err(Error::dimension("L96DaModel", format!("obs node < {dim}"), i.to_string()));
            }
        }
        Ok(L96DaModel {
            dim,
            dt,
            forcing,
            obs_indices: obs_indices.to_vec(),
        })
    }
}

impl CycleModel for L96DaModel {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn system_dim(&self) -> usize {
        self.dim
    }

    fn obs_dim(&self) -> usize {
        self.obs_indices.len()
    }

    fn forecast(&self, s: &mut DVector<f64>, n_steps: usize) -> Result<()> {
        let traj = integrate(s, self.dt, n_steps, self.forcing)?;
        s.copy_from(&traj.state(n_steps));
        Ok(())
    }

    fn to_system(&self, s: &DVector<f64>) -> DVector<f64> {
        s.clone()
    }

    fn predict_obs(&self, s: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.obs_indices.len(), |i, _| s[self.obs_indices[i]])
    }
}

impl VarModel for L96DaModel {
    type Tlm = crate::l96::L96StepPropagator;

    fn tlm(&self, s: &DVector<f64>) -> Result<Self::Tlm> {
        crate::l96::l96_linear_propagator(s, self.dt, self.forcing)
    }

    fn obs_tangent(&self, v: &DVector<f64>) -> DVector<f64> {
        self.predict_obs(v)
    }

    fn obs_adjoint(&self, r: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (row, &node) in self.obs_indices.iter().enumerate() {
            out[node] += r[row];
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct VarConfig {
    /// Background error std σ_b (B = σ_b² I in the control space).
    pub sigma_b: f64,
    pub window_steps: usize,
    pub outer_loops: usize,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
}

/// Observations inside one assimilation window, step offsets relative to
/// the window start (offset 0 = analysis time).
pub struct WindowObs {
    pub steps: Vec<usize>,
    pub values: Vec<DVector<f64>>,
    pub sigma_obs: f64,
}

#[derive(Debug, Clone)]
pub struct OuterLoopInfo {
    pub cost: f64,
    pub inner_iterations: usize,
    pub converged: bool,
    /// ‖∇J(δ)‖ / ‖∇J(0)‖ at the returned increment.
    pub grad_ratio: f64,
}

pub struct VarAnalysis {
    pub s_a: DVector<f64>,
    pub outer: Vec<OuterLoopInfo>,
    /// Cost after the final update (so outer[i].cost is "before loop i").
    pub final_cost: f64,
}

/// Strong-constraint incremental 4D-Var around the window's nonlinear
/// trajectory. Each outer loop solves the normal equations
/// (I + B ΣₜMᵀ(HW)ᵀR⁻¹(HW)M) δs₀ = δs₀ᵇ + B ΣₜMᵀ(HW)ᵀR⁻¹dₜ
/// with BiCGSTAB, all operator products applied matrix-free.
pub fn fourdvar_analysis<V: VarModel>(
    model: &V,
    s_b0: &DVector<f64>,
    obs: &WindowObs,
    cfg: &VarConfig,
) -> Result<VarAnalysis> {
    if cfg.outer_loops == 0 {
        return Err(Error::Config("4D-Var needs at least one outer loop".into()));
    }
    if !(cfg.sigma_b > 0.0) {
        return Err(Error::Config(format!("σ_b must be positive, got {}", cfg.sigma_b)));
    }
    if obs.steps.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("window obs steps must strictly increase".into()));
    }
    if let Some(&last) = obs.steps.last() {
        if last >= cfg.window_steps {
            return Err(Error::Config(format!(
                "obs step {last} outside window of {} steps",
                cfg.window_steps
            )));
        }
    }
    let b_var = cfg.sigma_b * cfg.sigma_b;
    let r_inv = 1.0 / (obs.sigma_obs * obs.sigma_obs);
    let t_max = obs.steps.last().copied().unwrap_or(0);
    let mut s_f0 = s_b0.clone();
    let mut outer_info = Vec::with_capacity(cfg.outer_loops);
    for _outer in 0..cfg.outer_loops {
        // Nonlinear reference trajectory and per-step TLMs.
        let mut states = Vec::with_capacity(t_max + 1);
        states.push(s_f0.clone());
        for _ in 0..t_max {
            let mut next = states.last().unwrap().clone();
            model.forecast(&mut next, 1)?;
            states.push(next);
        }
        let tlms = states
            .iter()
            .take(t_max)
            .map(|s| model.tlm(s))
            .collect::<Result<Vec<_>>>()?;
        // Innovations d_t = y_t - H W s_f(t).
        let innovations: Vec<DVector<f64>> = obs
            .steps
            .iter()
            .zip(&obs.values)
            .map(|(&t, y)| y - model.predict_obs(&states[t]))
            .collect();
        let cost = {
            let jb = 0.5 * (&s_f0 - s_b0).norm_squared() / b_var;
            let jo: f64 = innovations.iter().map(|d| 0.5 * d.norm_squared() * r_inv).sum();
            jb + jo
        };
        let delta_b = s_b0 - &s_f0;
        // Backward sweep Σₜ M_{[t,0]}ᵀ gₜ for per-step forcings gₜ.
        let backward = |g: &dyn Fn(usize) -> Option<DVector<f64>>| -> DVector<f64> {
            let mut a = DVector::zeros(model.state_dim());
            for t in (0..=t_max).rev() {
                if t < t_max {
                    a = tlms[t].apply_transpose(&a);
                }
                if let Some(gt) = g(t) {
                    a += gt;
                }
            }
            a
        };
        let obs_slot = |t: usize| obs.steps.iter().position(|&s| s == t);
        let b_vec = {
            let forced = backward(&|t| {
                obs_slot(t).map(|slot| model.obs_adjoint(&(&innovations[slot] * r_inv)))
            });
            &delta_b + forced * b_var
        };
        let apply_a = |v: &DVector<f64>| -> DVector<f64> {
            // Forward TLM sweep collecting HW·u at obs steps.
            let mut u = v.clone();
            let mut projected: Vec<Option<DVector<f64>>> = vec![None; t_max + 1];
            for t in 0..=t_max {
                if obs_slot(t).is_some() {
                    projected[t] = Some(model.obs_tangent(&u));
                }
                if t < t_max {
                    u = tlms[t].apply(&u);
                }
            }
            let forced = backward(&|t| {
                projected[t]
                    .as_ref()
                    .map(|hu| model.obs_adjoint(&(hu * r_inv)))
            });
            v + forced * b_var
        };
        let solve = bicgstab(apply_a, &b_vec, cfg.inner_tol, cfg.inner_max_iter)?;
        let grad_ratio = if b_vec.norm() == 0.0 {
            0.0
        } else {
            solve.residual_norm / b_vec.norm()
        };
        if !solve.converged {
            log::warn!(
                "4D-Var inner loop unconverged after {} iterations (rel residual {:.2e})",
                solve.iterations,
                grad_ratio
            );
        }
        outer_info.push(OuterLoopInfo {
            cost,
            inner_iterations: solve.iterations,
            converged: solve.converged,
            grad_ratio,
        });
        s_f0 += &solve.x;
        if !s_f0.iter().all(|v| v.is_finite()) {
            return Err(Error::numerical("fourdvar_analysis", "non-finite increment"));
        }
    }
    // Final cost for the trace.
    let final_cost = {
        let mut states = vec![s_f0.clone()];
        for _ in 0..t_max {
            let mut next = states.last().unwrap().clone();
            model.forecast(&mut next, 1)?;
            states.push(next);
        }
        let jb = 0.5 * (&s_f0 - s_b0).norm_squared() / b_var;
        let jo: f64 = obs
            .steps
            .iter()
            .zip(&obs.values)
            .map(|(&t, y)| 0.5 * (y - model.predict_obs(&states[t])).norm_squared() * r_inv)
            .sum();
        jb + jo
    };
    Ok(VarAnalysis {
        s_a: s_f0,
        outer: outer_info,
        final_cost,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    DirectInsertion,
    Etkf,
    FourDVar,
}

/// Cycled-experiment configuration shared by all schemes.
pub struct CycleConfig {
    pub tau_da: f64,
    pub n_cycles: usize,
    pub gamma: f64,
    pub sigma_clim: DVector<f64>,
    /// Divergence guard: analysis NRMSE above this for `divergence_patience`
    /// consecutive cycles stops the run with a flag.
    pub divergence_nrmse: f64,
    pub divergence_patience: usize,
}

impl CycleConfig {
    pub fn new(tau_da: f64, n_cycles: usize, gamma: f64, sigma_clim: DVector<f64>) -> Self {
        CycleConfig {
            tau_da,
            n_cycles,
            gamma,
            sigma_clim,
            divergence_nrmse: 10.0,
            divergence_patience: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CycleRecord {
    pub time: f64,
    pub bg_nrmse_obs: f64,
    pub bg_nrmse_unobs: f64,
    pub bg_nrmse_all: f64,
    pub an_nrmse_obs: f64,
    pub an_nrmse_unobs: f64,
    pub an_nrmse_all: f64,
    pub an_rmse_all: f64,
    pub spread: f64,
    pub innov_mean: f64,
    pub innov_var: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CycleSummary {
    pub an_nrmse_obs: f64,
    pub an_nrmse_unobs: f64,
    pub an_nrmse_all: f64,
    pub an_rmse_all: f64,
}

pub struct CycleDiagnostics {
    pub records: Vec<CycleRecord>,
    pub diverged_at: Option<usize>,
    /// Per-cycle outer-loop traces (variational runs only).
    pub var_trace: Vec<Vec<OuterLoopInfo>>,
}

impl CycleDiagnostics {
    /// Time-mean analysis scores over cycles with time >= t_lo.
    pub fn summary_from(&self, t_lo: f64) -> CycleSummary {
        let times: Vec<f64> = self.records.iter().map(|r| r.time).collect();
        let t_hi = f64::INFINITY;
        let pick = |f: &dyn Fn(&CycleRecord) -> f64| {
            let series: Vec<f64> = self.records.iter().map(|r| f(r)).collect();
            window_mean(&times, &series, t_lo, t_hi).unwrap_or(f64::NAN)
        };
        CycleSummary {
            an_nrmse_obs: pick(&|r| r.an_nrmse_obs),
            an_nrmse_unobs: pick(&|r| r.an_nrmse_unobs),
            an_nrmse_all: pick(&|r| r.an_nrmse_all),
            an_rmse_all: pick(&|r| r.an_rmse_all),
        }
    }
}

/// Everything fixed about one cycled twin experiment.
pub struct CycleContext<'a> {
    pub nature: &'a Trajectory,
    pub obs: &'a ObservationSequence,
    /// Column of `nature` at the first analysis time.
    pub start_idx: usize,
    pub cfg: CycleConfig,
}

impl CycleContext<'_> {
    fn stride(&self) -> Result<usize> {
        step_multiple(self.cfg.tau_da, self.nature.dt, "tau_da")
    }

    fn truth_at(&self, cycle: usize, stride: usize) -> Result<DVector<f64>> {
        let col = self.start_idx + cycle * stride;
        if col >= self.nature.len() {
            return Err(Error::Config(format!(
                "nature run too short: cycle {cycle} needs column {col} of {}",
                self.nature.len()
            )));
        }
        Ok(self.nature.state(col))
    }

    fn time_at(&self, cycle: usize, stride: usize) -> f64 {
        self.nature.time(self.start_idx + cycle * stride)
    }

    fn obs_batch(&self, t: f64) -> Result<(DVector<f64>, &Vec<usize>)> {
        let col = self.obs.batch_at(t, self.nature.dt).ok_or_else(|| {
            Error::Alignment(format!("no observation batch at analysis time {t}"))
        })?;
        Ok((self.obs.values.column(col).clone_owned(), &self.obs.obs_indices))
    }

    fn subsets(&self) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
        let d = self.nature.dim();
        let obs: Vec<usize> = self.obs.obs_indices.clone();
        let unobs: Vec<usize> = (0..d).filter(|i| !obs.contains(i)).collect();
        let all: Vec<usize> = (0..d).collect();
        (obs, unobs, all)
    }
}

fn nrmse_or_nan(
    est: &DVector<f64>,
    truth: &DVector<f64>,
    sigma: &DVector<f64>,
    subset: &[usize],
) -> f64 {
    if subset.is_empty() {
        return f64::NAN;
    }
    crate::metrics::nrmse_single(est, truth, sigma, subset).unwrap_or(f64::NAN)
}

pub(crate) struct RecordBuilder<'a> {
    ctx: &'a CycleContext<'a>,
    obs_set: Vec<usize>,
    unobs_set: Vec<usize>,
    all_set: Vec<usize>,
}

impl<'a> RecordBuilder<'a> {
    pub(crate) fn new(ctx: &'a CycleContext<'a>) -> Self {
        let (obs_set, unobs_set, all_set) = ctx.subsets();
        RecordBuilder {
            ctx,
            obs_set,
            unobs_set,
            all_set,
        }
    }

    pub(crate) fn build(
        &self,
        time: f64,
        truth: &DVector<f64>,
        bg: &DVector<f64>,
        an: &DVector<f64>,
        spread: f64,
        innovation: &DVector<f64>,
    ) -> CycleRecord {
        let sigma = &self.ctx.cfg.sigma_clim;
        let ones = DVector::from_element(truth.len(), 1.0);
        let p = innovation.len() as f64;
        let innov_mean = innovation.mean();
        let innov_var = if innovation.is_empty() {
            f64::NAN
        } else {
            innovation.iter().map(|v| (v - innov_mean).powi(2)).sum::<f64>() / p
        };
        CycleRecord {
            time,
            bg_nrmse_obs: nrmse_or_nan(bg, truth, sigma, &self.obs_set),
            bg_nrmse_unobs: nrmse_or_nan(bg, truth, sigma, &self.unobs_set),
            bg_nrmse_all: nrmse_or_nan(bg, truth, sigma, &self.all_set),
            an_nrmse_obs: nrmse_or_nan(an, truth, sigma, &self.obs_set),
            an_nrmse_unobs: nrmse_or_nan(an, truth, sigma, &self.unobs_set),
            an_nrmse_all: nrmse_or_nan(an, truth, sigma, &self.all_set),
            an_rmse_all: nrmse_or_nan(an, truth, &ones, &self.all_set),
            spread,
            innov_mean,
            innov_var,
        }
    }
}

/// Shared divergence bookkeeping: returns true when the run should stop.
pub(crate) struct DivergenceGuard {
    threshold: f64,
    patience: usize,
    streak: usize,
}

impl DivergenceGuard {
    pub(crate) fn new(cfg: &CycleConfig) -> Self {
        DivergenceGuard {
            threshold: cfg.divergence_nrmse,
            patience: cfg.divergence_patience,
            streak: 0,
        }
    }

    pub(crate) fn check(&mut self, nrmse_all: f64) -> bool {
        if nrmse_all.is_nan() || nrmse_all > self.threshold {
            self.streak += 1;
        } else {
            self.streak = 0;
        }
        self.streak >= self.patience
    }
}

/// Spin up `k` hidden members: each member synchronizes from zero over the
/// init window of truth data perturbed by its own N(0, σ_init²) noise.
pub fn init_hidden_members(
    model: &ReservoirModel,
    nature: &Trajectory,
    start_idx: usize,
    window: usize,
    sigma_init: f64,
    k: usize,
    master_seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if start_idx < window {
        return Err(Error::Config(format!(
            "member init needs {window} steps of history before the start index {start_idx}"
        )));
    }
    let d = nature.dim();
    let base = nature.states.columns(start_idx - window, window);
    let mut members = Vec::with_capacity(k);
    for m in 0..k {
        let mut rng = stream_rng(master_seed, stream::MEMBER_BASE + m as u64);
        let mut perturbed = base.clone_owned();
        for j in 0..window {
            for i in 0..d {
                let noise: f64 = rng.sample(rand_distr::StandardNormal);
                perturbed[(i, j)] += sigma_init * noise;
            }
        }
        members.push(model.drive(&perturbed, &DVector::zeros(model.hidden_dim()))?);
    }
    Ok(members)
}

/// Perfect-model counterpart: perturb the true state at the start time.
pub fn init_system_members(
    nature: &Trajectory,
    start_idx: usize,
    sigma_init: f64,
    k: usize,
    master_seed: u64,
) -> Vec<DVector<f64>> {
    let d = nature.dim();
    (0..k)
        .map(|m| {
            let mut rng = stream_rng(master_seed, stream::MEMBER_BASE + m as u64);
            let truth = nature.state(start_idx);
            DVector::from_fn(d, |i, _| {
                truth[i] + sigma_init * rng.sample::<f64, _>(rand_distr::StandardNormal)
            })
        })
        .collect()
}

/// Cycled ETKF over any `CycleModel`. Members arrive spun up.
pub fn cycle_etkf<M: CycleModel>(
    model: &M,
    members0: Vec<DVector<f64>>,
    ctx: &CycleContext,
    sigma_obs: f64,
) -> Result<CycleDiagnostics> {
    let k = members0.len();
    if k < 2 {
        return Err(Error::Config(format!("ETKF cycling needs k >= 2, got {k}")));
    }
    let stride = ctx.stride()?;
    let n = model.state_dim();
    let mut members = DMatrix::zeros(n, k);
    for (c, m) in members0.iter().enumerate() {
        members.column_mut(c).copy_from(m);
    }
    let builder = RecordBuilder::new(ctx);
    let mut guard = DivergenceGuard::new(&ctx.cfg);
    let mut records = Vec::with_capacity(ctx.cfg.n_cycles);
    let mut diverged_at = None;
    'cycles: for cycle in 0..ctx.cfg.n_cycles {
        let time = ctx.time_at(cycle, stride);
        let truth = ctx.truth_at(cycle, stride)?;
        let (y, _) = ctx.obs_batch(time)?;
        // Background statistics in system space.
        let sys: Vec<DVector<f64>> = (0..k)
            .map(|c| model.to_system(&members.column(c).clone_owned()))
            .collect();
        let bg_mean = mean_of(&sys);
        let spread = mean_spread(&sys, &bg_mean);
        let mut z_pred = DMatrix::zeros(model.obs_dim(), k);
        for c in 0..k {
            z_pred
                .column_mut(c)
                .copy_from(&model.predict_obs(&members.column(c).clone_owned()));
        }
        let innovation = &y - z_pred.column_mean();
        let update = etkf_update(&members, &z_pred, &y, sigma_obs, ctx.cfg.gamma)?;
        members = update.analysis;
        let an_sys: Vec<DVector<f64>> = (0..k)
            .map(|c| model.to_system(&members.column(c).clone_owned()))
            .collect();
        let an_mean = mean_of(&an_sys);
        let record = builder.build(time, &truth, &bg_mean, &an_mean, spread, &innovation);
        let stop = guard.check(record.an_nrmse_all);
        records.push(record);
        if stop {
            diverged_at = Some(cycle);
            break 'cycles;
        }
        // Forecast every member to the next analysis time.
        for c in 0..k {
            let mut s = members.column(c).clone_owned();
            match model.forecast(&mut s, stride) {
                Ok(()) => members.column_mut(c).copy_from(&s),
                Err(Error::Diverged { .. }) => {
                    diverged_at = Some(cycle);
                    break 'cycles;
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(CycleDiagnostics {
        records,
        diverged_at,
        var_trace: Vec::new(),
    })
}

/// Cycled direct insertion (single deterministic state).
pub fn cycle_direct_insertion<M: CycleModel>(
    model: &M,
    x0: DVector<f64>,
    ctx: &CycleContext,
) -> Result<CycleDiagnostics> {
    if model.state_dim() != model.system_dim() {
        return Err(Error::Alignment(
            "direct insertion operates in system space; model must be a system-space forecaster".into(),
        ));
    }
    let stride = ctx.stride()?;
    let builder = RecordBuilder::new(ctx);
    let mut guard = DivergenceGuard::new(&ctx.cfg);
    let mut records = Vec::with_capacity(ctx.cfg.n_cycles);
    let mut diverged_at = None;
    let mut x = x0;
    for cycle in 0..ctx.cfg.n_cycles {
        let time = ctx.time_at(cycle, stride);
        let truth = ctx.truth_at(cycle, stride)?;
        let (y, obs_idx) = ctx.obs_batch(time)?;
        let innovation = &y - model.predict_obs(&x);
        let bg = x.clone();
        x = direct_insertion(&x, &y, obs_idx)?;
        let record = builder.build(time, &truth, &bg, &x, 0.0, &innovation);
        let stop = guard.check(record.an_nrmse_all);
        records.push(record);
        if stop {
            diverged_at = Some(cycle);
            break;
        }
        match model.forecast(&mut x, stride) {
            Ok(()) => {}
            Err(Error::Diverged { .. }) => {
                diverged_at = Some(cycle);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(CycleDiagnostics {
        records,
        diverged_at,
        var_trace: Vec::new(),
    })
}

/// Cycled direct insertion for a closed-loop reservoir. At each analysis
/// time the observed components of the readout are replaced by the
/// observations and the patched vector is fed back as the next network
/// input; between analyses the network runs free. The hidden state is
/// never corrected directly, so sparse-in-time observations let it drift.
pub fn cycle_rnn_insertion(
    model: &ReservoirModel,
    s0: DVector<f64>,
    ctx: &CycleContext,
) -> Result<CycleDiagnostics> {
    let stride = ctx.stride()?;
    let builder = RecordBuilder::new(ctx);
    let mut guard = DivergenceGuard::new(&ctx.cfg);
    let mut records = Vec::with_capacity(ctx.cfg.n_cycles);
    let mut diverged_at = None;
    let mut s = s0;
    let mut scratch = ClosedLoopScratch::for_model(model)?;
    let mut pre = DVector::zeros(model.hidden_dim());
    'cycles: for cycle in 0..ctx.cfg.n_cycles {
        let time = ctx.time_at(cycle, stride);
        let truth = ctx.truth_at(cycle, stride)?;
        let (y, obs_idx) = ctx.obs_batch(time)?;
        let bg = model.readout(&s)?;
        let innovation = DVector::from_fn(y.len(), |r, _| y[r] - bg[obs_idx[r]]);
        let an = direct_insertion(&bg, &y, obs_idx)?;
        let record = builder.build(time, &truth, &bg, &an, 0.0, &innovation);
        let stop = guard.check(record.an_nrmse_all);
        records.push(record);
        if stop {
            diverged_at = Some(cycle);
            break;
        }
        model.step_hidden_buf(&mut s, &an, &mut pre);
        for _ in 1..stride {
            match model.closed_loop_step(&mut s, &mut scratch) {
                Ok(()) => {}
                Err(Error::Diverged { .. }) => {
                    diverged_at = Some(cycle);
                    break 'cycles;
                }
                Err(e) => return Err(e),
            }
        }
        if !s.iter().all(|v| v.is_finite()) {
            diverged_at = Some(cycle);
            break;
        }
    }
    Ok(CycleDiagnostics {
        records,
        diverged_at,
        var_trace: Vec::new(),
    })
}

/// Cycled strong-constraint 4D-Var with the analysis at the window start;
/// each window uses every observation batch in [t_c, t_c + τ_da).
pub fn cycle_fourdvar<V: VarModel>(
    model: &V,
    s0: DVector<f64>,
    ctx: &CycleContext,
    var_cfg: &VarConfig,
) -> Result<CycleDiagnostics> {
    let stride = ctx.stride()?;
    if var_cfg.window_steps != stride {
        return Err(Error::Config(format!(
            "window_steps {} must equal τ_da/dt = {stride}",
            var_cfg.window_steps
        )));
    }
    let obs_stride = step_multiple(
        ctx.obs
            .times
            .get(1)
            .map(|&t1| t1 - ctx.obs.times[0])
            .unwrap_or(ctx.cfg.tau_da),
        ctx.nature.dt,
        "tau_obs",
    )?;
    let builder = RecordBuilder::new(ctx);
    let mut guard = DivergenceGuard::new(&ctx.cfg);
    let mut records = Vec::with_capacity(ctx.cfg.n_cycles);
    let mut var_trace = Vec::with_capacity(ctx.cfg.n_cycles);
    let mut diverged_at = None;
    let mut s = s0;
    for cycle in 0..ctx.cfg.n_cycles {
        let time = ctx.time_at(cycle, stride);
        let truth = ctx.truth_at(cycle, stride)?;
        // Window observation batches at local steps 0, obs_stride, ...
        let mut steps = Vec::new();
        let mut values = Vec::new();
        let mut local = 0usize;
        while local < stride {
            let t = ctx.nature.time(ctx.start_idx + cycle * stride + local);
            if let Some(col) = ctx.obs.batch_at(t, ctx.nature.dt) {
                steps.push(local);
                values.push(ctx.obs.values.column(col).clone_owned());
            }
            local += obs_stride;
        }
        let window = WindowObs {
            steps,
            values,
            sigma_obs: ctx.obs.assumed_std,
        };
        let innovation = window
            .values
            .first()
            .map(|y| y - model.predict_obs(&s))
            .unwrap_or_else(|| DVector::zeros(0));
        let bg = model.to_system(&s);
        let analysis = fourdvar_analysis(model, &s, &window, var_cfg)?;
        s = analysis.s_a;
        let an = model.to_system(&s);
        let record = builder.build(time, &truth, &bg, &an, 0.0, &innovation);
        let stop = guard.check(record.an_nrmse_all);
        records.push(record);
        var_trace.push(analysis.outer);
        if stop {
            diverged_at = Some(cycle);
            break;
        }
        match model.forecast(&mut s, stride) {
            Ok(()) => {}
            Err(Error::Diverged { .. }) => {
                diverged_at = Some(cycle);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(CycleDiagnostics {
        records,
        diverged_at,
        var_trace,
    })
}

pub(crate) fn mean_of(vecs: &[DVector<f64>]) -> DVector<f64> {
    let mut mean = DVector::zeros(vecs[0].len());
    for v in vecs {
        mean += v;
    }
    mean / vecs.len() as f64
}

/// Mean over components of the ensemble standard deviation.
pub(crate) fn mean_spread(vecs: &[DVector<f64>], mean: &DVector<f64>) -> f64 {
    let k = vecs.len() as f64;
    let d = mean.len();
    let mut acc = 0.0;
    for i in 0..d {
        let var: f64 = vecs.iter().map(|v| (v[i] - mean[i]).powi(2)).sum::<f64>() / k;
        acc += var.sqrt();
    }
    acc / d as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    use crate::l96::{generate_dataset, sample_observations, DatasetConfig};
    use crate::linalg::standard_normal_vector;

    #[test]
    fn direct_insertion_full_obs_returns_y() {
        let x_b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y = DVector::from_vec(vec![-1.0, -2.0, -3.0]);
        let x_a = direct_insertion(&x_b, &y, &[0, 1, 2]).unwrap();
        assert_eq!(x_a, y);
    }

    #[test]
    fn direct_insertion_empty_obs_is_identity() {
        let x_b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let x_a = direct_insertion(&x_b, &DVector::zeros(0), &[]).unwrap();
        assert_eq!(x_a, x_b);
    }

    #[test]
    fn direct_insertion_replaces_selected_nodes_only() {
        // Nodes (1,2,4) in the paper's 1-based labels are {0,1,3} here.
        let x_b = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = DVector::from_vec(vec![10.0, 20.0, 40.0]);
        let x_a = direct_insertion(&x_b, &y, &[0, 1, 3]).unwrap();
        assert_eq!(x_a, DVector::from_vec(vec![10.0, 20.0, 3.0, 40.0, 5.0, 6.0]));
    }

    fn random_ensemble(n: usize, k: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = stream_rng(seed, stream::TEST);
        DMatrix::from_fn(n, k, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn zero_innovation_keeps_background_mean() {
        let members = random_ensemble(5, 12, 1);
        let h = DMatrix::from_fn(2, 5, |i, j| ((i + 2 * j) % 3) as f64 * 0.4 - 0.3);
        let z = &h * &members;
        let y = z.column_mean();
        let update = etkf_update(&members, &z, &y, 0.5, 1.0).unwrap();
        let bg_mean = members.column_mean();
        let an_mean = update.analysis.column_mean();
        assert_relative_eq!((bg_mean - an_mean).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn one_dimensional_etkf_matches_scalar_kalman_formulas() {
        // Scalar state, H = 1: the ETKF is algebraically the square-root
        // Kalman filter on the ensemble's own sample statistics, so the
        // match is exact to round-off (well inside the 5% allowance for
        // sampling effects against the population filter).
        let k = 40;
        let mut rng = stream_rng(2, stream::TEST);
        let members = DMatrix::from_fn(1, k, |_, _| 1.3 + 0.7 * rng.sample::<f64, _>(rand_distr::StandardNormal));
        let z = members.clone();
        let y = DVector::from_element(1, 2.1);
        let sigma_o = 0.5;
        let update = etkf_update(&members, &z, &y, sigma_o, 1.0).unwrap();
        let kf = k as f64;
        let mu_b = members.mean();
        let var_b: f64 = members.iter().map(|v| (v - mu_b).powi(2)).sum::<f64>() / (kf - 1.0);
        let gain = var_b / (var_b + sigma_o * sigma_o);
        let mu_a_ref = mu_b + gain * (2.1 - mu_b);
        let var_a_ref = (1.0 - gain) * var_b;
        let mu_a = update.analysis.mean();
        let var_a: f64 =
            update.analysis.iter().map(|v| (v - mu_a).powi(2)).sum::<f64>() / (kf - 1.0);
        assert_relative_eq!(mu_a, mu_a_ref, max_relative = 1e-8);
        assert_relative_eq!(var_a, var_a_ref, max_relative = 1e-8);
        assert_relative_eq!(update.diagnostics.kalman_gain[(0, 0)], gain, max_relative = 1e-8);
    }

    #[test]
    fn analysis_never_inflates_projected_spread() {
        for seed in 0..5 {
            let members = random_ensemble(6, 10, 100 + seed);
            let h = DMatrix::from_fn(3, 6, |i, j| ((i * 5 + j) % 7) as f64 * 0.2 - 0.5);
            let z = &h * &members;
            let mut rng = stream_rng(seed, stream::TEST);
            let y = standard_normal_vector(&mut rng, 3);
            let update = etkf_update(&members, &z, &y, 0.7, 1.0).unwrap();
            let trace_of = |m: &DMatrix<f64>| -> f64 {
                let mean = m.column_mean();
                let mut pert = m.clone();
                for mut c in pert.column_iter_mut() {
                    c -= &mean;
                }
                let yp = &h * pert;
                (yp.transpose() * &yp).trace()
            };
            let before = trace_of(&members);
            let after = trace_of(&update.analysis);
            assert!(
                after <= before + 1e-10,
                "projected spread grew: {after} > {before}"
            );
        }
    }

    #[test]
    fn transform_square_root_is_consistent() {
        let members = random_ensemble(4, 8, 7);
        let h = DMatrix::from_fn(2, 4, |i, j| (i as f64 - j as f64) * 0.3);
        let z = &h * &members;
        let z_mean = z.column_mean();
        let mut y_pert = z.clone();
        for mut c in y_pert.column_iter_mut() {
            c -= &z_mean;
        }
        let innovation = DVector::from_vec(vec![0.4, -0.2]);
        let tf = etkf_transform(&y_pert, &innovation, 0.5, 1.2).unwrap();
        // Wᵃ symmetric and (Wᵃ)² = (k-1)·P̃ᵃ.
        assert_relative_eq!((&tf.w_a - tf.w_a.transpose()).norm(), 0.0, epsilon = 1e-10);
        let lhs = &tf.w_a * &tf.w_a;
        let rhs = &tf.p_tilde * 7.0;
        assert!((lhs - rhs).norm() < 1e-10);
    }

    #[test]
    fn gain_invariant_to_unobserved_translation() {
        let members = random_ensemble(6, 9, 11);
        let h = {
            // Observe nodes {0, 1, 3} directly.
            let mut h = DMatrix::zeros(3, 6);
            h[(0, 0)] = 1.0;
            h[(1, 1)] = 1.0;
            h[(2, 3)] = 1.0;
            h
        };
        let z = &h * &members;
        let mut rng = stream_rng(3, stream::TEST);
        let y = standard_normal_vector(&mut rng, 3);
        let base = etkf_update(&members, &z, &y, 0.5, 1.1).unwrap();
        // Translate every member along unobserved directions only.
        let mut shift = DVector::zeros(6);
        shift[2] = 1.7;
        shift[4] = -0.9;
        shift[5] = 0.3;
        let mut translated = members.clone();
        for mut c in translated.column_iter_mut() {
            c += &shift;
        }
        let z2 = &h * &translated;
        assert_relative_eq!((&z2 - &z).norm(), 0.0, epsilon = 1e-12);
        let moved = etkf_update(&translated, &z2, &y, 0.5, 1.1).unwrap();
        assert!(
            (&base.diagnostics.kalman_gain - &moved.diagnostics.kalman_gain).norm() < 1e-10
        );
    }

    #[test]
    fn bicgstab_identity_converges_immediately() {
        let b = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let res = bicgstab(|v| v.clone(), &b, 1e-12, 10).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert_relative_eq!((res.x - b).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bicgstab_zero_rhs_returns_zero() {
        let res = bicgstab(|v| v * 2.0, &DVector::zeros(4), 1e-10, 10).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 0);
        assert_eq!(res.x, DVector::zeros(4));
    }

    #[test]
    fn bicgstab_matches_direct_solve() {
        let mut rng = stream_rng(4, stream::TEST);
        let n = 20;
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.3..0.3))
            + DMatrix::identity(n, n) * 3.0;
        let b = standard_normal_vector(&mut rng, n);
        let res = bicgstab(|v| &m * v, &b, 1e-10, 200).unwrap();
        assert!(res.converged);
        let direct = m.clone().lu().solve(&b).unwrap();
        assert!(
            (&res.x - &direct).norm() < 1e-8 * direct.norm().max(1.0),
            "bicgstab vs direct: {}",
            (&res.x - &direct).norm()
        );
    }

    /// Minimal 1-D VarModel: identity dynamics, direct observation.
    struct ScalarVar;

    struct IdentityOp;

    impl Propagator for IdentityOp {
        fn dim(&self) -> usize {
            1
        }
        fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
            v.clone()
        }
        fn apply_transpose(&self, w: &DVector<f64>) -> DVector<f64> {
            w.clone()
        }
    }

    impl CycleModel for ScalarVar {
        fn state_dim(&self) -> usize {
            1
        }
        fn system_dim(&self) -> usize {
            1
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn forecast(&self, _s: &mut DVector<f64>, _n: usize) -> Result<()> {
            Ok(())
        }
        fn to_system(&self, s: &DVector<f64>) -> DVector<f64> {
            s.clone()
        }
        fn predict_obs(&self, s: &DVector<f64>) -> DVector<f64> {
            s.clone()
        }
    }

    impl VarModel for ScalarVar {
        type Tlm = IdentityOp;
        fn tlm(&self, _s: &DVector<f64>) -> Result<IdentityOp> {
            Ok(IdentityOp)
        }
        fn obs_tangent(&self, v: &DVector<f64>) -> DVector<f64> {
            v.clone()
        }
        fn obs_adjoint(&self, r: &DVector<f64>) -> DVector<f64> {
            r.clone()
        }
    }

    #[test]
    fn fourdvar_single_obs_matches_optimal_interpolation_weight() {
        let sigma_b = 0.8;
        let sigma_o = 0.5;
        let d = 1.9;
        let s_b = DVector::from_element(1, 0.3);
        let obs = WindowObs {
            steps: vec![0],
            values: vec![DVector::from_element(1, 0.3 + d)],
            sigma_obs: sigma_o,
        };
        let cfg = VarConfig {
            sigma_b,
            window_steps: 5,
            outer_loops: 1,
            inner_tol: 1e-12,
            inner_max_iter: 50,
        };
        let analysis = fourdvar_analysis(&ScalarVar, &s_b, &obs, &cfg).unwrap();
        let expect = 0.3 + sigma_b * sigma_b / (sigma_b * sigma_b + sigma_o * sigma_o) * d;
        assert_relative_eq!(analysis.s_a[0], expect, epsilon = 1e-8);
        assert!(analysis.outer[0].grad_ratio <= 1e-12 * 10.0);
    }

    #[test]
    fn fourdvar_without_observations_returns_background() {
        let s_b = DVector::from_element(1, 1.23);
        let obs = WindowObs {
            steps: vec![],
            values: vec![],
            sigma_obs: 0.5,
        };
        let cfg = VarConfig {
            sigma_b: 0.5,
            window_steps: 4,
            outer_loops: 2,
            inner_tol: 1e-10,
            inner_max_iter: 50,
        };
        let analysis = fourdvar_analysis(&ScalarVar, &s_b, &obs, &cfg).unwrap();
        assert_eq!(analysis.s_a, s_b);
    }

    #[test]
    fn adjoint_chain_identity_over_twenty_steps() {
        let data = generate_dataset(&DatasetConfig {
            train_steps: 3_000,
            test_steps: 100,
            spinup_steps: 100,
            ..DatasetConfig::default()
        })
        .unwrap();
        let mut model = crate::reservoir::init_reservoir(
            96,
            6,
            6,
            0.05,
            crate::reservoir::MacroParams {
                rho: 0.1,
                sigma_in: 0.07,
                leak: 0.7,
                tikhonov: 1e-7,
            },
            3,
        )
        .unwrap();
        crate::reservoir::train_readout_streaming(&mut model, &data.train.states, &data.train.states, 500)
            .unwrap();
        let da = RnnDaModel::new(&model, &[0, 1, 3]).unwrap();
        let mut s = model
            .drive(
                &data.train.states.columns(0, 600).clone_owned(),
                &DVector::zeros(96),
            )
            .unwrap();
        // Build the 20-step chain along the closed-loop trajectory.
        let mut tlms = Vec::new();
        for _ in 0..20 {
            tlms.push(da.tlm(&s).unwrap());
            da.forecast(&mut s, 1).unwrap();
        }
        let mut rng = stream_rng(5, stream::TEST);
        for _ in 0..10 {
            let v = standard_normal_vector(&mut rng, 96);
            let w = standard_normal_vector(&mut rng, 96);
            let mut fwd = v.clone();
            for t in &tlms {
                fwd = t.apply(&fwd);
            }
            let mut bwd = w.clone();
            for t in tlms.iter().rev() {
                bwd = t.apply_transpose(&bwd);
            }
            let lhs = fwd.dot(&w);
            let rhs = v.dot(&bwd);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn fourdvar_cost_decreases_across_outer_loops() {
        let data = generate_dataset(&DatasetConfig {
            train_steps: 2_000,
            test_steps: 500,
            spinup_steps: 200,
            ..DatasetConfig::default()
        })
        .unwrap();
        let model = L96DaModel::new(6, 0.01, 8.0, &[0, 1, 2, 3, 4, 5]).unwrap();
        let truth0 = data.test.state(100);
        // Noisy observations along the true trajectory every 2 steps.
        let mut steps = Vec::new();
        let mut values = Vec::new();
        let mut rng = stream_rng(6, stream::TEST);
        for t in (0..20).step_by(2) {
            steps.push(t);
            let mut y = data.test.state(100 + t);
            for v in y.iter_mut() {
                *v += 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            values.push(y);
        }
        let obs = WindowObs {
            steps,
            values,
            sigma_obs: 0.1,
        };
        let cfg = VarConfig {
            sigma_b: 0.5,
            window_steps: 20,
            outer_loops: 3,
            inner_tol: 1e-10,
            inner_max_iter: 300,
        };
        let background = &truth0 + standard_normal_vector(&mut rng, 6) * 0.5;
        let analysis = fourdvar_analysis(&model, &background, &obs, &cfg).unwrap();
        let mut costs: Vec<f64> = analysis.outer.iter().map(|o| o.cost).collect();
        costs.push(analysis.final_cost);
        for pair in costs.windows(2) {
            assert!(
                pair[1] <= pair[0] + 1e-6 * pair[0].abs().max(1.0),
                "cost increased across outer loops: {costs:?}"
            );
        }
        // Analysis closer to the truth than the background.
        assert!((analysis.s_a - &truth0).norm() < (background - &truth0).norm());
    }

    #[test]
    fn perfect_model_near_noiseless_obs_drive_error_to_zero() {
        let cfg = DatasetConfig {
            train_steps: 4_000,
            test_steps: 100,
            spinup_steps: 500,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let nature = &data.train;
        let all: Vec<usize> = (0..6).collect();
        let obs = sample_observations(nature, &all, 0.2, 1e-4, 1e-4, 9).unwrap();
        let sigma_clim = crate::metrics::climatological_std(nature).unwrap();
        let model = L96DaModel::new(6, 0.01, 8.0, &all).unwrap();
        let ctx = CycleContext {
            nature,
            obs: &obs,
            start_idx: 0,
            cfg: CycleConfig::new(0.2, 60, 1.02, sigma_clim),
        };
        let members = init_system_members(nature, 0, 0.5, 10, 9);
        let diag = cycle_etkf(&model, members, &ctx, 1e-4).unwrap();
        assert!(diag.diverged_at.is_none());
        let last = diag.records.last().unwrap();
        assert!(
            last.an_rmse_all < 1e-2,
            "ETKF with near-perfect obs should reach tiny error, got {}",
            last.an_rmse_all
        );
        // Same regime, 4D-Var.
        let var_cfg = VarConfig {
            sigma_b: 1e-4,
            window_steps: 20,
            outer_loops: 2,
            inner_tol: 1e-10,
            inner_max_iter: 200,
        };
        let x0 = init_system_members(nature, 0, 0.5, 1, 10).remove(0);
        let diag = cycle_fourdvar(&model, x0, &ctx, &var_cfg).unwrap();
        assert!(diag.diverged_at.is_none());
        let last = diag.records.last().unwrap();
        assert!(
            last.an_rmse_all < 1e-2,
            "4D-Var with near-perfect obs should reach tiny error, got {}",
            last.an_rmse_all
        );
    }

    #[test]
    fn direct_insertion_cycle_with_full_frequent_obs_tracks_truth() {
        let cfg = DatasetConfig {
            train_steps: 2_000,
            test_steps: 100,
            spinup_steps: 300,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let nature = &data.train;
        let all: Vec<usize> = (0..6).collect();
        let obs = sample_observations(nature, &all, 0.02, 0.0, 0.5, 11).unwrap();
        let sigma_clim = crate::metrics::climatological_std(nature).unwrap();
        let model = L96DaModel::new(6, 0.01, 8.0, &all).unwrap();
        let ctx = CycleContext {
            nature,
            obs: &obs,
            start_idx: 0,
            cfg: CycleConfig::new(0.02, 200, 1.0, sigma_clim),
        };
        let x0 = init_system_members(nature, 0, 0.5, 1, 12).remove(0);
        let diag = cycle_direct_insertion(&model, x0, &ctx).unwrap();
        // Perfect full observations inserted every step: analysis = truth.
        let last = diag.records.last().unwrap();
        assert!(last.an_rmse_all < 1e-10);
    }

    #[test]
    fn rnn_insertion_with_full_frequent_obs_reduces_to_teacher_forcing() {
        let data = generate_dataset(&DatasetConfig {
            train_steps: 20_000,
            test_steps: 2_000,
            spinup_steps: 300,
            ..DatasetConfig::default()
        })
        .unwrap();
        let mut model = crate::reservoir::init_reservoir(
            256,
            6,
            6,
            0.05,
            crate::reservoir::MacroParams {
                rho: 0.1,
                sigma_in: 0.07,
                leak: 0.7,
                tikhonov: 1e-7,
            },
            5,
        )
        .unwrap();
        crate::reservoir::train_readout_streaming(&mut model, &data.train.states, &data.train.states, 500)
            .unwrap();
        let all: Vec<usize> = (0..6).collect();
        let obs = sample_observations(&data.test, &all, 0.01, 0.0, 0.5, 13).unwrap();
        let sigma_clim = crate::metrics::climatological_std(&data.train).unwrap();
        let start = 500;
        let ctx = CycleContext {
            nature: &data.test,
            obs: &obs,
            start_idx: start,
            cfg: CycleConfig::new(0.01, 300, 1.0, sigma_clim.clone()),
        };
        let s0 = init_hidden_members(&model, &data.test, start, 400, 0.0, 1, 13)
            .unwrap()
            .remove(0);
        let diag = cycle_rnn_insertion(&model, s0, &ctx).unwrap();
        // Inserting noiseless full observations each step makes the
        // analysis exactly the observation vector and the input channel
        // equal to truth, i.e. teacher forcing: the background must stay
        // close to truth at every cycle.
        assert!(diag.diverged_at.is_none());
        let last = diag.records.last().unwrap();
        assert!(last.an_rmse_all < 1e-10, "analysis should equal inserted truth");
        let worst_bg = diag
            .records
            .iter()
            .skip(5)
            .map(|r| r.bg_nrmse_all)
            .fold(0.0f64, f64::max);
        assert!(worst_bg < 0.3, "teacher-forced background drifted: {worst_bg}");
    }
}
