//! Macro-parameter training: the time-weighted multi-forecast loss and a
//! Kriging-based efficient global optimization loop that minimizes it over
//! (ρ, σ, l, log β).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::l96::Trajectory;
use crate::localization::{train_patched, PatchLayout, PatchedReservoir};
use crate::metrics::climatological_std;
use crate::reservoir::{init_reservoir, train_readout_streaming, MacroParams, ReservoirModel};
use crate::rng::{stream, stream_rng};

#[derive(Debug, Clone)]
pub struct MacroLossConfig {
    pub hidden_dim: usize,
    pub density: f64,
    /// Number of forecasts averaged into one loss value.
    pub n_forecasts: usize,
    /// Steps per forecast.
    pub forecast_len: usize,
    /// Synchronization steps discarded before readout training, and the
    /// earliest admissible forecast start.
    pub washout: usize,
    pub reservoir_seed: u64,
    pub sample_seed: u64,
}

/// Fresh reservoir at the candidate macro parameters with its readout
/// ridge-trained on the full training trajectory.
pub fn build_candidate(
    params: &MacroParams,
    train: &Trajectory,
    cfg: &MacroLossConfig,
) -> Result<ReservoirModel> {
    let d = train.dim();
    let mut model = init_reservoir(
        cfg.hidden_dim,
        d,
        d,
        cfg.density,
        *params,
        cfg.reservoir_seed,
    )?;
    train_readout_streaming(&mut model, &train.states, &train.states, cfg.washout)?;
    Ok(model)
}

/// Draw `count` distinct forecast start columns in [washout, limit).
fn draw_starts(count: usize, washout: usize, limit: usize, seed: u64) -> Result<Vec<usize>> {
    if limit <= washout {
        return Err(Error::Config(format!(
            "training run too short to place forecasts: starts must lie in [{washout}, {limit})"
        )));
    }
    let span = limit - washout;
    if count > span {
        return Err(Error::Config(format!(
            "cannot draw {count} distinct starts from {span} admissible columns"
        )));
    }
    let mut rng = stream_rng(seed, stream::MACRO);
    let mut starts = std::collections::BTreeSet::new();
    while starts.len() < count {
        starts.insert(washout + rng.gen_range(0..span));
    }
    Ok(starts.into_iter().collect())
}

/// Sum over forecasts of Σ_s ‖x^f - x‖²·exp(-s/N), s = 1..N. Forecasts
/// that blow up contribute as if they sat ten climatological deviations
/// from the truth at every step.
pub fn forecast_loss(
    model: &ReservoirModel,
    train: &Trajectory,
    cfg: &MacroLossConfig,
) -> Result<f64> {
    let n = cfg.forecast_len;
    if n == 0 || cfg.n_forecasts == 0 {
        return Err(Error::Config("forecast loss needs n_forecasts >= 1 and forecast_len >= 1".into()));
    }
    let limit = train
        .len()
        .checked_sub(n + 1)
        .ok_or_else(|| Error::Config("training run shorter than one forecast".into()))?;
    let starts = draw_starts(cfg.n_forecasts, cfg.washout, limit, cfg.sample_seed)?;
    let snapshots = model.snapshot_states(
        &train.states,
        &DVector::zeros(model.hidden_dim()),
        &starts,
    )?;
    let weights: Vec<f64> = (1..=n).map(|s| (-(s as f64) / n as f64).exp()).collect();
    let sigma = climatological_std(train)?;
    let blowup: f64 = weights.iter().sum::<f64>() * sigma.iter().map(|s| (10.0 * s).powi(2)).sum::<f64>();
    let mut total = 0.0;
    for (&j0, s0) in starts.iter().zip(&snapshots) {
        let x0 = train.state(j0);
        match model.free_forecast(s0, &x0, n, train.dt, train.time(j0)) {
            Ok(fc) => {
                let mut acc = 0.0;
                for s in 1..=n {
                    let diff = fc.states.state(s - 1) - train.state(j0 + s);
                    acc += weights[s - 1] * diff.norm_squared();
                }
                total += if acc.is_finite() { acc } else { blowup };
            }
            Err(Error::Diverged { .. }) => total += blowup,
            Err(e) => return Err(e),
        }
    }
    Ok(total)
}

/// Loss at candidate macro parameters: build, train, forecast, score.
pub fn macro_loss(params: &MacroParams, train: &Trajectory, cfg: &MacroLossConfig) -> Result<f64> {
    let model = build_candidate(params, train, cfg)?;
    forecast_loss(&model, train, cfg)
}

/// Patched counterpart of `forecast_loss`. Teacher forcing is per patch
/// (each sees its gathered truth rows), so synchronization snapshots come
/// from independent per-patch passes; only the closed-loop rollout couples
/// the patches through the assembled readout.
pub fn patched_forecast_loss(
    patched: &PatchedReservoir,
    train: &Trajectory,
    cfg: &MacroLossConfig,
) -> Result<f64> {
    let n = cfg.forecast_len;
    if n == 0 || cfg.n_forecasts == 0 {
        return Err(Error::Config("forecast loss needs n_forecasts >= 1 and forecast_len >= 1".into()));
    }
    let limit = train
        .len()
        .checked_sub(n + 1)
        .ok_or_else(|| Error::Config("training run shorter than one forecast".into()))?;
    let starts = draw_starts(cfg.n_forecasts, cfg.washout, limit, cfg.sample_seed)?;
    let layout = patched.layout();
    let mut per_patch = Vec::with_capacity(layout.n_patches());
    for (p, model) in patched.patches().iter().enumerate() {
        let nodes = layout.input_nodes(p);
        let local = DMatrix::from_fn(nodes.len(), train.len(), |i, j| train.states[(nodes[i], j)]);
        per_patch.push(model.snapshot_states(&local, &DVector::zeros(model.hidden_dim()), &starts)?);
    }
    let weights: Vec<f64> = (1..=n).map(|s| (-(s as f64) / n as f64).exp()).collect();
    let sigma = climatological_std(train)?;
    let blowup: f64 = weights.iter().sum::<f64>() * sigma.iter().map(|s| (10.0 * s).powi(2)).sum::<f64>();
    let mut total = 0.0;
    for (i, &j0) in starts.iter().enumerate() {
        let mut hidden: Vec<DVector<f64>> = per_patch.iter().map(|snaps| snaps[i].clone()).collect();
        match patched.free_forecast(&mut hidden, &train.state(j0), n) {
            Ok(fc) => {
                let mut acc = 0.0;
                for s in 1..=n {
                    let diff = fc.column(s - 1).clone_owned() - train.state(j0 + s);
                    acc += weights[s - 1] * diff.norm_squared();
                }
                total += if acc.is_finite() { acc } else { blowup };
            }
            Err(Error::Diverged { .. }) => total += blowup,
            Err(e) => return Err(e),
        }
    }
    Ok(total)
}

/// Loss at candidate macro parameters for a patched configuration: every
/// patch is trained fresh at the candidate, then the assembled system is
/// scored.
pub fn patched_macro_loss(
    layout: &PatchLayout,
    params: &MacroParams,
    train: &Trajectory,
    cfg: &MacroLossConfig,
) -> Result<f64> {
    let patched = train_patched(
        layout.clone(),
        cfg.hidden_dim,
        cfg.density,
        *params,
        train,
        cfg.washout,
        cfg.reservoir_seed,
    )?;
    patched_forecast_loss(&patched, train, cfg)
}

/// Per-forecast mean loss for each sampling seed, reservoir held fixed.
/// Used to study how the number of forecasts controls loss variance.
pub fn sample_mean_losses(
    model: &ReservoirModel,
    train: &Trajectory,
    cfg: &MacroLossConfig,
    sample_seeds: &[u64],
) -> Result<Vec<f64>> {
    sample_seeds
        .iter()
        .map(|&seed| {
            let cfg = MacroLossConfig {
                sample_seed: seed,
                ..cfg.clone()
            };
            Ok(forecast_loss(model, train, &cfg)? / cfg.n_forecasts as f64)
        })
        .collect()
}

/// Anisotropic squared-exponential Gaussian process on the unit box,
/// outputs standardized internally.
pub struct Gp {
    x: Vec<DVector<f64>>,
    alpha: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    length_scales: DVector<f64>,
    signal_var: f64,
    y_mean: f64,
    y_scale: f64,
}

fn kernel(a: &DVector<f64>, b: &DVector<f64>, ls: &DVector<f64>, signal_var: f64) -> f64 {
    let mut q = 0.0;
    for i in 0..a.len() {
        let d = (a[i] - b[i]) / ls[i];
        q += d * d;
    }
    signal_var * (-0.5 * q).exp()
}

fn kernel_matrix(x: &[DVector<f64>], ls: &DVector<f64>, signal_var: f64, noise: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = kernel(&x[i], &x[j], ls, signal_var);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += noise;
    }
    k
}

const GP_NOISE: f64 = 1e-8;

/// Negative marginal log-likelihood of standardized targets under
/// hyperparameters θ = [log ℓ_1.., log σ_f].
fn gp_nll(theta: &DVector<f64>, x: &[DVector<f64>], yn: &DVector<f64>) -> f64 {
    let d = x[0].len();
    let ls = DVector::from_fn(d, |i, _| theta[i].clamp(-4.6, 4.6).exp());
    let signal_var = (2.0 * theta[d].clamp(-4.6, 4.6)).exp();
    let k = kernel_matrix(x, &ls, signal_var, GP_NOISE);
    let Some(chol) = Cholesky::new(k) else {
        return f64::INFINITY;
    };
    let alpha = chol.solve(yn);
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    0.5 * yn.dot(&alpha) + log_det + 0.5 * x.len() as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Fit hyperparameters by multistart Nelder-Mead on the marginal
/// likelihood; Cholesky jitter escalates if the optimum is borderline.
pub fn fit_surrogate(x: &[DVector<f64>], y: &[f64], master_seed: u64) -> Result<Gp> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Config(format!("GP fit needs >= 2 points, got {n}")));
    }
    let d = x[0].len();
    if x.iter().any(|p| p.len() != d) {
        return Err(Error::dimension("fit_surrogate", format!("{d} coordinates"), "mixed"));
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_scale = if y_var > 0.0 { y_var.sqrt() } else { 1.0 };
    let yn = DVector::from_fn(n, |i, _| (y[i] - y_mean) / y_scale);
    let mut rng = stream_rng(master_seed, stream::MACRO);
    let mut starts = vec![DVector::from_fn(d + 1, |i, _| if i < d { (0.3f64).ln() } else { 0.0 })];
    for _ in 0..3 {
        starts.push(DVector::from_fn(d + 1, |i, _| {
            if i < d {
                rng.gen_range((0.05f64).ln()..(2.0f64).ln())
            } else {
                rng.gen_range((0.3f64).ln()..(3.0f64).ln())
            }
        }));
    }
    let mut best: Option<(f64, DVector<f64>)> = None;
    for start in &starts {
        let (theta, val) = nelder_mead(|t| gp_nll(t, x, &yn), start, 0.5, 1e-8, 200);
        if best.as_ref().map_or(true, |(b, _)| val < *b) {
            best = Some((val, theta));
        }
    }
    let (nll, theta) = best.expect("at least one start");
    if !nll.is_finite() {
        return Err(Error::numerical("fit_surrogate", "likelihood not finite at any start"));
    }
    let ls = DVector::from_fn(d, |i, _| theta[i].clamp(-4.6, 4.6).exp());
    let signal_var = (2.0 * theta[d].clamp(-4.6, 4.6)).exp();
    let mut jitter = GP_NOISE;
    let chol = loop {
        let k = kernel_matrix(x, &ls, signal_var, jitter);
        if let Some(c) = Cholesky::new(k) {
            break c;
        }
        jitter *= 100.0;
        if jitter > 1e-5 {
            return Err(Error::numerical(
                "fit_surrogate",
                "kernel matrix not positive definite even with 1e-6 jitter",
            ));
        }
    };
    let alpha = chol.solve(&yn);
    Ok(Gp {
        x: x.to_vec(),
        alpha,
        chol,
        length_scales: ls,
        signal_var,
        y_mean,
        y_scale,
    })
}

impl Gp {
    /// Posterior mean and variance in original output units.
    pub fn predict(&self, p: &DVector<f64>) -> (f64, f64) {
        let n = self.x.len();
        let k_star = DVector::from_fn(n, |i, _| {
            kernel(&self.x[i], p, &self.length_scales, self.signal_var)
        });
        let mean = self.y_mean + self.y_scale * k_star.dot(&self.alpha);
        let var_n = self.signal_var - k_star.dot(&self.chol.solve(&k_star));
        (mean, (self.y_scale * self.y_scale * var_n).max(0.0))
    }
}

/// Closed-form expected improvement below `best` for a normal posterior.
pub fn expected_improvement(mean: f64, variance: f64, best: f64) -> f64 {
    if variance <= 0.0 {
        return 0.0;
    }
    let sd = variance.sqrt();
    let z = (best - mean) / sd;
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    ((best - mean) * n.cdf(z) + sd * n.pdf(z)).max(0.0)
}

/// Nelder-Mead simplex minimization (standard reflect/expand/contract/
/// shrink coefficients). Returns the best vertex found.
pub fn nelder_mead(
    f: impl Fn(&DVector<f64>) -> f64,
    x0: &DVector<f64>,
    step: f64,
    tol: f64,
    max_iter: usize,
) -> (DVector<f64>, f64) {
    let d = x0.len();
    let mut simplex: Vec<(DVector<f64>, f64)> = Vec::with_capacity(d + 1);
    simplex.push((x0.clone(), f(x0)));
    for i in 0..d {
        let mut v = x0.clone();
        v[i] += step;
        let fv = f(&v);
        simplex.push((v, fv));
    }
    let order = |s: &mut Vec<(DVector<f64>, f64)>| {
        s.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(std::cmp::Ordering::Equal))
    };
    order(&mut simplex);
    for _ in 0..max_iter {
        if simplex[d].1 - simplex[0].1 <= tol * (1.0 + simplex[0].1.abs()) {
            break;
        }
        let centroid = {
            let mut c = DVector::zeros(d);
            for (v, _) in &simplex[..d] {
                c += v;
            }
            c / d as f64
        };
        let worst = simplex[d].clone();
        let reflected = &centroid * 2.0 - &worst.0;
        let fr = f(&reflected);
        if fr < simplex[0].1 {
            let expanded = &centroid + (&reflected - &centroid) * 2.0;
            let fe = f(&expanded);
            simplex[d] = if fe < fr { (expanded, fe) } else { (reflected, fr) };
        } else if fr < simplex[d - 1].1 {
            simplex[d] = (reflected, fr);
        } else {
            let contracted = if fr < worst.1 {
                &centroid + (&reflected - &centroid) * 0.5
            } else {
                &centroid + (&worst.0 - &centroid) * 0.5
            };
            let fc = f(&contracted);
            if fc < worst.1.min(fr) {
                simplex[d] = (contracted, fc);
            } else {
                let best = simplex[0].0.clone();
                for entry in simplex.iter_mut().skip(1) {
                    entry.0 = (&entry.0 + &best) * 0.5;
                    entry.1 = f(&entry.0);
                }
            }
        }
        order(&mut simplex);
    }
    simplex.swap_remove(0)
}

/// Latin hypercube sample of `n` points in the unit box: one point per
/// stratum per coordinate.
pub fn latin_hypercube<R: Rng>(n: usize, d: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let mut coords = vec![vec![0.0f64; n]; d];
    for dim_slots in coords.iter_mut() {
        let mut strata: Vec<usize> = (0..n).collect();
        // Fisher-Yates with the shared stream.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            strata.swap(i, j);
        }
        for (slot, &stratum) in dim_slots.iter_mut().zip(&strata) {
            *slot = (stratum as f64 + rng.gen_range(0.0..1.0)) / n as f64;
        }
    }
    (0..n)
        .map(|i| DVector::from_fn(d, |dim, _| coords[dim][i]))
        .collect()
}

#[derive(Debug, Clone)]
pub struct EgoConfig {
    pub n_init: usize,
    pub n_iter: usize,
    /// Points proposed per iteration via the constant-liar heuristic.
    pub batch: usize,
    /// Random starts for each expected-improvement maximization.
    pub n_ei_starts: usize,
}

impl Default for EgoConfig {
    fn default() -> Self {
        EgoConfig {
            n_init: 10,
            n_iter: 15,
            batch: 4,
            n_ei_starts: 100,
        }
    }
}

pub struct EgoResult {
    pub best_x: DVector<f64>,
    pub best_y: f64,
    /// Every true evaluation in order.
    pub history: Vec<(DVector<f64>, f64)>,
}

/// Kriging-guided minimization over a box. Failure of the objective
/// propagates; the surrogate never sees fabricated values other than the
/// constant-liar placeholders inside one batch.
pub fn ego_minimize(
    mut f: impl FnMut(&DVector<f64>) -> Result<f64>,
    bounds: &[(f64, f64)],
    cfg: &EgoConfig,
    master_seed: u64,
) -> Result<EgoResult> {
    let d = bounds.len();
    if d == 0 {
        return Err(Error::Config("ego_minimize needs at least one dimension".into()));
    }
    for &(lo, hi) in bounds {
        if !(lo < hi) {
            return Err(Error::Config(format!("bad bound [{lo}, {hi}]")));
        }
    }
    if cfg.n_init < 2 {
        return Err(Error::Config("ego_minimize needs n_init >= 2".into()));
    }
    let denorm = |z: &DVector<f64>| {
        DVector::from_fn(d, |i, _| bounds[i].0 + z[i] * (bounds[i].1 - bounds[i].0))
    };
    let clamp_unit = |z: &DVector<f64>| DVector::from_fn(d, |i, _| z[i].clamp(0.0, 1.0));
    let mut rng = stream_rng(master_seed, stream::MACRO);
    let mut xs: Vec<DVector<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut history = Vec::new();
    for z in latin_hypercube(cfg.n_init, d, &mut rng) {
        let x = denorm(&z);
        let y = f(&x)?;
        history.push((x, y));
        xs.push(z);
        ys.push(y);
    }
    for iter in 0..cfg.n_iter {
        let mut xs_liar = xs.clone();
        let mut ys_liar = ys.clone();
        let lie = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut batch = Vec::with_capacity(cfg.batch);
        for b in 0..cfg.batch {
            let gp = fit_surrogate(&xs_liar, &ys_liar, master_seed ^ (iter * 31 + b) as u64)?;
            let best = ys_liar.iter().cloned().fold(f64::INFINITY, f64::min);
            let neg_ei = |z: &DVector<f64>| {
                let zc = clamp_unit(z);
                let (m, v) = gp.predict(&zc);
                -expected_improvement(m, v, best)
            };
            let mut champion: Option<(f64, DVector<f64>)> = None;
            for _ in 0..cfg.n_ei_starts {
                let z = DVector::from_fn(d, |_, _| rng.gen_range(0.0..1.0));
                let val = neg_ei(&z);
                if champion.as_ref().map_or(true, |(c, _)| val < *c) {
                    champion = Some((val, z));
                }
            }
            let (_, seed_pt) = champion.expect("n_ei_starts >= 1");
            let (refined, _) = nelder_mead(neg_ei, &seed_pt, 0.05, 1e-10, 120);
            let mut pick = clamp_unit(&refined);
            // A proposal collapsing onto an existing point carries no
            // information; fall back to a random probe.
            if xs_liar.iter().any(|p| (p - &pick).norm() < 1e-9) {
                pick = DVector::from_fn(d, |_, _| rng.gen_range(0.0..1.0));
            }
            xs_liar.push(pick.clone());
            ys_liar.push(lie);
            batch.push(pick);
        }
        for z in batch {
            let x = denorm(&z);
            let y = f(&x)?;
            history.push((x, y));
            xs.push(z);
            ys.push(y);
        }
    }
    let (best_idx, &best_y) = ys
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
        .expect("non-empty history");
    Ok(EgoResult {
        best_x: denorm(&xs[best_idx]),
        best_y,
        history,
    })
}

/// Search box: ρ ∈ [0.1, 1.5], σ and l ∈ [0.001, 1], β log-spaced in
/// [1e-8, 1].
pub fn macro_bounds() -> Vec<(f64, f64)> {
    vec![
        (0.1, 1.5),
        (0.001, 1.0),
        (0.001, 1.0),
        ((1e-8f64).ln(), 0.0),
    ]
}

pub fn params_from_point(x: &DVector<f64>) -> MacroParams {
    MacroParams {
        rho: x[0],
        sigma_in: x[1],
        leak: x[2],
        tikhonov: x[3].exp(),
    }
}

/// End-to-end macro-parameter search on a training trajectory.
pub fn optimize_macro(
    train: &Trajectory,
    loss_cfg: &MacroLossConfig,
    ego_cfg: &EgoConfig,
    master_seed: u64,
) -> Result<(MacroParams, f64, EgoResult)> {
    let bounds = macro_bounds();
    let result = ego_minimize(
        |x| macro_loss(&params_from_point(x), train, loss_cfg),
        &bounds,
        ego_cfg,
        master_seed,
    )?;
    let params = params_from_point(&result.best_x);
    Ok((params, result.best_y, result))
}

/// Macro search for a patched configuration; each evaluation retrains the
/// whole patch family, so budgets should be sized accordingly.
pub fn optimize_patched_macro(
    layout: &PatchLayout,
    train: &Trajectory,
    loss_cfg: &MacroLossConfig,
    ego_cfg: &EgoConfig,
    master_seed: u64,
) -> Result<(MacroParams, f64, EgoResult)> {
    let bounds = macro_bounds();
    let result = ego_minimize(
        |x| patched_macro_loss(layout, &params_from_point(x), train, loss_cfg),
        &bounds,
        ego_cfg,
        master_seed,
    )?;
    let params = params_from_point(&result.best_x);
    Ok((params, result.best_y, result))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use crate::l96::{generate_dataset, DatasetConfig};

    #[test]
    fn forecast_starts_are_distinct_sorted_and_reproducible() {
        let a = draw_starts(50, 1_000, 5_000, 3).unwrap();
        let b = draw_starts(50, 1_000, 5_000, 3).unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&s| (1_000..5_000).contains(&s)));
        let c = draw_starts(50, 1_000, 5_000, 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn weighted_loss_matches_direct_recomputation() {
        let data = generate_dataset(&DatasetConfig {
            train_steps: 3_000,
            test_steps: 100,
            spinup_steps: 100,
            ..DatasetConfig::default()
        })
        .unwrap();
        let cfg = MacroLossConfig {
            hidden_dim: 96,
            density: 0.05,
            n_forecasts: 4,
            forecast_len: 30,
            washout: 500,
            reservoir_seed: 5,
            sample_seed: 8,
        };
        let params = MacroParams {
            rho: 0.1,
            sigma_in: 0.07,
            leak: 0.7,
            tikhonov: 1e-7,
        };
        let model = build_candidate(&params, &data.train, &cfg).unwrap();
        let loss = forecast_loss(&model, &data.train, &cfg).unwrap();
        // Recompute by explicit stepping.
        let starts = draw_starts(4, 500, data.train.len() - 31, 8).unwrap();
        let mut expected = 0.0;
        for &j0 in &starts {
            let hidden = model
                .synchronize(
                    &data.train.states.columns(0, j0 + 1).clone_owned(),
                    &DVector::zeros(96),
                )
                .unwrap();
            let s0 = hidden.column(j0).clone_owned();
            let fc = model
                .free_forecast(&s0, &data.train.state(j0), 30, data.train.dt, 0.0)
                .unwrap();
            for s in 1..=30usize {
                let diff = fc.states.state(s - 1) - data.train.state(j0 + s);
                expected += diff.norm_squared() * (-(s as f64) / 30.0).exp();
            }
        }
        assert_relative_eq!(loss, expected, max_relative = 1e-12);
        assert!(loss.is_finite() && loss > 0.0);
    }

    #[test]
    fn single_patch_forecast_loss_matches_global_exactly() {
        // A one-patch layout with zero halo gathers the identity window,
        // so its synchronization, rollout, and weighting reduce to the
        // global code path operation for operation.
        let data = generate_dataset(&DatasetConfig {
            train_steps: 6_000,
            test_steps: 100,
            spinup_steps: 300,
            master_seed: 5,
            ..DatasetConfig::default()
        })
        .unwrap();
        let cfg = MacroLossConfig {
            hidden_dim: 96,
            density: 0.05,
            n_forecasts: 6,
            forecast_len: 120,
            washout: 500,
            reservoir_seed: 9,
            sample_seed: 4,
        };
        let params = MacroParams {
            rho: 0.1,
            sigma_in: 0.07,
            leak: 0.7,
            tikhonov: 1e-7,
        };
        let model = build_candidate(&params, &data.train, &cfg).unwrap();
        let global = forecast_loss(&model, &data.train, &cfg).unwrap();
        let layout = PatchLayout::new(6, 6, 0).unwrap();
        let patched = PatchedReservoir::new(layout, vec![model]).unwrap();
        let local = patched_forecast_loss(&patched, &data.train, &cfg).unwrap();
        assert_eq!(global, local);
    }

    #[test]
    fn saturating_parameters_score_far_worse() {
        let data = generate_dataset(&DatasetConfig {
            train_steps: 2_000,
            test_steps: 100,
            spinup_steps: 100,
            ..DatasetConfig::default()
        })
        .unwrap();
        let cfg = MacroLossConfig {
            hidden_dim: 64,
            density: 0.05,
            n_forecasts: 3,
            forecast_len: 50,
            washout: 300,
            reservoir_seed: 6,
            sample_seed: 9,
        };
        // Heavy ridge plus large spectral radius: the readout collapses and
        // forecasts sit far from the attractor instead of tracking it.
        let bad = MacroParams {
            rho: 1.5,
            sigma_in: 0.001,
            leak: 1.0,
            tikhonov: 1.0,
        };
        let good = MacroParams {
            rho: 0.1,
            sigma_in: 0.07,
            leak: 0.7,
            tikhonov: 1e-7,
        };
        let loss_bad = macro_loss(&bad, &data.train, &cfg).unwrap();
        let loss_good = macro_loss(&good, &data.train, &cfg).unwrap();
        assert!(loss_bad > loss_good * 10.0, "bad {loss_bad} vs good {loss_good}");
    }

    #[test]
    fn gp_interpolates_a_smooth_surface() {
        let mut rng = stream_rng(7, stream::TEST);
        let f = |p: &DVector<f64>| (2.5 * p[0]).sin() + p[1] * p[1];
        let xs: Vec<DVector<f64>> = latin_hypercube(40, 2, &mut rng);
        let ys: Vec<f64> = xs.iter().map(|p| f(p)).collect();
        let gp = fit_surrogate(&xs, &ys, 11).unwrap();
        let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        let mut worst: f64 = 0.0;
        for _ in 0..50 {
            let p = DVector::from_fn(2, |_, _| rng.gen_range(0.05..0.95));
            let (mean, _) = gp.predict(&p);
            worst = worst.max((mean - f(&p)).abs() / range);
        }
        assert!(worst < 0.05, "worst relative GP error {worst}");
    }

    #[test]
    fn gp_reproduces_training_points_with_small_variance() {
        let mut rng = stream_rng(8, stream::TEST);
        let xs = latin_hypercube(20, 3, &mut rng);
        let ys: Vec<f64> = xs.iter().map(|p| p.norm_squared()).collect();
        let gp = fit_surrogate(&xs, &ys, 12).unwrap();
        for (x, &y) in xs.iter().zip(&ys) {
            let (mean, var) = gp.predict(x);
            assert!((mean - y).abs() < 1e-3, "mean {mean} vs {y}");
            assert!(var >= 0.0 && var < 1e-3, "variance {var}");
        }
    }

    #[test]
    fn expected_improvement_matches_monte_carlo() {
        let cases = [(0.0, 1.0, 0.5), (1.2, 0.25, 1.0), (-0.3, 2.0, -1.0), (2.0, 0.01, 0.0)];
        let mut rng = stream_rng(9, stream::TEST);
        for &(mean, var, best) in &cases {
            let closed = expected_improvement(mean, var, best);
            let n = 2_000_000;
            let sd = var.sqrt();
            let mut acc = 0.0;
            for _ in 0..n {
                let draw: f64 = mean + sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
                acc += (best - draw).max(0.0);
            }
            let mc = acc / n as f64;
            let tol = 0.01 * closed.max(1e-4) + 3.0 * sd / (n as f64).sqrt();
            assert!(
                (closed - mc).abs() < tol,
                "EI({mean},{var},{best}): closed {closed} vs MC {mc}"
            );
        }
    }

    #[test]
    fn expected_improvement_degenerate_cases() {
        assert_eq!(expected_improvement(0.3, 0.0, 1.0), 0.0);
        // Far-above posterior: essentially no improvement mass.
        assert!(expected_improvement(10.0, 0.01, 0.0) < 1e-12);
        // Certain improvement: EI -> best - mean.
        assert_relative_eq!(
            expected_improvement(-5.0, 1e-6, 0.0),
            5.0,
            max_relative = 1e-6
        );
    }

    #[test]
    fn nelder_mead_finds_quadratic_and_rosenbrock_minima() {
        let quad = |x: &DVector<f64>| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2);
        let (xq, fq) = nelder_mead(quad, &DVector::zeros(2), 0.5, 1e-12, 500);
        assert!(fq < 1e-9);
        assert_relative_eq!(xq[0], 1.5, epsilon = 1e-4);
        assert_relative_eq!(xq[1], -0.5, epsilon = 1e-4);
        let rosen = |x: &DVector<f64>| {
            100.0 * (x[1] - x[0] * x[0]).powi(2) + (1.0 - x[0]).powi(2)
        };
        let (xr, fr) = nelder_mead(rosen, &DVector::from_vec(vec![-1.2, 1.0]), 0.5, 1e-14, 3_000);
        assert!(fr < 1e-6, "Rosenbrock value {fr} at {xr:?}");
    }

    #[test]
    fn latin_hypercube_is_stratified() {
        let mut rng = stream_rng(10, stream::TEST);
        let n = 16;
        let pts = latin_hypercube(n, 3, &mut rng);
        assert_eq!(pts.len(), n);
        for dim in 0..3 {
            let mut seen = vec![false; n];
            for p in &pts {
                let stratum = (p[dim] * n as f64).floor() as usize;
                assert!(!seen[stratum], "two points share stratum {stratum} in dim {dim}");
                seen[stratum] = true;
            }
        }
    }

    fn branin(x: &DVector<f64>) -> f64 {
        let (a, b, c) = (1.0, 5.1 / (4.0 * std::f64::consts::PI.powi(2)), 5.0 / std::f64::consts::PI);
        let (r, s, t) = (6.0, 10.0, 1.0 / (8.0 * std::f64::consts::PI));
        a * (x[1] - b * x[0] * x[0] + c * x[0] - r).powi(2) + s * (1.0 - t) * x[0].cos() + s
    }

    #[test]
    fn ego_reaches_branin_optimum() {
        let bounds = [(-5.0, 10.0), (0.0, 15.0)];
        let result = ego_minimize(|x| Ok(branin(x)), &bounds, &EgoConfig::default(), 17).unwrap();
        assert_eq!(result.history.len(), 10 + 15 * 4);
        // Global minimum 0.397887 at three symmetric points.
        assert!(
            result.best_y - 0.397887 < 1e-2,
            "EGO best {} after {} evaluations",
            result.best_y,
            result.history.len()
        );
        // Incumbent trace never worsens.
        let mut inc = f64::INFINITY;
        for (_, y) in &result.history {
            inc = inc.min(*y);
        }
        assert_eq!(inc, result.best_y);
    }

    #[test]
    fn ego_is_reproducible() {
        let bounds = [(-5.0, 10.0), (0.0, 15.0)];
        let cfg = EgoConfig {
            n_init: 6,
            n_iter: 3,
            batch: 2,
            n_ei_starts: 40,
        };
        let a = ego_minimize(|x| Ok(branin(x)), &bounds, &cfg, 23).unwrap();
        let b = ego_minimize(|x| Ok(branin(x)), &bounds, &cfg, 23).unwrap();
        assert_eq!(a.best_y, b.best_y);
        assert_eq!(a.history.len(), b.history.len());
        for ((xa, ya), (xb, yb)) in a.history.iter().zip(&b.history) {
            assert_eq!(xa, xb);
            assert_eq!(ya, yb);
        }
    }

    #[test]
    fn objective_errors_propagate_out_of_ego() {
        let bounds = [(0.0, 1.0)];
        let result = ego_minimize(
            |_| Err(Error::Config("objective unavailable".into())),
            &bounds,
            &EgoConfig::default(),
            1,
        );
        assert!(result.is_err());
    }

    #[test]
    fn macro_point_mapping_covers_the_box() {
        let bounds = macro_bounds();
        assert_eq!(bounds.len(), 4);
        let lo = DVector::from_vec(bounds.iter().map(|b| b.0).collect::<Vec<_>>());
        let p = params_from_point(&lo);
        assert_relative_eq!(p.rho, 0.1);
        assert_relative_eq!(p.sigma_in, 0.001);
        assert_relative_eq!(p.leak, 0.001);
        assert_relative_eq!(p.tikhonov, 1e-8, max_relative = 1e-12);
        p.validate().unwrap();
    }
}
