//! Lorenz-96 ground truth: tendency, RK4 integration, the one-step
//! tangent-linear/adjoint propagator, observation sampling, and
//! train/test dataset generation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::linalg::Propagator;
use crate::rng::{stream, stream_rng};

pub const DEFAULT_FORCING: f64 = 8.0;
pub const DEFAULT_DT: f64 = 0.01;

/// Time-indexed system states, one column per step.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: DMatrix<f64>,
    pub dt: f64,
    pub t0: f64,
}

impl Trajectory {
    pub fn new(states: DMatrix<f64>, dt: f64, t0: f64) -> Result<Self> {
        if states.ncols() < 1 {
            return Err(Error::Config("trajectory needs at least one state".into()));
        }
        if !(dt > 0.0) {
            return Err(Error::Config(format!("trajectory dt must be positive, got {dt}")));
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("Trajectory::new", "non-finite state"));
        }
        Ok(Trajectory { states, dt, t0 })
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn len(&self) -> usize {
        self.states.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.ncols() == 0
    }

    pub fn state(&self, j: usize) -> DVector<f64> {
        self.states.column(j).clone_owned()
    }

    pub fn time(&self, j: usize) -> f64 {
        self.t0 + j as f64 * self.dt
    }
}

/// Timestamped partial, noisy measurements with a diagonal error model.
///
/// `values` has one column per observation time, rows aligned with
/// `obs_indices`. `noise_std` is the generating noise, `assumed_std` the
/// σ_obs used to build R in the assimilation step.
#[derive(Debug, Clone)]
pub struct ObservationSequence {
    pub times: Vec<f64>,
    pub obs_indices: Vec<usize>,
    pub values: DMatrix<f64>,
    pub noise_std: f64,
    pub assumed_std: f64,
}

impl ObservationSequence {
    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs_indices.len()
    }

    /// Column index of the observation batch at time `t`, if any.
    pub fn batch_at(&self, t: f64, dt: f64) -> Option<usize> {
        // Times lie on the model grid; half-step tolerance absorbs float drift.
        self.times
            .binary_search_by(|probe| probe.partial_cmp(&t).unwrap())
            .ok()
            .or_else(|| {
                self.times
                    .iter()
                    .position(|&ti| (ti - t).abs() < 0.5 * dt)
            })
    }
}

/// Eq.-of-motion right-hand side: out_i = x_{i-1}(x_{i+1} - x_{i-2}) - x_i + F.
pub fn l96_tendency(x: &DVector<f64>, forcing: f64) -> Result<DVector<f64>> {
    let d = x.len();
    if d < 4 {
        return Err(Error::dimension(
            "l96_tendency",
            "dimension >= 4 (cyclic stencil spans 4 offsets)",
            d.to_string(),
        ));
    }
    let mut out = DVector::zeros(d);
    tendency_into(x.as_slice(), forcing, out.as_mut_slice());
    Ok(out)
}

fn tendency_into(x: &[f64], forcing: f64, out: &mut [f64]) {
    let d = x.len();
    for i in 0..d {
        let im1 = x[(i + d - 1) % d];
        let im2 = x[(i + d - 2) % d];
        let ip1 = x[(i + 1) % d];
        out[i] = im1 * (ip1 - im2) - x[i] + forcing;
    }
}

fn rk4_step(x: &DVector<f64>, dt: f64, forcing: f64) -> DVector<f64> {
    let d = x.len();
    let mut k1 = DVector::zeros(d);
    let mut k2 = DVector::zeros(d);
    let mut k3 = DVector::zeros(d);
    let mut k4 = DVector::zeros(d);
    tendency_into(x.as_slice(), forcing, k1.as_mut_slice());
    let stage = x + &k1 * (dt / 2.0);
    tendency_into(stage.as_slice(), forcing, k2.as_mut_slice());
    let stage = x + &k2 * (dt / 2.0);
    tendency_into(stage.as_slice(), forcing, k3.as_mut_slice());
    let stage = x + &k3 * dt;
    tendency_into(stage.as_slice(), forcing, k4.as_mut_slice());
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// Classical RK4 trajectory of `n_steps` steps (n_steps + 1 states).
pub fn integrate(x0: &DVector<f64>, dt: f64, n_steps: usize, forcing: f64) -> Result<Trajectory> {
    integrate_from(x0, dt, n_steps, forcing, 0.0)
}

pub fn integrate_from(
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    forcing: f64,
    t0: f64,
) -> Result<Trajectory> {
    if x0.len() < 4 {
        return Err(Error::dimension("integrate", "dimension >= 4", x0.len().to_string()));
    }
    if !(dt > 0.0) {
        return Err(Error::Config(format!("integrate: dt must be positive, got {dt}")));
    }
    let d = x0.len();
    let mut states = DMatrix::zeros(d, n_steps + 1);
    states.column_mut(0).copy_from(x0);
    let mut x = x0.clone();
    for step in 1..=n_steps {
        x = rk4_step(&x, dt, forcing);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged {
                cycle: step,
                nrmse: f64::INFINITY,
            });
        }
        states.column_mut(step).copy_from(&x);
    }
    Ok(Trajectory { states, dt, t0 })
}

/// Jacobian of the tendency at `x`, as a dense D×D matrix.
fn tendency_jacobian(x: &[f64]) -> DMatrix<f64> {
    let d = x.len();
    let mut j = DMatrix::zeros(d, d);
    for i in 0..d {
        let im1 = (i + d - 1) % d;
        let im2 = (i + d - 2) % d;
        let ip1 = (i + 1) % d;
        j[(i, im1)] += x[ip1] - x[im2];
        j[(i, ip1)] += x[im1];
        j[(i, im2)] -= x[im1];
        j[(i, i)] -= 1.0;
    }
    j
}

/// Jacobian of one RK4 step at `x`, assembled densely. D stays small
/// (≤ 40-ish), so the assembled form is cheap and gives the transpose
/// for free.
pub struct L96StepPropagator {
    m: DMatrix<f64>,
}

impl L96StepPropagator {
    pub fn new(x: &DVector<f64>, dt: f64, forcing: f64) -> Result<Self> {
        if x.len() < 4 {
            return Err(Error::dimension(
                "l96_linear_propagator",
                "dimension >= 4",
                x.len().to_string(),
            ));
        }
        let d = x.len();
        let j1 = tendency_jacobian(x.as_slice());
        let mut k1 = DVector::zeros(d);
        let mut k2 = DVector::zeros(d);
        let mut k3 = DVector::zeros(d);
        tendency_into(x.as_slice(), forcing, k1.as_mut_slice());
        let x2 = x + &k1 * (dt / 2.0);
        tendency_into(x2.as_slice(), forcing, k2.as_mut_slice());
        let x3 = x + &k2 * (dt / 2.0);
        tendency_into(x3.as_slice(), forcing, k3.as_mut_slice());
        let x4 = x + &k3 * dt;
        let j2 = tendency_jacobian(x2.as_slice());
        let j3 = tendency_jacobian(x3.as_slice());
        let j4 = tendency_jacobian(x4.as_slice());
        let eye = DMatrix::identity(d, d);
        // Stage sensitivities: dk1 = J1, dk2 = J2 (I + dt/2 dk1), ...
        let dk1 = j1;
        let dk2 = &j2 * (&eye + &dk1 * (dt / 2.0));
        let dk3 = &j3 * (&eye + &dk2 * (dt / 2.0));
        let dk4 = &j4 * (&eye + &dk3 * dt);
        let m = &eye + (dk1 + dk2 * 2.0 + dk3 * 2.0 + dk4) * (dt / 6.0);
        Ok(L96StepPropagator { m })
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

impl Propagator for L96StepPropagator {
    fn dim(&self) -> usize {
        self.m.nrows()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.m * v
    }

    fn apply_transpose(&self, w: &DVector<f64>) -> DVector<f64> {
        self.m.tr_mul(w)
    }
}

/// One-step RK4 tangent-linear propagator at state `x`.
pub fn l96_linear_propagator(x: &DVector<f64>, dt: f64, forcing: f64) -> Result<L96StepPropagator> {
    L96StepPropagator::new(x, dt, forcing)
}

/// Sample noisy point observations every `tau_obs` MTU from a truth run.
pub fn sample_observations(
    truth: &Trajectory,
    obs_indices: &[usize],
    tau_obs: f64,
    sigma_noise: f64,
    sigma_obs: f64,
    master_seed: u64,
) -> Result<ObservationSequence> {
    let stride = step_multiple(tau_obs, truth.dt, "tau_obs")?;
    let d = truth.dim();
    let mut seen = vec![false; d];
    for &i in obs_indices {
        if i >= d {
            return Err(Error::dimension(
                "sample_observations",
                format!("node index < {d}"),
                i.to_string(),
            ));
        }
        if seen[i] {
            return Err(Error::Config(format!("duplicate observation node {i}")));
        }
        seen[i] = true;
    }
    if sigma_noise < 0.0 {
        return Err(Error::Config(format!("sigma_noise must be >= 0, got {sigma_noise}")));
    }
    let mut rng = stream_rng(master_seed, stream::OBS_NOISE);
    let n_times = (truth.len() - 1) / stride + 1;
    let mut times = Vec::with_capacity(n_times);
    let mut values = DMatrix::zeros(obs_indices.len(), n_times);
    for (col, step) in (0..truth.len()).step_by(stride).enumerate() {
        times.push(truth.time(step));
        for (row, &node) in obs_indices.iter().enumerate() {
            let noise: f64 = rng.sample(StandardNormal);
            values[(row, col)] = truth.states[(node, step)] + sigma_noise * noise;
        }
    }
    Ok(ObservationSequence {
        times,
        obs_indices: obs_indices.to_vec(),
        values,
        noise_std: sigma_noise,
        assumed_std: sigma_obs,
    })
}

/// Integer step count in `interval`, or an alignment error.
pub fn step_multiple(interval: f64, dt: f64, what: &str) -> Result<usize> {
    let ratio = interval / dt;
    let rounded = ratio.round();
    if rounded < 1.0 || (ratio - rounded).abs() > 1e-6 * ratio.abs().max(1.0) {
        return Err(Error::Alignment(format!(
            "{what} = {interval} is not a positive integer multiple of dt = {dt}"
        )));
    }
    Ok(rounded as usize)
}

#[derive(Debug, Clone)]
pub struct DatasetConfig {
    pub dim: usize,
    pub forcing: f64,
    pub dt: f64,
    pub train_steps: usize,
    pub test_steps: usize,
    pub spinup_steps: usize,
    pub master_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            dim: 6,
            forcing: DEFAULT_FORCING,
            dt: DEFAULT_DT,
            train_steps: 100_000,
            test_steps: 100_000,
            spinup_steps: 1_000,
            master_seed: 0,
        }
    }
}

pub struct Dataset {
    pub train: Trajectory,
    pub test: Trajectory,
}

/// Spun-up nature run split into disjoint train/test segments.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.train_steps == 0 || cfg.test_steps == 0 {
        return Err(Error::Config("dataset segments must be non-empty".into()));
    }
    let mut rng = stream_rng(cfg.master_seed, stream::INIT);
    let x0 = DVector::from_fn(cfg.dim, |_, _| {
        cfg.forcing + 0.1 * rng.sample::<f64, _>(StandardNormal)
    });
    let total = cfg.spinup_steps + cfg.train_steps + cfg.test_steps;
    let run = integrate(&x0, cfg.dt, total, cfg.forcing)?;
    let d = cfg.dim;
    let train_states = run
        .states
        .columns(cfg.spinup_steps, cfg.train_steps)
        .clone_owned();
    let test_states = run
        .states
        .columns(cfg.spinup_steps + cfg.train_steps, cfg.test_steps)
        .clone_owned();
    debug_assert_eq!(train_states.nrows(), d);
    let train = Trajectory {
        states: train_states,
        dt: cfg.dt,
        t0: 0.0,
    };
    let test = Trajectory {
        states: test_states,
        dt: cfg.dt,
        t0: cfg.train_steps as f64 * cfg.dt,
    };
    Ok(Dataset { train, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    use crate::linalg::standard_normal_vector;

    #[test]
    fn uniform_equilibrium_has_zero_tendency() {
        let x = DVector::from_element(6, 8.0);
        let out = l96_tendency(&x, 8.0).unwrap();
        assert_eq!(out, DVector::zeros(6));
    }

    #[test]
    fn zero_state_tendency_is_forcing() {
        let out = l96_tendency(&DVector::zeros(6), 8.0).unwrap();
        assert_eq!(out, DVector::from_element(6, 8.0));
    }

    #[test]
    fn tendency_matches_explicit_stencil_loop() {
        let mut rng = stream_rng(5, stream::TEST);
        let x = standard_normal_vector(&mut rng, 6);
        let out = l96_tendency(&x, 8.0).unwrap();
        for i in 0..6i64 {
            let at = |k: i64| x[(k.rem_euclid(6)) as usize];
            let expect = at(i - 1) * (at(i + 1) - at(i - 2)) - at(i) + 8.0;
            assert_relative_eq!(out[i as usize], expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn small_dimension_rejected() {
        assert!(l96_tendency(&DVector::zeros(3), 8.0).is_err());
    }

    #[test]
    fn zero_steps_returns_initial_state() {
        let x0 = DVector::from_element(6, 8.0);
        let traj = integrate(&x0, 0.01, 0, 8.0).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.state(0), x0);
    }

    #[test]
    fn equilibrium_is_preserved() {
        let x0 = DVector::from_element(6, 8.0);
        let traj = integrate(&x0, 0.01, 100, 8.0).unwrap();
        for j in 0..traj.len() {
            assert_relative_eq!((traj.state(j) - &x0).norm(), 0.0, epsilon = 1e-10);
        }
    }

    // Fourth-order global error: integrating a fixed interval at dt and
    // dt/2 then comparing each against dt/4 gives an error ratio near 16.
    #[test]
    fn richardson_order_check() {
        let mut rng = stream_rng(6, stream::TEST);
        let x0 = integrate(&standard_normal_vector(&mut rng, 6), 0.01, 500, 8.0)
            .unwrap()
            .state(500);
        let t_total = 0.4;
        let run = |dt: f64| {
            let n = (t_total / dt).round() as usize;
            integrate(&x0, dt, n, 8.0).unwrap().state(n)
        };
        let coarse = run(0.04);
        let mid = run(0.02);
        let fine = run(0.01);
        let e_coarse = (&coarse - &fine).norm();
        let e_mid = (&mid - &fine).norm();
        // e(dt) ≈ C dt^4 ⇒ (coarse − fine)/(mid − fine) ≈ (16 − 1·16/16)… the
        // leading-order ratio is (2^4·e_mid·(16/15))/(e_mid·(16/15)/…) ≈ 16·(15/16)… Just
        // bound loosely around 16.
        let ratio = e_coarse / e_mid;
        assert!(
            (11.0..22.0).contains(&ratio),
            "fourth-order ratio expected near 16, got {ratio}"
        );
    }

    #[test]
    fn attractor_stays_bounded() {
        let mut rng = stream_rng(7, stream::TEST);
        let x0 = standard_normal_vector(&mut rng, 6);
        let traj = integrate(&x0, 0.01, 10_000, 8.0).unwrap();
        assert!(traj.states.iter().all(|v| v.abs() < 20.0));
    }

    #[test]
    fn propagator_satisfies_adjoint_identity() {
        let mut rng = stream_rng(8, stream::TEST);
        for _ in 0..20 {
            let x = standard_normal_vector(&mut rng, 6) * 3.0;
            let prop = l96_linear_propagator(&x, 0.01, 8.0).unwrap();
            let v = standard_normal_vector(&mut rng, 6);
            let w = standard_normal_vector(&mut rng, 6);
            let lhs = prop.apply(&v).dot(&w);
            let rhs = v.dot(&prop.apply_transpose(&w));
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn propagator_matches_finite_differences() {
        let mut rng = stream_rng(9, stream::TEST);
        for _ in 0..100 {
            let x = integrate(&(standard_normal_vector(&mut rng, 6) * 2.0), 0.01, 200, 8.0)
                .unwrap()
                .state(200);
            let prop = l96_linear_propagator(&x, 0.01, 8.0).unwrap();
            let mut v = standard_normal_vector(&mut rng, 6);
            v /= v.norm();
            let eps = 1e-6;
            let plus = rk4_step(&(&x + &v * eps), 0.01, 8.0);
            let base = rk4_step(&x, 0.01, 8.0);
            let fd = (plus - base) / eps;
            let mv = prop.apply(&v);
            let rel = (&fd - &mv).norm() / mv.norm();
            assert!(rel < 1e-5, "finite-difference mismatch: {rel}");
        }
    }

    // At the uniform equilibrium the dynamics commute with the cyclic
    // shift, so the assembled propagator must too.
    #[test]
    fn propagator_commutes_with_rotation_at_equilibrium() {
        let x = DVector::from_element(6, 8.0);
        let prop = l96_linear_propagator(&x, 0.01, 8.0).unwrap();
        let m = prop.as_matrix();
        let mut p = DMatrix::zeros(6, 6);
        for i in 0..6 {
            p[(i, (i + 1) % 6)] = 1.0;
        }
        let comm = (&p * m - m * &p).norm();
        assert_relative_eq!(comm, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn noiseless_observations_equal_truth() {
        let cfg = DatasetConfig {
            train_steps: 200,
            test_steps: 50,
            spinup_steps: 100,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let obs = sample_observations(&data.train, &[0, 2, 5], 0.05, 0.0, 0.5, 1).unwrap();
        assert_eq!(obs.n_times(), 40);
        for (col, &t) in obs.times.iter().enumerate() {
            let step = ((t - data.train.t0) / data.train.dt).round() as usize;
            for (row, &node) in obs.obs_indices.iter().enumerate() {
                assert_eq!(obs.values[(row, col)], data.train.states[(node, step)]);
            }
        }
    }

    #[test]
    fn dense_observation_of_every_step() {
        let cfg = DatasetConfig {
            train_steps: 50,
            test_steps: 10,
            spinup_steps: 10,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let obs = sample_observations(&data.train, &[0, 1, 2, 3, 4, 5], 0.01, 0.0, 0.5, 1).unwrap();
        assert_eq!(obs.n_times(), data.train.len());
        assert_eq!(obs.n_obs(), 6);
    }

    #[test]
    fn misaligned_observation_interval_rejected() {
        let cfg = DatasetConfig {
            train_steps: 50,
            test_steps: 10,
            spinup_steps: 10,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        assert!(matches!(
            sample_observations(&data.train, &[0], 0.015, 0.5, 0.5, 1),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn observation_noise_variance_matches_sigma() {
        let cfg = DatasetConfig {
            train_steps: 10_000,
            test_steps: 10,
            spinup_steps: 100,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let obs = sample_observations(&data.train, &[1], 0.01, 0.5, 0.5, 42).unwrap();
        let n = obs.n_times() as f64;
        let mut sq = 0.0;
        for (col, &t) in obs.times.iter().enumerate() {
            let step = ((t - data.train.t0) / data.train.dt).round() as usize;
            let diff = obs.values[(0, col)] - data.train.states[(1, step)];
            sq += diff * diff;
        }
        let var = sq / n;
        assert!(
            (var - 0.25).abs() < 0.05 * 0.25,
            "sample noise variance {var} outside 5% of 0.25"
        );
    }

    #[test]
    fn train_and_test_are_disjoint_and_reproducible() {
        let cfg = DatasetConfig {
            train_steps: 300,
            test_steps: 200,
            spinup_steps: 50,
            ..DatasetConfig::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a.train.states, b.train.states);
        assert_eq!(a.test.states, b.test.states);
        // Contiguous split: the first test state is one step past the last
        // train state, never shared.
        assert_relative_eq!(
            a.test.t0,
            a.train.t0 + a.train.len() as f64 * a.train.dt,
            epsilon = 1e-12
        );
    }

    proptest! {
        // Cyclic symmetry: rotating the state rotates the tendency.
        #[test]
        fn tendency_commutes_with_rotation(values in proptest::collection::vec(-10.0..10.0f64, 5..12), shift in 0usize..12) {
            let d = values.len();
            let shift = shift % d;
            let x = DVector::from_vec(values);
            let rotated = DVector::from_fn(d, |i, _| x[(i + shift) % d]);
            let lhs = l96_tendency(&rotated, 8.0).unwrap();
            let rhs_full = l96_tendency(&x, 8.0).unwrap();
            let rhs = DVector::from_fn(d, |i, _| rhs_full[(i + shift) % d]);
            prop_assert!((lhs - rhs).norm() < 1e-9);
        }
    }
}
