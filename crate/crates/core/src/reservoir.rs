//! The surrogate forecast model: fixed sparse recurrence plus input map,
//! trained linear readout, closed-loop forecasting, and the tangent-linear
//! and adjoint operators of the closed-loop map.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::l96::Trajectory;
use crate::linalg::{gemm_abt, spectral_radius, Csr, Propagator};
use crate::rng::{stream, stream_rng};

/// The four macro-scale scalars trained by global optimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MacroParams {
    /// Spectral-radius scale ρ applied to the unit-radius recurrence.
    pub rho: f64,
    /// Input scale σ.
    pub sigma_in: f64,
    /// Leak rate l.
    pub leak: f64,
    /// Ridge regularizer β.
    pub tikhonov: f64,
}

impl MacroParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.rho.is_finite()
            && self.sigma_in.is_finite()
            && self.leak.is_finite()
            && self.tikhonov > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid macro parameters: {self:?}")))
        }
    }
}

/// Fixed random recurrence + input map with a trainable linear readout.
///
/// `w_res` is kept at unit spectral radius; ρ scales it at application
/// time so macro parameters can change without rebuilding the wiring.
#[derive(Debug, Clone)]
pub struct ReservoirModel {
    w_res: Csr,
    w_res_t: Csr,
    w_in: DMatrix<f64>,
    w_out: Option<DMatrix<f64>>,
    macro_params: MacroParams,
}

const SPECTRAL_TOL: f64 = 1e-8;
const SPECTRAL_MAX_ITER: usize = 10_000;
const INIT_ATTEMPTS: u64 = 5;

/// Fresh untrained reservoir. The sparse recurrence draws uniform [-1, 1]
/// entries at the given density and is rescaled to unit spectral radius;
/// if power iteration stalls, the wiring is resampled at the next seed
/// offset (distinct seeds therefore do not always consume one stream).
pub fn init_reservoir(
    n: usize,
    d_in: usize,
    d_out: usize,
    density: f64,
    macro_params: MacroParams,
    master_seed: u64,
) -> Result<ReservoirModel> {
    if n == 0 || d_in == 0 || d_out == 0 {
        return Err(Error::Config(format!(
            "reservoir dims must be positive, got N={n}, D_in={d_in}, D_out={d_out}"
        )));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("density must lie in (0, 1], got {density}")));
    }
    macro_params.validate()?;
    let mut last_err = None;
    for attempt in 0..INIT_ATTEMPTS {
        let mut rng = stream_rng(master_seed, stream::W_RES + attempt);
        let mut triplets = Vec::with_capacity((n * n) as usize / 64);
        for r in 0..n as u32 {
            for c in 0..n as u32 {
                if rng.gen_bool(density) {
                    triplets.push((r, c, rng.gen_range(-1.0..1.0)));
                }
            }
        }
        let mut w_res = Csr::from_triplets(n, n, &triplets)?;
        match spectral_radius(&w_res, &mut rng, SPECTRAL_TOL, SPECTRAL_MAX_ITER) {
            Ok(radius) if radius > 0.0 => {
                w_res.scale(1.0 / radius);
                let mut in_rng = stream_rng(master_seed, stream::W_IN);
                let w_in = DMatrix::from_fn(n, d_in, |_, _| in_rng.gen_range(-1.0..1.0));
                let w_res_t = w_res.transpose();
                return Ok(ReservoirModel {
                    w_res,
                    w_res_t,
                    w_in,
                    w_out: None,
                    macro_params,
                });
            }
            Ok(_) => {
                last_err = Some(Error::numerical("init_reservoir", "zero spectral radius"));
            }
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::numerical("init_reservoir", "unreachable")))
}

impl ReservoirModel {
    pub fn hidden_dim(&self) -> usize {
        self.w_in.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_in.ncols()
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.w_out.as_ref().map(|w| w.nrows())
    }

    pub fn macro_params(&self) -> &MacroParams {
        &self.macro_params
    }

    pub fn is_trained(&self) -> bool {
        self.w_out.is_some()
    }

    pub fn w_res(&self) -> &Csr {
        &self.w_res
    }

    pub fn w_in(&self) -> &DMatrix<f64> {
        &self.w_in
    }

    pub fn w_out(&self) -> Result<&DMatrix<f64>> {
        self.w_out.as_ref().ok_or(Error::NotTrained)
    }

    /// Same wiring under different macro scalars; readout is invalidated.
    pub fn with_macro(mut self, macro_params: MacroParams) -> Result<Self> {
        macro_params.validate()?;
        self.macro_params = macro_params;
        self.w_out = None;
        Ok(self)
    }

    /// Reassemble a model from serialized pieces. The recurrence is taken
    /// as-is (already rescaled to unit spectral radius); only shapes are
    /// checked here.
    pub fn from_parts(
        w_res: Csr,
        w_in: DMatrix<f64>,
        w_out: Option<DMatrix<f64>>,
        macro_params: MacroParams,
    ) -> Result<Self> {
        macro_params.validate()?;
        let n = w_in.nrows();
        if w_res.nrows() != n || w_res.ncols() != n {
            return Err(Error::dimension(
                "ReservoirModel::from_parts",
                format!("{n}x{n} recurrence"),
                format!("{}x{}", w_res.nrows(), w_res.ncols()),
            ));
        }
        if let Some(w) = &w_out {
            if w.ncols() != n {
                return Err(Error::dimension(
                    "ReservoirModel::from_parts",
                    format!("D_out x {n} readout"),
                    format!("{}x{}", w.nrows(), w.ncols()),
                ));
            }
        }
        let w_res_t = w_res.transpose();
        Ok(ReservoirModel {
            w_res,
            w_res_t,
            w_in,
            w_out,
            macro_params,
        })
    }

    /// Install an externally trained readout (deserialization, tests).
    pub fn set_w_out(&mut self, w_out: DMatrix<f64>) -> Result<()> {
        if w_out.ncols() != self.hidden_dim() {
            return Err(Error::dimension(
                "set_w_out",
                format!("D_out x {}", self.hidden_dim()),
                format!("{}x{}", w_out.nrows(), w_out.ncols()),
            ));
        }
        self.w_out = Some(w_out);
        Ok(())
    }

    /// s' = l·tanh(ρ W_res s + σ W_in x) + (1-l)·s.
    pub fn step_hidden(&self, s: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let mut out = s.clone();
        let mut scratch = DVector::zeros(self.hidden_dim());
        self.step_hidden_buf(&mut out, x, &mut scratch);
        out
    }

    /// In-place step; `scratch` must have length N. Allocation-free.
    pub fn step_hidden_buf(&self, s: &mut DVector<f64>, x: &DVector<f64>, scratch: &mut DVector<f64>) {
        debug_assert_eq!(x.len(), self.input_dim());
        debug_assert_eq!(scratch.len(), self.hidden_dim());
        let p = &self.macro_params;
        self.w_res.mul_vec(s.as_slice(), scratch.as_mut_slice());
        // scratch = σ W_in x + ρ scratch
        scratch.gemv(p.sigma_in, &self.w_in, x, p.rho);
        let l = p.leak;
        for (si, pre) in s.iter_mut().zip(scratch.iter()) {
            *si = l * pre.tanh() + (1.0 - l) * *si;
        }
    }

    /// Linear readout W_out s.
    pub fn readout(&self, s: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.w_out()? * s)
    }

    /// Teacher-forced recurrence. Column j of the result is s(t_j): the
    /// hidden state *before* consuming driving column j, with s(t_0) = s0.
    /// Output length equals driving length; the final driving column is
    /// only consumed by a subsequent forecast or `drive` call.
    pub fn synchronize(&self, driving: &DMatrix<f64>, s0: &DVector<f64>) -> Result<DMatrix<f64>> {
        self.check_driving(driving, s0)?;
        let n = self.hidden_dim();
        let t = driving.ncols();
        let mut hidden = DMatrix::zeros(n, t);
        let mut s = s0.clone();
        let mut scratch = DVector::zeros(n);
        for j in 0..t {
            hidden.column_mut(j).copy_from(&s);
            self.step_hidden_buf(&mut s, &driving.column(j).clone_owned(), &mut scratch);
        }
        Ok(hidden)
    }

    /// Fold the whole driving window into one hidden state: the state
    /// *after* consuming every column. Used to spin members up to the
    /// first analysis time without storing the trajectory.
    pub fn drive(&self, driving: &DMatrix<f64>, s0: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_driving(driving, s0)?;
        let mut s = s0.clone();
        let mut scratch = DVector::zeros(self.hidden_dim());
        let mut x = DVector::zeros(self.input_dim());
        for j in 0..driving.ncols() {
            x.copy_from(&driving.column(j));
            self.step_hidden_buf(&mut s, &x, &mut scratch);
        }
        Ok(s)
    }

    /// Hidden states at selected (strictly increasing) driving indices,
    /// synchronize-convention: snapshot[i] = s(t_{indices[i]}).
    pub fn snapshot_states(
        &self,
        driving: &DMatrix<f64>,
        s0: &DVector<f64>,
        indices: &[usize],
    ) -> Result<Vec<DVector<f64>>> {
        self.check_driving(driving, s0)?;
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("snapshot indices must strictly increase".into()));
        }
        if let Some(&last) = indices.last() {
            if last >= driving.ncols() {
                return Err(Error::dimension(
                    "snapshot_states",
                    format!("index < {}", driving.ncols()),
                    last.to_string(),
                ));
            }
        }
        let mut out = Vec::with_capacity(indices.len());
        let mut s = s0.clone();
        let mut scratch = DVector::zeros(self.hidden_dim());
        let mut x = DVector::zeros(self.input_dim());
        let mut want = indices.iter().peekable();
        for j in 0..driving.ncols() {
            if let Some(&&idx) = want.peek() {
                if idx == j {
                    out.push(s.clone());
                    want.next();
                }
            } else {
                break;
            }
            x.copy_from(&driving.column(j));
            self.step_hidden_buf(&mut s, &x, &mut scratch);
        }
        Ok(out)
    }

    fn check_driving(&self, driving: &DMatrix<f64>, s0: &DVector<f64>) -> Result<()> {
        if driving.nrows() != self.input_dim() {
            return Err(Error::dimension(
                "synchronize",
                format!("driving rows = {}", self.input_dim()),
                driving.nrows().to_string(),
            ));
        }
        if s0.len() != self.hidden_dim() {
            return Err(Error::dimension(
                "synchronize",
                format!("hidden dim {}", self.hidden_dim()),
                s0.len().to_string(),
            ));
        }
        Ok(())
    }

    /// W v with W = ρ W_res + σ W_in W_out (the closed-loop matrix,
    /// applied factor by factor, never materialized).
    pub fn apply_w(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let w_out = self.w_out()?;
        let p = &self.macro_params;
        let mut out = DVector::zeros(self.hidden_dim());
        self.w_res.mul_vec(v.as_slice(), out.as_mut_slice());
        out *= p.rho;
        out.gemv(p.sigma_in, &self.w_in, &(w_out * v), 1.0);
        Ok(out)
    }

    /// Wᵀ v.
    pub fn apply_w_transpose(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let w_out = self.w_out()?;
        let p = &self.macro_params;
        let mut out = DVector::zeros(self.hidden_dim());
        self.w_res_t.mul_vec(v.as_slice(), out.as_mut_slice());
        out *= p.rho;
        out.gemv_tr(p.sigma_in, w_out, &self.w_in.tr_mul(v), 1.0);
        Ok(out)
    }

    /// One closed-loop step s ← l·tanh(W s) + (1-l)·s, i.e. the forecast
    /// recursion with the model's own readout as input.
    pub fn closed_loop_step(&self, s: &mut DVector<f64>, scratch: &mut ClosedLoopScratch) -> Result<()> {
        let w_out = self.w_out()?;
        self.require_square()?;
        scratch.x.gemv(1.0, w_out, s, 0.0);
        self.step_hidden_buf(s, &scratch.x.clone(), &mut scratch.pre);
        Ok(())
    }

    fn require_square(&self) -> Result<()> {
        let d_out = self.w_out()?.nrows();
        if d_out != self.input_dim() {
            return Err(Error::Alignment(format!(
                "closed-loop operation needs D_in == D_out, got {} vs {}",
                self.input_dim(),
                d_out
            )));
        }
        Ok(())
    }

    /// Inductive closed-loop forecast: first input is the data state x0,
    /// every later input is the model's own prediction. Returns n_steps
    /// readout states (times t0+dt .. t0+n·dt) and the matching hidden
    /// trajectory.
    pub fn free_forecast(
        &self,
        s0: &DVector<f64>,
        x0: &DVector<f64>,
        n_steps: usize,
        dt: f64,
        t0: f64,
    ) -> Result<Forecast> {
        let w_out = self.w_out()?;
        self.require_square()?;
        if n_steps == 0 {
            return Err(Error::Config("free_forecast needs n_steps >= 1".into()));
        }
        let n = self.hidden_dim();
        let d = w_out.nrows();
        let mut states = DMatrix::zeros(d, n_steps);
        let mut hidden = DMatrix::zeros(n, n_steps);
        let mut s = s0.clone();
        let mut x = x0.clone();
        let mut scratch = DVector::zeros(n);
        for step in 0..n_steps {
            self.step_hidden_buf(&mut s, &x, &mut scratch);
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::Diverged {
                    cycle: step + 1,
                    nrmse: f64::INFINITY,
                });
            }
            x.gemv(1.0, w_out, &s, 0.0);
            states.column_mut(step).copy_from(&x);
            hidden.column_mut(step).copy_from(&s);
        }
        Ok(Forecast {
            states: Trajectory {
                states,
                dt,
                t0: t0 + dt,
            },
            hidden,
        })
    }

    /// Tangent-linear operator of the closed-loop map at hidden state s:
    /// M = l·diag(1 - tanh²(W s))·W + (1-l)·I, with transpose application.
    pub fn rnn_propagator(&self, s: &DVector<f64>) -> Result<RnnPropagator<'_>> {
        self.require_square()?;
        let a = self.apply_w(s)?;
        let gain = a.map(|v| {
            let t = v.tanh();
            1.0 - t * t
        });
        Ok(RnnPropagator { model: self, gain })
    }
}

pub struct ClosedLoopScratch {
    x: DVector<f64>,
    pre: DVector<f64>,
}

impl ClosedLoopScratch {
    pub fn for_model(model: &ReservoirModel) -> Result<Self> {
        let d_out = model.w_out()?.nrows();
        Ok(ClosedLoopScratch {
            x: DVector::zeros(d_out),
            pre: DVector::zeros(model.hidden_dim()),
        })
    }
}

pub struct Forecast {
    pub states: Trajectory,
    pub hidden: DMatrix<f64>,
}

/// Matrix-free closed-loop TLM at a fixed linearization state.
pub struct RnnPropagator<'a> {
    model: &'a ReservoirModel,
    /// 1 - tanh²(W s) at the linearization point.
    gain: DVector<f64>,
}

impl Propagator for RnnPropagator<'_> {
    fn dim(&self) -> usize {
        self.model.hidden_dim()
    }

    fn apply(&self, v: &DVector<f64>) -> DVector<f64> {
        let p = self.model.macro_params();
        let u = self.model.apply_w(v).expect("propagator exists only for trained models");
        let l = p.leak;
        DVector::from_fn(v.len(), |i, _| l * self.gain[i] * u[i] + (1.0 - l) * v[i])
    }

    fn apply_transpose(&self, w: &DVector<f64>) -> DVector<f64> {
        let p = self.model.macro_params();
        let l = p.leak;
        let t = DVector::from_fn(w.len(), |i, _| l * self.gain[i] * w[i]);
        let mut out = self
            .model
            .apply_w_transpose(&t)
            .expect("propagator exists only for trained models");
        out.axpy(1.0 - l, w, 1.0);
        out
    }
}

/// Ridge readout: W_out = X Sᵀ (S Sᵀ + βI)⁻¹ by symmetric factorization.
/// Both matrices must already have any washout prefix removed.
pub fn train_readout(
    s_data: &DMatrix<f64>,
    x_data: &DMatrix<f64>,
    tikhonov: f64,
) -> Result<DMatrix<f64>> {
    if s_data.ncols() != x_data.ncols() {
        return Err(Error::Alignment(format!(
            "train_readout: S has {} columns, X has {}",
            s_data.ncols(),
            x_data.ncols()
        )));
    }
    let n = s_data.nrows();
    let mut gram = DMatrix::zeros(n, n);
    gemm_abt(&mut gram, s_data, s_data);
    let mut cross = DMatrix::zeros(x_data.nrows(), n);
    gemm_abt(&mut cross, x_data, s_data);
    solve_readout(gram, &cross, tikhonov)
}

fn solve_readout(mut gram: DMatrix<f64>, cross: &DMatrix<f64>, tikhonov: f64) -> Result<DMatrix<f64>> {
    if !(tikhonov > 0.0) {
        return Err(Error::Config(format!("tikhonov β must be positive, got {tikhonov}")));
    }
    let n = gram.nrows();
    for i in 0..n {
        gram[(i, i)] += tikhonov;
    }
    let chol = gram.cholesky().ok_or_else(|| {
        Error::numerical(
            "train_readout",
            format!("Gram factorization failed at β = {tikhonov}; a larger β may be needed"),
        )
    })?;
    Ok(chol.solve(&cross.transpose()).transpose())
}

/// One-pass readout training: teacher-forces the recurrence over
/// `driving`, accumulating S Sᵀ and X Sᵀ in column blocks so the hidden
/// trajectory is never materialized. Pairs are (s(t_j), x(t_j)) for
/// j ≥ washout. Installs W_out on the model.
pub fn train_readout_streaming(
    model: &mut ReservoirModel,
    driving: &DMatrix<f64>,
    targets: &DMatrix<f64>,
    washout: usize,
) -> Result<()> {
    const BLOCK: usize = 512;
    if driving.ncols() != targets.ncols() {
        return Err(Error::Alignment(format!(
            "train_readout_streaming: driving has {} columns, targets {}",
            driving.ncols(),
            targets.ncols()
        )));
    }
    let t = driving.ncols();
    if washout + 2 > t {
        return Err(Error::Config(format!(
            "washout {washout} leaves no training pairs out of {t} columns"
        )));
    }
    let n = model.hidden_dim();
    let d_out = targets.nrows();
    let mut gram = DMatrix::zeros(n, n);
    let mut cross = DMatrix::zeros(d_out, n);
    let mut s_block = DMatrix::zeros(n, BLOCK);
    let mut x_block = DMatrix::zeros(d_out, BLOCK);
    let mut fill = 0usize;
    let mut s = DVector::zeros(n);
    let mut scratch = DVector::zeros(n);
    let mut x = DVector::zeros(model.input_dim());
    for j in 0..t {
        if j >= washout {
            s_block.column_mut(fill).copy_from(&s);
            x_block.column_mut(fill).copy_from(&targets.column(j));
            fill += 1;
            if fill == BLOCK {
                gemm_abt(&mut gram, &s_block, &s_block);
                gemm_abt(&mut cross, &x_block, &s_block);
                fill = 0;
            }
        }
        x.copy_from(&driving.column(j));
        model.step_hidden_buf(&mut s, &x, &mut scratch);
        if !s.iter().all(|v| v.is_finite()) {
            return Err(Error::Diverged {
                cycle: j + 1,
                nrmse: f64::INFINITY,
            });
        }
    }
    if fill > 0 {
        let s_part = s_block.columns(0, fill).clone_owned();
        let x_part = x_block.columns(0, fill).clone_owned();
        gemm_abt(&mut gram, &s_part, &s_part);
        gemm_abt(&mut cross, &x_part, &s_part);
    }
    let w_out = solve_readout(gram, &cross, model.macro_params().tikhonov)?;
    model.w_out = Some(w_out);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    use crate::l96::{generate_dataset, DatasetConfig};
    use crate::linalg::standard_normal_vector;
    use crate::metrics::climatological_std;

    fn test_macro() -> MacroParams {
        MacroParams {
            rho: 0.4,
            sigma_in: 0.2,
            leak: 0.7,
            tikhonov: 1e-6,
        }
    }

    fn small_model(seed: u64) -> ReservoirModel {
        init_reservoir(64, 6, 6, 0.05, test_macro(), seed).unwrap()
    }

    fn random_trained_model(seed: u64) -> ReservoirModel {
        let mut model = small_model(seed);
        let mut rng = stream_rng(seed, stream::TEST);
        let w_out = DMatrix::from_fn(6, 64, |_, _| rng.gen_range(-0.5..0.5));
        model.set_w_out(w_out).unwrap();
        model
    }

    #[test]
    fn nonzero_count_within_binomial_spread() {
        let model = init_reservoir(1600, 6, 6, 0.01, test_macro(), 0).unwrap();
        let nnz = model.w_res().nnz() as f64;
        let expected: f64 = 1600.0 * 1600.0 * 0.01;
        let std = (expected * 0.99).sqrt();
        assert!(
            (nnz - expected).abs() < 5.0 * std,
            "nnz {nnz} too far from {expected}"
        );
    }

    #[test]
    fn unit_spectral_radius_after_construction() {
        let model = small_model(3);
        let mut rng = stream_rng(99, stream::TEST);
        let radius = spectral_radius(model.w_res(), &mut rng, 1e-10, 50_000).unwrap();
        assert!((radius - 1.0).abs() < 1e-6, "spectral radius {radius}");
    }

    #[test]
    fn equal_seeds_give_identical_wiring() {
        let a = small_model(17);
        let b = small_model(17);
        assert_eq!(a.w_in(), b.w_in());
        let ta: Vec<_> = a.w_res().iter_triplets().collect();
        let tb: Vec<_> = b.w_res().iter_triplets().collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn input_weights_bounded() {
        let model = small_model(5);
        assert!(model.w_in().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_leak_freezes_state() {
        let mut model = small_model(7);
        model.macro_params.leak = 0.0;
        let mut rng = stream_rng(1, stream::TEST);
        let s = standard_normal_vector(&mut rng, 64);
        let x = standard_normal_vector(&mut rng, 6);
        assert_eq!(model.step_hidden(&s, &x), s);
    }

    #[test]
    fn full_leak_lands_in_tanh_range() {
        let mut model = small_model(7);
        model.macro_params.leak = 1.0;
        let mut rng = stream_rng(2, stream::TEST);
        let s = standard_normal_vector(&mut rng, 64) * 10.0;
        let x = standard_normal_vector(&mut rng, 6) * 10.0;
        let out = model.step_hidden(&s, &x);
        assert!(out.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn step_matches_dense_reference() {
        let model = small_model(11);
        let mut rng = stream_rng(3, stream::TEST);
        let s = standard_normal_vector(&mut rng, 64);
        let x = standard_normal_vector(&mut rng, 6);
        let p = model.macro_params();
        let dense = model.w_res().to_dense();
        let pre = &dense * &s * p.rho + model.w_in() * &x * p.sigma_in;
        let expect = pre.map(f64::tanh) * p.leak + &s * (1.0 - p.leak);
        let got = model.step_hidden(&s, &x);
        assert_relative_eq!((got - expect).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn readout_linear_and_untrained_rejected() {
        let model = small_model(13);
        assert!(matches!(model.readout(&DVector::zeros(64)), Err(Error::NotTrained)));
        let model = random_trained_model(13);
        let mut rng = stream_rng(4, stream::TEST);
        let s1 = standard_normal_vector(&mut rng, 64);
        let s2 = standard_normal_vector(&mut rng, 64);
        assert_eq!(model.readout(&DVector::zeros(64)).unwrap(), DVector::zeros(6));
        let lhs = model.readout(&(&s1 * 2.0 + &s2 * -0.5)).unwrap();
        let rhs = model.readout(&s1).unwrap() * 2.0 + model.readout(&s2).unwrap() * -0.5;
        assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn synchronize_alignment_and_constant_driving() {
        let mut model = small_model(19);
        model.macro_params.leak = 0.0;
        let driving = DMatrix::from_element(6, 25, 0.3);
        let s0 = DVector::from_element(64, 0.5);
        let hidden = model.synchronize(&driving, &s0).unwrap();
        assert_eq!(hidden.ncols(), 25);
        for j in 0..25 {
            assert_eq!(hidden.column(j), s0.column(0));
        }
    }

    #[test]
    fn echo_state_contraction_for_trained_scales() {
        // Macro scales in the trained regime (small ρ, σ): distinct
        // initial hidden states forget each other under shared driving.
        let model = init_reservoir(
            128,
            6,
            6,
            0.05,
            MacroParams {
                rho: 0.1,
                sigma_in: 0.07,
                leak: 0.7,
                tikhonov: 1e-6,
            },
            23,
        )
        .unwrap();
        let cfg = DatasetConfig {
            train_steps: 1100,
            test_steps: 10,
            spinup_steps: 200,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let driving = data.train.states.columns(0, 1050).clone_owned();
        let mut rng = stream_rng(5, stream::TEST);
        let a0 = standard_normal_vector(&mut rng, 128);
        let b0 = standard_normal_vector(&mut rng, 128);
        let ha = model.synchronize(&driving, &a0).unwrap();
        let hb = model.synchronize(&driving, &b0).unwrap();
        let initial = (&a0 - &b0).norm();
        let after = (ha.column(1000) - hb.column(1000)).norm();
        assert!(
            after < 1e-6 * initial,
            "echo-state contraction failed: {after} vs initial {initial}"
        );
    }

    #[test]
    fn drive_equals_one_past_synchronize() {
        let model = small_model(29);
        let mut rng = stream_rng(6, stream::TEST);
        let driving = DMatrix::from_fn(6, 40, |_, _| rng.gen_range(-1.0..1.0));
        let s0 = standard_normal_vector(&mut rng, 64);
        let hidden = model.synchronize(&driving, &s0).unwrap();
        let driven = model.drive(&driving, &s0).unwrap();
        let last_sync = hidden.column(39).clone_owned();
        let expect = model.step_hidden(&last_sync, &driving.column(39).clone_owned());
        assert_relative_eq!((driven - expect).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn snapshots_match_full_synchronization() {
        let model = small_model(31);
        let mut rng = stream_rng(7, stream::TEST);
        let driving = DMatrix::from_fn(6, 60, |_, _| rng.gen_range(-1.0..1.0));
        let s0 = DVector::zeros(64);
        let hidden = model.synchronize(&driving, &s0).unwrap();
        let snaps = model.snapshot_states(&driving, &s0, &[0, 13, 59]).unwrap();
        for (snap, idx) in snaps.iter().zip([0usize, 13, 59]) {
            assert_relative_eq!((snap - hidden.column(idx).clone_owned()).norm(), 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn ridge_matches_pseudo_inverse_oracle() {
        let mut rng = stream_rng(8, stream::TEST);
        let s = DMatrix::from_fn(3, 5, |_, _| rng.gen_range(-1.0..1.0));
        let x = DMatrix::from_fn(2, 5, |_, _| rng.gen_range(-1.0..1.0));
        let beta = 1e-3;
        let w = train_readout(&s, &x, beta).unwrap();
        let gram = &s * s.transpose() + DMatrix::identity(3, 3) * beta;
        let oracle = &x * s.transpose() * gram.try_inverse().unwrap();
        assert!((w - oracle).norm() < 1e-10);
    }

    #[test]
    fn huge_ridge_shrinks_readout_to_zero() {
        let mut rng = stream_rng(9, stream::TEST);
        let s = DMatrix::from_fn(4, 30, |_, _| rng.gen_range(-1.0..1.0));
        let x = DMatrix::from_fn(2, 30, |_, _| rng.gen_range(-1.0..1.0));
        let gram_norm = (&s * s.transpose()).norm();
        let w = train_readout(&s, &x, 1e12 * gram_norm).unwrap();
        assert!(w.norm() < 1e-9, "‖W‖ = {} should collapse", w.norm());
    }

    #[test]
    fn ridge_solution_is_a_local_minimum() {
        let mut rng = stream_rng(10, stream::TEST);
        let s = DMatrix::from_fn(4, 12, |_, _| rng.gen_range(-1.0..1.0));
        let x = DMatrix::from_fn(3, 12, |_, _| rng.gen_range(-1.0..1.0));
        let beta = 0.01;
        let w = train_readout(&s, &x, beta).unwrap();
        let loss = |w: &DMatrix<f64>| (w * &s - &x).norm_squared() + beta * w.norm_squared();
        let base = loss(&w);
        for _ in 0..10 {
            let dir = DMatrix::from_fn(3, 4, |_, _| rng.gen_range(-1.0..1.0));
            let perturbed = &w + dir * (1e-3 / 1.0);
            assert!(loss(&perturbed) > base);
        }
    }

    #[test]
    fn streaming_training_matches_materialized() {
        let mut model = small_model(37);
        let mut rng = stream_rng(11, stream::TEST);
        let driving = DMatrix::from_fn(6, 300, |_, _| rng.gen_range(-1.0..1.0));
        let washout = 50;
        train_readout_streaming(&mut model, &driving, &driving, washout).unwrap();
        let streamed = model.w_out().unwrap().clone();
        let hidden = model.synchronize(&driving, &DVector::zeros(64)).unwrap();
        let s_data = hidden.columns(washout, 300 - washout).clone_owned();
        let x_data = driving.columns(washout, 300 - washout).clone_owned();
        let direct = train_readout(&s_data, &x_data, model.macro_params().tikhonov).unwrap();
        assert!((streamed - direct).norm() < 1e-9);
    }

    #[test]
    fn trained_readout_beats_climatology_on_held_out_data() {
        let cfg = DatasetConfig {
            train_steps: 20_000,
            test_steps: 2_000,
            spinup_steps: 500,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let mut model = init_reservoir(
            400,
            6,
            6,
            0.02,
            MacroParams {
                rho: 0.1,
                sigma_in: 0.07,
                leak: 0.7,
                tikhonov: 1e-8,
            },
            41,
        )
        .unwrap();
        train_readout_streaming(&mut model, &data.train.states, &data.train.states, 1000).unwrap();
        let hidden = model.synchronize(&data.test.states, &DVector::zeros(400)).unwrap();
        let sigma = climatological_std(&data.train).unwrap();
        let mut sq = 0.0;
        let mut count = 0;
        for j in 1000..data.test.len() {
            let est = model.readout(&hidden.column(j).clone_owned()).unwrap();
            let err = est - data.test.state(j);
            sq += err.norm_squared();
            count += err.len();
        }
        let rmse = (sq / count as f64).sqrt();
        let mean_sigma = sigma.mean();
        assert!(
            rmse < 0.1 * mean_sigma,
            "held-out estimation rmse {rmse} not ≪ climatological {mean_sigma}"
        );
    }

    #[test]
    fn one_step_forecast_equals_step_plus_readout() {
        let model = random_trained_model(43);
        let mut rng = stream_rng(12, stream::TEST);
        let s0 = standard_normal_vector(&mut rng, 64);
        let x0 = standard_normal_vector(&mut rng, 6);
        let fc = model.free_forecast(&s0, &x0, 1, 0.01, 0.0).unwrap();
        let s1 = model.step_hidden(&s0, &x0);
        let x1 = model.readout(&s1).unwrap();
        assert_relative_eq!((fc.states.state(0) - x1).norm(), 0.0, epsilon = 1e-13);
        assert_relative_eq!((fc.hidden.column(0).clone_owned() - s1).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn zero_readout_forecast_collapses() {
        let mut model = small_model(47);
        model.set_w_out(DMatrix::zeros(6, 64)).unwrap();
        let mut rng = stream_rng(13, stream::TEST);
        let s0 = standard_normal_vector(&mut rng, 64);
        let x0 = standard_normal_vector(&mut rng, 6);
        let fc = model.free_forecast(&s0, &x0, 20, 0.01, 0.0).unwrap();
        for j in 0..20 {
            assert_eq!(fc.states.state(j), DVector::zeros(6));
        }
    }

    #[test]
    fn closed_loop_step_matches_forecast_recursion() {
        let model = random_trained_model(53);
        let mut rng = stream_rng(14, stream::TEST);
        let s0 = standard_normal_vector(&mut rng, 64);
        let x0 = model.readout(&s0).unwrap();
        let fc = model.free_forecast(&s0, &x0, 3, 0.01, 0.0).unwrap();
        let mut s = s0.clone();
        let mut scratch = ClosedLoopScratch::for_model(&model).unwrap();
        for j in 0..3 {
            model.closed_loop_step(&mut s, &mut scratch).unwrap();
            assert_relative_eq!(
                (fc.hidden.column(j).clone_owned() - &s).norm(),
                0.0,
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn propagator_identity_at_zero_leak() {
        let mut model = random_trained_model(59);
        model.macro_params.leak = 0.0;
        let mut rng = stream_rng(15, stream::TEST);
        let s = standard_normal_vector(&mut rng, 64);
        let prop = model.rnn_propagator(&s).unwrap();
        let v = standard_normal_vector(&mut rng, 64);
        assert_relative_eq!((prop.apply(&v) - &v).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn propagator_adjoint_identity() {
        let model = random_trained_model(61);
        let mut rng = stream_rng(16, stream::TEST);
        for _ in 0..20 {
            let s = standard_normal_vector(&mut rng, 64);
            let prop = model.rnn_propagator(&s).unwrap();
            let v = standard_normal_vector(&mut rng, 64);
            let w = standard_normal_vector(&mut rng, 64);
            let lhs = prop.apply(&v).dot(&w);
            let rhs = v.dot(&prop.apply_transpose(&w));
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn propagator_matches_closed_loop_finite_difference() {
        let model = random_trained_model(67);
        let mut rng = stream_rng(17, stream::TEST);
        let mut scratch = ClosedLoopScratch::for_model(&model).unwrap();
        for _ in 0..50 {
            let s = standard_normal_vector(&mut rng, 64);
            let mut v = standard_normal_vector(&mut rng, 64);
            v /= v.norm();
            let prop = model.rnn_propagator(&s).unwrap();
            let mv = prop.apply(&v);
            let eps = 1e-6;
            let mut plus = &s + &v * eps;
            let mut base = s.clone();
            model.closed_loop_step(&mut plus, &mut scratch).unwrap();
            model.closed_loop_step(&mut base, &mut scratch).unwrap();
            let fd = (plus - base) / eps;
            let rel = (&fd - &mv).norm() / mv.norm();
            assert!(rel < 1e-5, "TLM finite-difference relative error {rel}");
        }
    }

    #[test]
    fn propagator_is_exactly_linear() {
        let model = random_trained_model(71);
        let mut rng = stream_rng(18, stream::TEST);
        let s = standard_normal_vector(&mut rng, 64);
        let prop = model.rnn_propagator(&s).unwrap();
        let v = standard_normal_vector(&mut rng, 64);
        let w = standard_normal_vector(&mut rng, 64);
        let lhs = prop.apply(&(&v * 1.7 + &w * -0.4));
        let rhs = prop.apply(&v) * 1.7 + prop.apply(&w) * -0.4;
        assert_relative_eq!((lhs - rhs).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn deterministic_training_given_seed_and_data() {
        let cfg = DatasetConfig {
            train_steps: 3_000,
            test_steps: 100,
            spinup_steps: 100,
            ..DatasetConfig::default()
        };
        let data = generate_dataset(&cfg).unwrap();
        let train = |()| {
            let mut model = init_reservoir(128, 6, 6, 0.05, test_macro(), 77).unwrap();
            train_readout_streaming(&mut model, &data.train.states, &data.train.states, 500).unwrap();
            model.w_out().unwrap().clone()
        };
        assert_eq!(train(()), train(()));
    }
}
