//! Lyapunov spectra and finite-time exponents by QR re-orthonormalization
//! of a tangent basis propagated along a reference trajectory.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::l96::{l96_linear_propagator, L96StepPropagator, Trajectory};
use crate::linalg::{mgs_orthonormalize, standard_normal_vector, Propagator};
use crate::reservoir::{ClosedLoopScratch, ReservoirModel};

/// Time-averaged exponents (per MTU) from `n_steps` one-step propagators,
/// re-orthonormalizing the tangent basis every step. Returned in
/// non-increasing order.
pub fn lyapunov_spectrum<P: Propagator>(
    props: impl IntoIterator<Item = P>,
    n_exponents: usize,
    n_steps: usize,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let profile = qr_log_growth(props, n_exponents, &[n_steps], dt, rng)?;
    Ok(profile.into_iter().next().expect("one horizon requested").1)
}

/// Leading finite-time exponent truncated at `horizon_steps`.
pub fn ftle<P: Propagator>(
    props: impl IntoIterator<Item = P>,
    horizon_steps: usize,
    dt: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let spectrum = lyapunov_spectrum(props, 1, horizon_steps, dt, rng)?;
    Ok(spectrum[0])
}

/// Leading FTLE at several horizons from one recursion; horizons must be
/// strictly increasing step counts.
pub fn ftle_profile<P: Propagator>(
    props: impl IntoIterator<Item = P>,
    horizons: &[usize],
    dt: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    let profile = qr_log_growth(props, 1, horizons, dt, rng)?;
    Ok(profile.into_iter().map(|(_, v)| v[0]).collect())
}

/// Shared QR recursion. Returns (horizon, exponents) for each requested
/// horizon, exponents sorted non-increasing.
fn qr_log_growth<P: Propagator>(
    props: impl IntoIterator<Item = P>,
    n_exponents: usize,
    horizons: &[usize],
    dt: f64,
    rng: &mut impl Rng,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if n_exponents == 0 {
        return Err(Error::Config("need at least one exponent".into()));
    }
    if horizons.is_empty() || horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("horizons must be non-empty and strictly increasing".into()));
    }
    if horizons[0] == 0 {
        return Err(Error::Config("horizons must be positive step counts".into()));
    }
    let n_steps = *horizons.last().unwrap();
    let mut iter = props.into_iter();
    let mut basis: Option<DMatrix<f64>> = None;
    let mut accum = vec![0.0; n_exponents];
    let mut out = Vec::with_capacity(horizons.len());
    let mut next_horizon = 0usize;
    for step in 0..n_steps {
        let prop = iter.next().ok_or_else(|| {
            Error::numerical(
                "lyapunov_spectrum",
                format!("propagator stream ended at step {step} of {n_steps}"),
            )
        })?;
        let dim = prop.dim();
        if n_exponents > dim {
            return Err(Error::dimension(
                "lyapunov_spectrum",
                format!("n_exponents <= {dim}"),
                n_exponents.to_string(),
            ));
        }
        let q = basis.get_or_insert_with(|| {
            let mut q = DMatrix::from_fn(dim, n_exponents, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            mgs_orthonormalize(&mut q).expect("random basis has full rank");
            q
        });
        for j in 0..n_exponents {
            let col = prop.apply(&q.column(j).clone_owned());
            q.column_mut(j).copy_from(&col);
        }
        match mgs_orthonormalize(q) {
            Ok(diag) => {
                for (a, d) in accum.iter_mut().zip(&diag) {
                    *a += d.ln();
                }
            }
            Err(_) => {
                // Rank collapse: restart the basis and keep going. The
                // step's growth is unrecoverable; it is dropped.
                log::warn!("tangent basis rank collapse at step {step}; re-randomizing");
                let mut fresh = DMatrix::from_fn(dim, n_exponents, |_, _| {
                    rng.sample::<f64, _>(rand_distr::StandardNormal)
                });
                mgs_orthonormalize(&mut fresh).expect("random basis has full rank");
                *q = fresh;
            }
        }
        if step + 1 == horizons[next_horizon] {
            let mut exps: Vec<f64> = accum.iter().map(|a| a / ((step + 1) as f64 * dt)).collect();
            exps.sort_by(|a, b| b.partial_cmp(a).unwrap());
            out.push((step + 1, exps));
            next_horizon += 1;
        }
    }
    Ok(out)
}

/// One-step L96 tangent propagators along a trajectory (one per step).
pub fn l96_tangent_stream<'a>(
    traj: &'a Trajectory,
    forcing: f64,
) -> Result<impl Iterator<Item = L96StepPropagator> + 'a> {
    if traj.dim() < 4 {
        return Err(Error::dimension("l96_tangent_stream", ">= 4", traj.dim().to_string()));
    }
    let dt = traj.dt;
    Ok((0..traj.len().saturating_sub(1)).map(move |j| {
        l96_linear_propagator(&traj.state(j), dt, forcing).expect("dimension validated")
    }))
}

/// Closed-loop RNN tangent propagators along the model's own trajectory
/// from hidden state `s0`; the stream ends early if the forecast leaves
/// the finite range.
pub struct RnnTangentStream<'a> {
    model: &'a ReservoirModel,
    s: DVector<f64>,
    scratch: ClosedLoopScratch,
}

pub fn rnn_tangent_stream<'a>(
    model: &'a ReservoirModel,
    s0: DVector<f64>,
) -> Result<RnnTangentStream<'a>> {
    let scratch = ClosedLoopScratch::for_model(model)?;
    // Surface alignment problems now, not on the first next().
    model.rnn_propagator(&s0)?;
    Ok(RnnTangentStream {
        model,
        s: s0,
        scratch,
    })
}

impl<'a> Iterator for RnnTangentStream<'a> {
    type Item = crate::reservoir::RnnPropagator<'a>;

    fn next(&mut self) -> Option<Self::Item> {
        if !self.s.iter().all(|v| v.is_finite()) {
            return None;
        }
        let prop = self.model.rnn_propagator(&self.s).ok()?;
        self.model.closed_loop_step(&mut self.s, &mut self.scratch).ok()?;
        Some(prop)
    }
}

/// Independent two-trajectory estimate of the leading exponent: renormalized
/// separation growth between a reference run and a perturbed twin.
pub fn two_trajectory_leading_exponent(
    x0: &DVector<f64>,
    dt: f64,
    n_steps: usize,
    forcing: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    const D0: f64 = 1e-7;
    let d = x0.len();
    let mut dir = standard_normal_vector(rng, d);
    dir /= dir.norm();
    let mut x = x0.clone();
    let mut y = x0 + dir * D0;
    let mut log_sum = 0.0;
    for _ in 0..n_steps {
        x = crate::l96::integrate(&x, dt, 1, forcing)?.state(1);
        y = crate::l96::integrate(&y, dt, 1, forcing)?.state(1);
        let sep = (&y - &x).norm();
        if sep == 0.0 {
            return Err(Error::numerical(
                "two_trajectory_leading_exponent",
                "trajectories collapsed onto each other",
            ));
        }
        log_sum += (sep / D0).ln();
        y = &x + (&y - &x) * (D0 / sep);
    }
    Ok(log_sum / (n_steps as f64 * dt))
}
