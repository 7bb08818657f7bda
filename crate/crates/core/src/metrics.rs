//! Scoring: climatological normalization, NRMSE, valid prediction time,
//! and ensemble error-correlation diagnostics.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::l96::Trajectory;

/// Per-variable standard deviation over time, population (1/T) convention.
pub fn climatological_std(train: &Trajectory) -> Result<DVector<f64>> {
    let t = train.len();
    if t < 2 {
        return Err(Error::Config("climatological_std needs at least 2 states".into()));
    }
    let d = train.dim();
    let mut mean = DVector::zeros(d);
    for j in 0..t {
        mean += train.states.column(j);
    }
    mean /= t as f64;
    let mut var = DVector::zeros(d);
    for j in 0..t {
        let dev = train.states.column(j) - &mean;
        var += dev.component_mul(&dev);
    }
    var /= t as f64;
    Ok(var.map(f64::sqrt))
}

/// Per-time normalized RMSE over `subset`: sqrt(mean of ((est-truth)/σ)²).
///
/// `estimate` and `truth` are D×T, aligned column by column.
pub fn nrmse(
    estimate: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    sigma_clim: &DVector<f64>,
    subset: &[usize],
) -> Result<Vec<f64>> {
    if estimate.shape() != truth.shape() {
        return Err(Error::dimension(
            "nrmse",
            format!("{:?}", truth.shape()),
            format!("{:?}", estimate.shape()),
        ));
    }
    if subset.is_empty() {
        return Err(Error::Config("nrmse subset is empty".into()));
    }
    for &i in subset {
        if i >= estimate.nrows() {
            return Err(Error::dimension(
                "nrmse",
                format!("subset index < {}", estimate.nrows()),
                i.to_string(),
            ));
        }
        if !(sigma_clim[i] > 0.0) {
            return Err(Error::Config(format!(
                "nrmse: climatological std at node {i} is {} (must be positive)",
                sigma_clim[i]
            )));
        }
    }
    let mut out = Vec::with_capacity(estimate.ncols());
    for j in 0..estimate.ncols() {
        let mut acc = 0.0;
        for &i in subset {
            let z = (estimate[(i, j)] - truth[(i, j)]) / sigma_clim[i];
            acc += z * z;
        }
        out.push((acc / subset.len() as f64).sqrt());
    }
    Ok(out)
}

/// Scalar NRMSE for one state pair.
pub fn nrmse_single(
    estimate: &DVector<f64>,
    truth: &DVector<f64>,
    sigma_clim: &DVector<f64>,
    subset: &[usize],
) -> Result<f64> {
    let est = DMatrix::from_columns(&[estimate.clone()]);
    let tru = DMatrix::from_columns(&[truth.clone()]);
    Ok(nrmse(&est, &tru, sigma_clim, subset)?[0])
}

/// Unnormalized RMSE over `subset` at each time.
pub fn rmse(estimate: &DMatrix<f64>, truth: &DMatrix<f64>, subset: &[usize]) -> Result<Vec<f64>> {
    let ones = DVector::from_element(estimate.nrows(), 1.0);
    nrmse(estimate, truth, &ones, subset)
}

/// Time-mean of a per-cycle series restricted to times in [t_lo, t_hi].
pub fn window_mean(times: &[f64], series: &[f64], t_lo: f64, t_hi: f64) -> Option<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (&t, &v) in times.iter().zip(series) {
        if t >= t_lo && t <= t_hi {
            acc += v;
            n += 1;
        }
    }
    (n > 0).then(|| acc / n as f64)
}

/// Valid prediction time on the discrete grid.
///
/// Column j of `forecast` is the j-th forecast step, verifying against
/// truth at t0 + (j+1)·dt; the forecast is valid through the step before
/// the first one whose NRMSE reaches ε.
pub fn vpt(
    forecast: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    sigma_clim: &DVector<f64>,
    epsilon: f64,
    dt: f64,
) -> Result<f64> {
    if epsilon <= 0.0 {
        return Err(Error::Config(format!("vpt: epsilon must be positive, got {epsilon}")));
    }
    let all: Vec<usize> = (0..forecast.nrows()).collect();
    let err = nrmse(forecast, truth, sigma_clim, &all)?;
    for (j, &e) in err.iter().enumerate() {
        if e >= epsilon {
            return Ok(j as f64 * dt);
        }
    }
    Ok(err.len() as f64 * dt)
}

/// Ensemble of trajectories, all aligned (same D, T, times).
pub struct EnsembleTraj<'a> {
    pub members: &'a [DMatrix<f64>],
}

impl<'a> EnsembleTraj<'a> {
    pub fn new(members: &'a [DMatrix<f64>]) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::Config("correlation needs at least 2 members".into()));
        }
        let shape = members[0].shape();
        if members.iter().any(|m| m.shape() != shape) {
            return Err(Error::Config("ensemble members have mixed shapes".into()));
        }
        Ok(EnsembleTraj { members })
    }

    /// D×D perturbation correlation matrix at time column `j`.
    pub fn correlation_at(&self, j: usize) -> Result<DMatrix<f64>> {
        let d = self.members[0].nrows();
        let k = self.members.len();
        let mut mean = DVector::zeros(d);
        for m in self.members {
            mean += m.column(j);
        }
        mean /= k as f64;
        let mut perts = DMatrix::zeros(d, k);
        for (c, m) in self.members.iter().enumerate() {
            perts.column_mut(c).copy_from(&(m.column(j) - &mean));
        }
        let mut std = DVector::zeros(d);
        for i in 0..d {
            let s = (perts.row(i).norm_squared() / k as f64).sqrt();
            if s == 0.0 {
                return Err(Error::numerical(
                    "correlation_at",
                    format!("zero ensemble variance in component {i}"),
                ));
            }
            std[i] = s;
        }
        let mut corr = DMatrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let cov = perts.row(a).dot(&perts.row(b)) / k as f64;
                corr[(a, b)] = cov / (std[a] * std[b]);
            }
        }
        Ok(corr)
    }
}

/// Reference against which an ensemble's correlation structure is scored.
pub enum CorrReference<'a> {
    Ensemble(&'a EnsembleTraj<'a>),
    Fixed(&'a DMatrix<f64>),
}

/// Elementwise RMSE between correlation matrices at each requested column.
pub fn error_correlation_rmse(
    ens_a: &EnsembleTraj,
    reference: &CorrReference,
    columns: &[usize],
) -> Result<Vec<f64>> {
    let d = ens_a.members[0].nrows();
    let mut out = Vec::with_capacity(columns.len());
    for &j in columns {
        let ca = ens_a.correlation_at(j)?;
        let cb = match reference {
            CorrReference::Ensemble(e) => e.correlation_at(j)?,
            CorrReference::Fixed(m) => (*m).clone(),
        };
        if cb.shape() != (d, d) {
            return Err(Error::dimension(
                "error_correlation_rmse",
                format!("{d}x{d}"),
                format!("{:?}", cb.shape()),
            ));
        }
        let diff = &ca - &cb;
        out.push((diff.norm_squared() / (d * d) as f64).sqrt());
    }
    Ok(out)
}
