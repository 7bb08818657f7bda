//! Shared linear-algebra kernels: CSR sparse storage, spectral-radius
//! estimation by power iteration, blocked Gram accumulation, and modified
//! Gram-Schmidt re-orthonormalization.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Compressed sparse row matrix with 64-bit values.
#[derive(Debug, Clone)]
pub struct Csr {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    vals: Vec<f64>,
}

impl Csr {
    /// Build from (row, col, value) triplets in any order. Duplicates sum.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(u32, u32, f64)]) -> Result<Self> {
        for &(r, c, _) in triplets {
            if r as usize >= nrows || c as usize >= ncols {
                return Err(Error::dimension(
                    "Csr::from_triplets",
                    format!("indices within {nrows}x{ncols}"),
                    format!("({r}, {c})"),
                ));
            }
        }
        let mut counts = vec![0usize; nrows + 1];
        for &(r, _, _) in triplets {
            counts[r as usize + 1] += 1;
        }
        for i in 0..nrows {
            counts[i + 1] += counts[i];
        }
        let row_ptr = counts.clone();
        let mut col_idx = vec![0u32; triplets.len()];
        let mut vals = vec![0.0; triplets.len()];
        let mut cursor = counts;
        for &(r, c, v) in triplets {
            let slot = cursor[r as usize];
            col_idx[slot] = c;
            vals[slot] = v;
            cursor[r as usize] += 1;
        }
        // Sort within each row and merge duplicates.
        let mut out_col = Vec::with_capacity(col_idx.len());
        let mut out_val = Vec::with_capacity(vals.len());
        let mut out_ptr = vec![0usize; nrows + 1];
        let mut scratch: Vec<(u32, f64)> = Vec::new();
        for r in 0..nrows {
            scratch.clear();
            scratch.extend(
                col_idx[row_ptr[r]..row_ptr[r + 1]]
                    .iter()
                    .copied()
                    .zip(vals[row_ptr[r]..row_ptr[r + 1]].iter().copied()),
            );
            scratch.sort_unstable_by_key(|&(c, _)| c);
            for &(c, v) in scratch.iter() {
                if out_val.len() > out_ptr[r] && *out_col.last().unwrap() == c {
                    *out_val.last_mut().unwrap() += v;
                } else {
                    out_col.push(c);
                    out_val.push(v);
                }
            }
            out_ptr[r + 1] = out_col.len();
        }
        Ok(Csr {
            nrows,
            ncols,
            row_ptr: out_ptr,
            col_idx: out_col,
            vals: out_val,
        })
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// y = A x. Panics (debug) on shape mismatch; hot path, no Result.
    pub fn mul_vec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.ncols);
        debug_assert_eq!(y.len(), self.nrows);
        for r in 0..self.nrows {
            let lo = self.row_ptr[r];
            let hi = self.row_ptr[r + 1];
            let mut acc = 0.0;
            for (c, v) in self.col_idx[lo..hi].iter().zip(&self.vals[lo..hi]) {
                acc += v * x[*c as usize];
            }
            y[r] = acc;
        }
    }

    /// Explicit transpose copy, so adjoint sweeps also run row-major.
    pub fn transpose(&self) -> Csr {
        let mut triplets = Vec::with_capacity(self.nnz());
        for (r, c, v) in self.iter_triplets() {
            triplets.push((c, r, v));
        }
        Csr::from_triplets(self.ncols, self.nrows, &triplets)
            .expect("transpose of a valid matrix is valid")
    }

    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.vals {
            *v *= alpha;
        }
    }

    pub fn iter_triplets(&self) -> impl Iterator<Item = (u32, u32, f64)> + '_ {
        (0..self.nrows).flat_map(move |r| {
            let lo = self.row_ptr[r];
            let hi = self.row_ptr[r + 1];
            self.col_idx[lo..hi]
                .iter()
                .zip(&self.vals[lo..hi])
                .map(move |(c, v)| (r as u32, *c, *v))
        })
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.nrows, self.ncols);
        for (r, c, v) in self.iter_triplets() {
            m[(r as usize, c as usize)] = v;
        }
        m
    }
}

/// A linear operator with transpose application; the interface shared by
/// tangent-linear models so adjoint sweeps and Lyapunov recursions do not
/// care whether the operator is matrix-free or assembled.
pub trait Propagator {
    fn dim(&self) -> usize;
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
    fn apply_transpose(&self, w: &DVector<f64>) -> DVector<f64>;
}

pub fn standard_normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Spectral radius of a square sparse matrix by power iteration.
///
/// Random sparse matrices routinely have a dominant *complex pair*, under
/// which plain power iteration never settles, so each sweep also checks a
/// two-dimensional Ritz projection: the span of (x, Ax) converges to the
/// dominant invariant subspace whether the top eigenvalue is real or not.
pub fn spectral_radius(a: &Csr, rng: &mut impl Rng, tol: f64, max_iter: usize) -> Result<f64> {
    if a.nrows != a.ncols {
        return Err(Error::dimension(
            "spectral_radius",
            "square matrix",
            format!("{}x{}", a.nrows, a.ncols),
        ));
    }
    let n = a.nrows;
    let mut x = standard_normal_vector(rng, n);
    x /= x.norm();
    let mut y = DVector::zeros(n);
    let mut z = DVector::zeros(n);
    for iter in 0..max_iter {
        a.mul_vec(x.as_slice(), y.as_mut_slice());
        let lambda = x.dot(&y);
        let resid1 = (&y - &x * lambda).norm();
        if resid1 <= tol * lambda.abs() && lambda != 0.0 {
            return Ok(lambda.abs());
        }
        // Two-dimensional Ritz step.
        let mut q2 = &y - &x * x.dot(&y);
        let n2 = q2.norm();
        if n2 > 1e-300 {
            q2 /= n2;
            a.mul_vec(q2.as_slice(), z.as_mut_slice());
            let b11 = x.dot(&y);
            let b21 = q2.dot(&y);
            let b12 = x.dot(&z);
            let b22 = q2.dot(&z);
            let r1 = (&y - &x * b11 - &q2 * b21).norm_squared();
            let r2 = (&z - &x * b12 - &q2 * b22).norm_squared();
            let resid2 = (r1 + r2).sqrt();
            let tr = b11 + b22;
            let det = b11 * b22 - b12 * b21;
            let disc = tr * tr / 4.0 - det;
            let radius = if disc >= 0.0 {
                let s = disc.sqrt();
                (tr / 2.0 + s).abs().max((tr / 2.0 - s).abs())
            } else {
                det.sqrt()
            };
            if radius > 0.0 && resid2 <= tol * radius {
                return Ok(radius);
            }
        }
        let ny = y.norm();
        if ny == 0.0 {
            return Err(Error::numerical(
                "spectral_radius",
                format!("iterate annihilated at step {iter}"),
            ));
        }
        x.copy_from(&y);
        x /= ny;
    }
    Err(Error::Convergence {
        context: "spectral_radius power iteration",
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// In-place modified Gram-Schmidt on the columns of `q`; returns the R
/// diagonal (each column's norm after earlier components are removed).
pub fn mgs_orthonormalize(q: &mut DMatrix<f64>) -> Result<Vec<f64>> {
    let ncols = q.ncols();
    let mut diag = Vec::with_capacity(ncols);
    for j in 0..ncols {
        for i in 0..j {
            let proj = q.column(i).dot(&q.column(j));
            let qi = q.column(i).clone_owned();
            let mut col_j = q.column_mut(j);
            col_j.axpy(-proj, &qi, 1.0);
        }
        let norm = q.column(j).norm();
        if norm < 1e-300 {
            return Err(Error::numerical(
                "mgs_orthonormalize",
                format!("rank collapse at column {j}"),
            ));
        }
        q.column_mut(j).scale_mut(1.0 / norm);
        diag.push(norm);
    }
    Ok(diag)
}

/// c += a * bᵀ for column-major dense blocks (a: m×k, b: n×k, c: m×n).
///
/// Single dgemm call on a transposed stride view of `b`; this is the hot
/// kernel behind streaming Gram accumulation, where materializing bᵀ per
/// block would double memory traffic.
pub fn gemm_abt(c: &mut DMatrix<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>) {
    let (m, k) = a.shape();
    let (n, k2) = b.shape();
    assert_eq!(k, k2, "gemm_abt: inner dimensions differ");
    assert_eq!(c.shape(), (m, n), "gemm_abt: output shape mismatch");
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}
