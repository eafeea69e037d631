//! Dense and randomized singular value decompositions.
//!
//! The dense path is a one-sided (Hestenes) Jacobi SVD: columns of a working
//! copy are rotated pairwise until mutually orthogonal, which yields singular
//! values with high relative accuracy and left vectors that are orthonormal to
//! working precision. The randomized path is a Gaussian range finder with
//! power iterations, followed by the dense SVD of the small projected matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::{orthonormalize_columns, Matrix};
use crate::scalar::{dot, sum_sq, Real};

const MAX_SWEEPS: usize = 80;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SvdMethod {
    Dense,
    Randomized {
        seed: u64,
        oversample: usize,
        power_iters: usize,
    },
}

/// Leading singular triplets of one matrix plus its total energy.
#[derive(Clone, Debug)]
pub struct SvdFactors<T> {
    /// `m x k`, orthonormal columns.
    pub u: Matrix<T>,
    /// `k` values, nonincreasing, nonnegative.
    pub sigma: Vec<T>,
    /// `n x k`, orthonormal columns.
    pub v: Matrix<T>,
    /// `‖W‖_F²` of the full matrix.
    pub frob_sq: T,
    pub method: SvdMethod,
}

impl<T: Real> SvdFactors<T> {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// Keep the leading `k` triplets.
    pub fn truncate(&self, k: usize) -> Self {
        assert!(k <= self.rank(), "cannot truncate {} factors to {k}", self.rank());
        Self {
            u: self.u.leading_columns(k),
            sigma: self.sigma[..k].to_vec(),
            v: self.v.leading_columns(k),
            frob_sq: self.frob_sq,
            method: self.method,
        }
    }

    /// `U diag(σ) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix<T> {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, &s) in self.sigma.iter().enumerate() {
                us[(i, j)] = us[(i, j)] * s;
            }
        }
        us.matmul(&self.v.transpose())
    }

    /// Fraction of `‖W‖_F²` carried by the retained triplets.
    pub fn captured_energy(&self) -> T {
        if self.frob_sq == T::zero() {
            return T::one();
        }
        sum_sq(&self.sigma) / self.frob_sq
    }
}

fn check_finite<T: Real>(w: &Matrix<T>) -> Result<()> {
    if w.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("matrix passed to SVD".into()))
    }
}

/// Full thin SVD, `r = min(m, n)` triplets.
pub fn dense_svd<T: Real>(w: &Matrix<T>) -> Result<SvdFactors<T>> {
    check_finite(w)?;
    let frob_sq = w.frob_sq();
    let (u, sigma, v) = if w.rows() >= w.cols() {
        jacobi_tall(w)
    } else {
        let (u, s, v) = jacobi_tall(&w.transpose());
        (v, s, u)
    };
    Ok(SvdFactors {
        u,
        sigma,
        v,
        frob_sq,
        method: SvdMethod::Dense,
    })
}

/// One-sided Jacobi on an `m x n` matrix with `m >= n`.
fn jacobi_tall<T: Real>(w: &Matrix<T>) -> (Matrix<T>, Vec<T>, Matrix<T>) {
    let (m, n) = w.shape();
    let mut cols: Vec<Vec<T>> = (0..n).map(|j| w.column(j)).collect();
    let mut vcols: Vec<Vec<T>> = (0..n)
        .map(|j| {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            e
        })
        .collect();

    let eps = T::epsilon();
    let tol = eps * T::of((m as f64).sqrt().max(1.0));
    let frob = w.frob_norm();
    // Columns below this norm carry no resolvable direction.
    let negligible = eps * frob * T::of(m.max(n) as f64);
    let negligible_sq = negligible * negligible;

    let mut norms: Vec<T> = cols.iter().map(|c| sum_sq(c)).collect();
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = norms[p];
                let beta = norms[q];
                if alpha <= negligible_sq || beta <= negligible_sq {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (T::of(2.0) * gamma);
                let t = zeta.signum() / (zeta.abs() + (T::one() + zeta * zeta).sqrt());
                let c = T::one() / (T::one() + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                rotate(&mut left[p], &mut right[0], c, s);
                let (vl, vr) = vcols.split_at_mut(q);
                rotate(&mut vl[p], &mut vr[0], c, s);
                norms[p] = sum_sq(&cols[p]);
                norms[q] = sum_sq(&cols[q]);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let sig: Vec<T> = norms.iter().map(|&x| x.sqrt()).collect();
    // Stable: equal singular values keep column order.
    order.sort_by(|&a, &b| sig[b].partial_cmp(&sig[a]).unwrap_or(std::cmp::Ordering::Equal));

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    let mut sigma = Vec::with_capacity(n);
    for (j, &src) in order.iter().enumerate() {
        let s = sig[src];
        if s > negligible && s > T::zero() {
            let scaled: Vec<T> = cols[src].iter().map(|&x| x / s).collect();
            u.set_column(j, &scaled);
            sigma.push(s);
        } else {
            sigma.push(T::zero());
        }
        v.set_column(j, &vcols[src]);
    }
    orthonormalize_columns(&mut u);
    (u, sigma, v)
}

#[inline]
fn rotate<T: Real>(a: &mut [T], b: &mut [T], c: T, s: T) {
    for (x, y) in a.iter_mut().zip(b.iter_mut()) {
        let (xa, yb) = (*x, *y);
        *x = c * xa - s * yb;
        *y = s * xa + c * yb;
    }
}

/// Randomized SVD returning the leading `k` triplets.
///
/// Deterministic for a given seed: the Gaussian test matrix comes from a
/// ChaCha8 stream and every later step is sequential.
pub fn randomized_svd<T: Real>(
    w: &Matrix<T>,
    k: usize,
    seed: u64,
    oversample: usize,
    power_iters: usize,
) -> Result<SvdFactors<T>> {
    let (m, n) = w.shape();
    let r = m.min(n);
    if k == 0 || k > r {
        return Err(Error::InvalidArgument(format!(
            "target rank {k} outside 1..={r} for a {m}x{n} matrix"
        )));
    }
    check_finite(w)?;
    let l = (k + oversample).min(r);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = Matrix::from_fn(n, l, |_, _| {
        let g: f64 = StandardNormal.sample(&mut rng);
        T::of(g)
    });
    let mut q = w.matmul(&omega);
    orthonormalize_columns(&mut q);
    for _ in 0..power_iters {
        let mut z = w.t_matmul(&q);
        orthonormalize_columns(&mut z);
        q = w.matmul(&z);
        orthonormalize_columns(&mut q);
    }
    let b = q.t_matmul(w);
    let small = dense_svd(&b)?;
    let u = q.matmul(&small.u);
    let full = SvdFactors {
        u,
        sigma: small.sigma,
        v: small.v,
        frob_sq: w.frob_sq(),
        method: SvdMethod::Randomized {
            seed,
            oversample,
            power_iters,
        },
    };
    Ok(full.truncate(k))
}
