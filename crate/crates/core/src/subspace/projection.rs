use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::Real;
use crate::subspace::svd::SvdFactors;

/// Split of an update `T` against an orthonormal basis `U_k`:
/// `E_∥ = U_k U_kᵀ T` and `E_⊥ = T − E_∥`, all norms Frobenius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Projection {
    pub t_norm: f64,
    pub e_par: f64,
    pub e_perp: f64,
}

impl Projection {
    /// Project `t` onto the span of the columns of `basis` from the left. The
    /// `m x m` projector is never formed: `U_k (U_kᵀ T)`.
    pub fn compute<T: Real>(basis: &Matrix<T>, t: &Matrix<T>) -> Result<Self> {
        if basis.rows() != t.rows() {
            return Err(Error::InvalidArgument(format!(
                "basis has {} rows but the update has {}",
                basis.rows(),
                t.rows()
            )));
        }
        let coeffs = basis.t_matmul(t);
        let parallel = basis.matmul(&coeffs);
        let perp = t.sub(&parallel);
        Ok(Self {
            t_norm: t.frob_norm().as_f64(),
            e_par: parallel.frob_norm().as_f64(),
            e_perp: perp.frob_norm().as_f64(),
        })
    }

    /// `‖E_∥‖_F / ‖T‖_F`, or `None` for a zero update. Rounding can push
    /// the ratio a few ulps past 1; it is capped there.
    pub fn ssa(&self) -> Option<f64> {
        (self.t_norm > 0.0).then(|| (self.e_par / self.t_norm).min(1.0))
    }
}

/// Subspace alignment of `t` with the retained left singular vectors.
pub fn ssa<T: Real>(factors: &SvdFactors<T>, t: &Matrix<T>) -> Result<Option<f64>> {
    Ok(Projection::compute(&factors.u, t)?.ssa())
}

/// `(‖U_k U_kᵀ T‖_F, ‖(I − U_k U_kᵀ) T‖_F)`.
pub fn energy_decomposition<T: Real>(factors: &SvdFactors<T>, t: &Matrix<T>) -> Result<(f64, f64)> {
    let p = Projection::compute(&factors.u, t)?;
    Ok((p.e_par, p.e_perp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::subspace::rank::select_rank;
    use crate::subspace::svd::dense_svd;

    fn e1_factors() -> SvdFactors<f64> {
        let w = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 1.0]]);
        let f = dense_svd(&w).unwrap();
        let k = select_rank(&f.sigma, f.frob_sq, 0.5).unwrap();
        assert_eq!(k, 1);
        f.truncate(k)
    }

    #[test]
    fn hand_cases() {
        let f = e1_factors();
        let t = Matrix::from_rows(&[&[0.0, 0.0], &[0.0, 5.0]]);
        assert_eq!(ssa(&f, &t).unwrap(), Some(0.0));
        assert_eq!(energy_decomposition(&f, &t).unwrap(), (0.0, 5.0));
        let t = Matrix::from_rows(&[&[3.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(ssa(&f, &t).unwrap(), Some(1.0));
        assert_eq!(energy_decomposition(&f, &t).unwrap(), (3.0, 0.0));
    }

    #[test]
    fn zero_update_is_undefined() {
        let f = e1_factors();
        assert_eq!(ssa(&f, &Matrix::zeros(2, 3)).unwrap(), None);
    }

    #[test]
    fn row_mismatch() {
        let f = e1_factors();
        assert!(ssa(&f, &Matrix::zeros(3, 2)).is_err());
    }
}
