use crate::error::{Error, Result};
use crate::scalar::Real;

/// Relative slack within which `frob_sq` and `Σσ²` count as the same energy,
/// i.e. the supplied singular values are the whole spectrum.
const COMPLETE_SPECTRUM_SLACK: f64 = 1e-8;

/// Smallest `k` whose discarded energy fraction is at most `eps²`:
///
/// `k = min { k : (‖W‖_F² − Σ_{i≤k} σ_i²) / ‖W‖_F² ≤ eps² }`
///
/// The discarded energy is the residual beyond the supplied values
/// (`frob_sq − Σσ²`, zero when within rounding of a full spectrum) plus the
/// suffix `Σ_{i>k} σ_i²`. If no prefix qualifies the caller must supply more
/// singular values ([`Error::NeedMoreFactors`]). A zero matrix selects `k = 0`.
pub fn select_rank<T: Real>(sigma: &[T], frob_sq: T, eps: f64) -> Result<usize> {
    if !(eps >= 0.0) || !eps.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "eps must be finite and >= 0, got {eps}"
        )));
    }
    if sigma.windows(2).any(|w| w[1] > w[0]) || sigma.iter().any(|s| *s < T::zero()) {
        return Err(Error::InvalidArgument(
            "singular values must be nonnegative and nonincreasing".into(),
        ));
    }
    let frob_sq = frob_sq.as_f64();
    if frob_sq == 0.0 {
        return Ok(0);
    }
    let bound = eps * eps;
    let sq: Vec<f64> = sigma.iter().map(|s| s.as_f64() * s.as_f64()).collect();
    let total: f64 = sq.iter().sum();
    let mut residual = frob_sq - total;
    if residual <= COMPLETE_SPECTRUM_SLACK * frob_sq {
        residual = 0.0;
    }

    // suffix[k] = Σ_{i>k} σ_i² (1-based k), accumulated from the tail.
    let mut suffix = vec![0.0; sq.len() + 1];
    for i in (0..sq.len()).rev() {
        suffix[i] = suffix[i + 1] + sq[i];
    }
    if let Some(k) = (1..=sq.len()).find(|&k| (residual + suffix[k]) / frob_sq <= bound) {
        return Ok(k);
    }
    Err(Error::NeedMoreFactors {
        available: sq.len(),
        tail_ratio: residual / frob_sq,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_examples() {
        assert_eq!(select_rank(&[10.0, 1.0, 0.1], 101.01, 0.05).unwrap(), 2);
        assert_eq!(select_rank(&[1.0], 1.0, 0.05).unwrap(), 1);
        assert_eq!(select_rank(&[2.0, 1.0], 5.0, 0.5).unwrap(), 1);
    }

    #[test]
    fn eps_zero_keeps_numerical_rank() {
        assert_eq!(select_rank(&[3.0, 2.0, 1e-3, 0.0, 0.0], 13.000001, 0.0).unwrap(), 3);
    }

    #[test]
    fn truncated_spectrum_needs_more() {
        // Only the first value of a (10, 5, 5) spectrum supplied.
        let err = select_rank(&[10.0], 150.0, 0.05).unwrap_err();
        assert!(matches!(err, Error::NeedMoreFactors { available: 1, .. }));
        assert_eq!(select_rank(&[10.0], 100.2, 0.05).unwrap(), 1);
    }

    #[test]
    fn invalid_inputs() {
        assert!(select_rank(&[1.0, 2.0], 5.0, 0.05).is_err());
        assert!(select_rank(&[1.0], 1.0, -0.1).is_err());
        assert_eq!(select_rank::<f64>(&[0.0, 0.0], 0.0, 0.05).unwrap(), 0);
    }
}
