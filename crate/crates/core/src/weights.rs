//! Log-domain importance weight arithmetic.

use crate::error::{Error, Result};

/// `log Σ exp(x_i)`, returning `-inf` when every entry is `-inf`.
pub fn log_sum_exp(log_weights: &[f64]) -> f64 {
    let max = log_weights
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = log_weights.iter().map(|&lw| (lw - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of log-weights.
///
/// Fails with [`Error::DegenerateBatch`] when all weights are zero and with
/// [`Error::Domain`] when a weight is NaN or `+inf`.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.iter().any(|w| w.is_nan() || *w == f64::INFINITY) {
        return Err(Error::Domain("log-weight is NaN or +inf".into()));
    }
    let lse = log_sum_exp(log_weights);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateBatch);
    }
    let mut weights: Vec<f64> = log_weights.iter().map(|&lw| (lw - lse).exp()).collect();
    // one more pass absorbs the rounding left by exp
    let total: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|w| *w /= total);
    Ok(weights)
}

/// Effective sample size `1 / Σ w_i²` of normalized weights.
pub fn ess(norm_weights: &[f64]) -> f64 {
    1.0 / norm_weights.iter().map(|w| w * w).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.05; 20]) - 20.0).abs() < 1e-9);
        let mut one_hot = vec![0.0; 7];
        one_hot[3] = 1.0;
        assert_eq!(ess(&one_hot), 1.0);
        assert!((ess(&[0.5, 0.25, 0.25]) - 1.0 / 0.375).abs() < 1e-12);
    }

    #[test]
    fn all_neg_infinite_is_degenerate() {
        let err = normalize_log_weights(&[f64::NEG_INFINITY; 3]).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch));
    }

    #[test]
    fn huge_offsets_do_not_overflow() {
        let w = normalize_log_weights(&[-1e6, -1e6 + 0.5]).unwrap();
        let e = 0.5f64.exp();
        assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((w[1] - e / (1.0 + e)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn normalized_weights_sum_to_one(lw in prop::collection::vec(-800.0f64..800.0, 1..64)) {
            let w = normalize_log_weights(&lw).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(w.iter().all(|&x| x >= 0.0));
            let e = ess(&w);
            prop_assert!(e >= 1.0 - 1e-9 && e <= lw.len() as f64 + 1e-9);
        }
    }
}
