//! Error and comparison metrics.

use serde::{Deserialize, Serialize};

/// Mean squared difference over coordinates.
pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Square root of the average of the defined entries.
pub fn rmse_of_mse(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    (!defined.is_empty()).then(|| (defined.iter().sum::<f64>() / defined.len() as f64).sqrt())
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Jumps {
    /// `‖trace[s] − trace[s − 1]‖` at every observation step `s`.
    pub jumps: Vec<f64>,
    pub median: Option<f64>,
}

/// Euclidean jump of a mean trace across each observation step. Steps whose
/// neighbours are undefined are skipped.
pub fn discontinuity_metric(trace: &[Option<Vec<f64>>], obs_steps: &[usize]) -> Jumps {
    let jumps: Vec<f64> = obs_steps
        .iter()
        .filter(|&&s| s >= 1 && s < trace.len())
        .filter_map(|&s| match (&trace[s], &trace[s - 1]) {
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()),
            _ => None,
        })
        .collect();
    let median = median(&jumps);
    Jumps { jumps, median }
}

/// One-sided sign-test p-value `P(X ≥ wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    let mut p = 0.0;
    for k in wins..=n {
        p += (ln_choose(n, k) - n as f64 * std::f64::consts::LN_2).exp();
    }
    p.min(1.0)
}

fn ln_choose(n: usize, k: usize) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

/// Weighted quantile: the smallest value whose cumulative normalized weight
/// reaches `q`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> f64 {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let total: f64 = weights.iter().sum();
    let mut acc = 0.0;
    for &i in &idx {
        acc += weights[i] / total;
        if acc >= q {
            return values[i];
        }
    }
    values[*idx.last().expect("non-empty values")]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jumps_of_constant_and_step_traces() {
        let constant: Vec<Option<Vec<f64>>> = (0..10).map(|_| Some(vec![1.0, 2.0])).collect();
        let j = discontinuity_metric(&constant, &[3, 6, 9]);
        assert_eq!(j.jumps, vec![0.0; 3]);
        let step: Vec<Option<Vec<f64>>> = (0..10).map(|s| Some(vec![if s >= 5 { 2.0 } else { 0.0 }])).collect();
        let j = discontinuity_metric(&step, &[5]);
        assert_eq!(j.jumps, vec![2.0]);
        assert_eq!(j.median, Some(2.0));
    }

    #[test]
    fn sign_test_values() {
        assert!((sign_test_p(20, 20) - 0.5f64.powi(20)).abs() < 1e-18);
        assert!((sign_test_p(0, 7) - 1.0).abs() < 1e-12);
        // P(X ≥ 15 | n = 20) = 0.020694
        assert!((sign_test_p(15, 20) - 0.020_694).abs() < 1e-6);
    }

    #[test]
    fn medians_and_quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        let v = [5.0, 1.0, 3.0];
        let w = [0.2, 0.5, 0.3];
        assert_eq!(weighted_quantile(&v, &w, 0.4), 1.0);
        assert_eq!(weighted_quantile(&v, &w, 0.6), 3.0);
        assert_eq!(weighted_quantile(&v, &w, 0.99), 5.0);
        assert_eq!(rmse_of_mse(&[Some(4.0), None, Some(0.0)]), Some(2.0f64.sqrt()));
    }
}
