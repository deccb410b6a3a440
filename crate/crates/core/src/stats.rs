//! Small weighted statistics shared by the optimizer, batch designer and
//! explainability code.

/// Inverse-CDF weighted quantile: the smallest value whose cumulative
/// normalized weight reaches `q`. Zero-weight entries never define the
/// quantile. Returns `None` for empty input or zero total weight.
pub fn weighted_quantile(values: &[f64], weights: &[f64], q: f64) -> Option<f64> {
    debug_assert_eq!(values.len(), weights.len());
    let mut pairs: Vec<(f64, f64)> = values
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(&v, &w)| (v, w))
        .collect();
    if pairs.is_empty() {
        return None;
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    let target = q.clamp(0.0, 1.0) * total;
    let mut acc = 0.0;
    for &(v, w) in &pairs {
        acc += w;
        // relative slack so q = 1 always lands on the last element
        if acc >= target * (1.0 - 1e-12) {
            return Some(v);
        }
    }
    pairs.last().map(|p| p.0)
}

pub fn weighted_median(values: &[f64], weights: &[f64]) -> Option<f64> {
    weighted_quantile(values, weights, 0.5)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population (ddof = 0) standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Coefficient of determination with the zero-variance convention used
/// throughout the crate: a constant target reports 0.
pub fn r_squared(measured: &[f64], predicted: &[f64]) -> f64 {
    let m = mean(measured);
    let sst: f64 = measured.iter().map(|y| (y - m).powi(2)).sum();
    if sst <= 0.0 {
        return 0.0;
    }
    let sse: f64 = measured
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p).powi(2))
        .sum();
    1.0 - sse / sst
}

/// Weighted R² about the weighted mean; `None` when the total weight is 0.
pub fn weighted_r_squared(measured: &[f64], predicted: &[f64], weights: &[f64]) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let m = measured.iter().zip(weights).map(|(y, w)| y * w).sum::<f64>() / total;
    let sst: f64 = measured
        .iter()
        .zip(weights)
        .map(|(y, w)| w * (y - m).powi(2))
        .sum();
    if sst <= 0.0 {
        return Some(0.0);
    }
    let sse: f64 = measured
        .iter()
        .zip(predicted)
        .zip(weights)
        .map(|((y, p), w)| w * (y - p).powi(2))
        .sum();
    Some(1.0 - sse / sst)
}

pub fn rmse(measured: &[f64], predicted: &[f64]) -> f64 {
    let n = measured.len() as f64;
    (measured
        .iter()
        .zip(predicted)
        .map(|(y, p)| (y - p).powi(2))
        .sum::<f64>()
        / n)
        .sqrt()
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_of_equal_values_is_that_value() {
        let v = [2.5; 7];
        let w = [1.0; 7];
        assert_eq!(weighted_quantile(&v, &w, 0.9), Some(2.5));
    }

    #[test]
    fn quantile_respects_weights() {
        let v = [1.0, 2.0, 3.0];
        assert_eq!(weighted_quantile(&v, &[1.0, 1.0, 1.0], 0.5), Some(2.0));
        assert_eq!(weighted_quantile(&v, &[10.0, 1.0, 1.0], 0.5), Some(1.0));
        assert_eq!(weighted_quantile(&v, &[1.0, 1.0, 50.0], 0.5), Some(3.0));
        assert_eq!(weighted_quantile(&v, &[1.0, 1.0, 1.0], 1.0), Some(3.0));
        assert_eq!(weighted_quantile(&v, &[1.0, 1.0, 1.0], 0.0), Some(1.0));
    }

    #[test]
    fn quantile_zero_weight_is_none() {
        assert_eq!(weighted_quantile(&[1.0], &[0.0], 0.5), None);
        assert_eq!(weighted_quantile(&[], &[], 0.5), None);
    }

    #[test]
    fn r2_constant_target_is_zero() {
        assert_eq!(r_squared(&[3.0, 3.0], &[1.0, 5.0]), 0.0);
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 1.0);
    }
}
