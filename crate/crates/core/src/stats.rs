//! Small order-statistics helpers shared by feature extraction, normalization
//! and reporting.

/// Quantile of an ascending slice by linear interpolation between closest
/// ranks (position `q * (n - 1)`). Returns `None` for an empty slice.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

/// Nearest-rank percentile: the smallest value with at least `p` percent of
/// the data at or below it.
pub fn nearest_rank_sorted(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

pub fn sort_floats(values: &mut [f64]) {
    values.sort_by(f64::total_cmp);
}

/// Q1, median, Q3 and unscaled median absolute deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub mad: f64,
}

impl Spread {
    /// Sorts `values` in place.
    pub fn of(values: &mut [f64]) -> Option<Spread> {
        sort_floats(values);
        let median = quantile_sorted(values, 0.5)?;
        let mut dev: Vec<f64> = values.iter().map(|v| (v - median).abs()).collect();
        sort_floats(&mut dev);
        Some(Spread {
            q1: quantile_sorted(values, 0.25)?,
            median,
            q3: quantile_sorted(values, 0.75)?,
            mad: quantile_sorted(&dev, 0.5)?,
        })
    }
}

/// Mean and sample standard deviation (`None` for fewer than two values).
pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (Some(mean), None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some(var.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_on_one_to_hundred() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(nearest_rank_sorted(&v, 95.0), Some(95.0));
        assert_eq!(nearest_rank_sorted(&v, 100.0), Some(100.0));
        assert_eq!(nearest_rank_sorted(&[4.0], 95.0), Some(4.0));
    }

    #[test]
    fn spread_with_outlier() {
        let mut v = vec![1.0, 2.0, 3.0, 4.0, 100.0];
        let s = Spread::of(&mut v).unwrap();
        assert_eq!((s.q1, s.median, s.q3, s.mad), (2.0, 3.0, 4.0, 1.0));
    }

    #[test]
    fn spread_of_constant() {
        let mut v = vec![7.5; 9];
        let s = Spread::of(&mut v).unwrap();
        assert_eq!((s.q1, s.median, s.q3, s.mad), (7.5, 7.5, 7.5, 0.0));
    }

    #[test]
    fn interpolated_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&v, 0.25), Some(1.75));
        assert_eq!(quantile_sorted(&v, 0.5), Some(2.5));
        assert_eq!(quantile_sorted(&[], 0.5), None);
    }

    #[test]
    fn sample_std() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, Some(2.0));
        assert!((s.unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[1.0]).1, None);
    }
}
