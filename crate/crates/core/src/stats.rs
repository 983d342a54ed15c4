//! Distribution distances and small regressions used by the experiments.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// `sup_t |F_n(t) - Phi(t)|` for the standard normal `Phi`.
pub fn ks_normal(samples: &[f64]) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    ks_against(samples, |t| normal.cdf(t))
}

/// `sup_t |F_n(t) - F(t)|` for a continuous `F`.
pub fn ks_against(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov distance `sup_t |F_a(t) - F_b(t)|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut k) = (0usize, 0usize);
    let mut best = 0.0f64;
    while i < a.len() && k < b.len() {
        let t = a[i].min(b[k]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while k < b.len() && b[k] <= t {
            k += 1;
        }
        best = best.max((i as f64 / na - k as f64 / nb).abs());
    }
    best
}

/// Mean and its standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_se = if x.len() > 2 { (rss / (n - 2.0) / sxx).sqrt() } else { f64::NAN };
    LinearFit { slope, intercept, slope_se }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn ks_of_a_single_point() {
        assert_abs_diff_eq!(ks_normal(&[0.0]), 0.5, epsilon = 1e-15);
        assert_eq!(ks_normal(&[]), 0.0);
    }

    #[test]
    fn ks_uniform_grid() {
        // midpoints of n cells against the uniform cdf give 1/(2n)
        let n = 50;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        assert_abs_diff_eq!(ks_against(&xs, |t| t.clamp(0.0, 1.0)), 0.5 / n as f64, epsilon = 1e-15);
    }

    #[test]
    fn two_sample_examples() {
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(ks_two_sample(&[0.0, 1.0], &[2.0, 3.0]), 1.0);
        assert_abs_diff_eq!(ks_two_sample(&[0.0, 2.0], &[1.0, 3.0]), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn exact_line() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 - 2.5 * v).collect();
        let f = linear_fit(&x, &y);
        assert_abs_diff_eq!(f.slope, -2.5, epsilon = 1e-12);
        assert_abs_diff_eq!(f.intercept, 3.0, epsilon = 1e-12);
        assert!(f.slope_se < 1e-12);
    }

    proptest! {
        #[test]
        fn ks_is_a_probability(xs in prop::collection::vec(-5.0f64..5.0, 1..60)) {
            let d = ks_normal(&xs);
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!(d >= 0.5 / xs.len() as f64 - 1e-12);
        }

        #[test]
        fn two_sample_is_symmetric(a in prop::collection::vec(-3.0f64..3.0, 1..40), b in prop::collection::vec(-3.0f64..3.0, 1..40)) {
            prop_assert_eq!(ks_two_sample(&a, &b), ks_two_sample(&b, &a));
        }
    }
}
