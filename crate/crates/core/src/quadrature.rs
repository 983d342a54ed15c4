//! One-dimensional quadrature helpers.
//!
//! Two rules are used throughout the crate:
//!
//! * [`dyadic_sum`]: `h * sum g(i h)` on a grid of step `h = 2^-s`. For
//!   functions that are piecewise constant on that grid (the scaling-table
//!   step functions) and vanish outside a window it is the exact integral;
//!   for functions vanishing at the window ends it coincides with the
//!   composite trapezoid rule.
//! * [`simpson`]: composite Simpson on `[a, b]` split at user breakpoints, used
//!   for the density functionals where the integrand is smooth between kinks.

/// Left Riemann sum on the dyadic grid `i * 2^-log2_inv_step`, `i` in `[lo, hi)`.
pub fn dyadic_sum<F: FnMut(f64) -> f64>(lo: i64, hi: i64, log2_inv_step: u32, mut g: F) -> f64 {
    let h = (-(log2_inv_step as f64)).exp2();
    let mut acc = KahanSum::default();
    for i in lo..hi {
        acc.add(g(i as f64 * h));
    }
    acc.total() * h
}

/// Composite Simpson rule on `[a, b]`, splitting at every breakpoint strictly
/// inside the interval. `panels` is the number of Simpson panels per piece.
pub fn simpson<F: Fn(f64) -> f64>(g: F, a: f64, b: f64, breakpoints: &[f64], panels: usize) -> f64 {
    if b <= a {
        return 0.0;
    }
    let mut cuts = vec![a];
    let mut inner: Vec<f64> = breakpoints
        .iter()
        .copied()
        .filter(|&p| p > a && p < b)
        .collect();
    inner.sort_by(|x, y| x.total_cmp(y));
    inner.dedup();
    cuts.extend(inner);
    cuts.push(b);
    let panels = panels.max(1);
    let mut total = KahanSum::default();
    for w in cuts.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let m = 2 * panels;
        let h = (hi - lo) / m as f64;
        // one-sided limits at the piece ends keep jump discontinuities out
        let eps = lo.abs().max(hi.abs()).max(1.0) * 1e-14;
        let mut s = g(lo + eps) + g(hi - eps);
        for i in 1..m {
            let x = lo + i as f64 * h;
            s += if i % 2 == 1 { 4.0 * g(x) } else { 2.0 * g(x) };
        }
        total.add(s * h / 3.0);
    }
    total.total()
}

/// Neumaier compensated summation.
#[derive(Debug, Default, Clone, Copy)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

impl std::iter::FromIterator<f64> for KahanSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut k = KahanSum::default();
        for x in iter {
            k.add(x);
        }
        k
    }
}

/// Compensated sum of an iterator.
pub fn stable_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<KahanSum>().total()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_is_exact_on_cubics_and_respects_kinks() {
        let v = simpson(|x| x * x * x - x, 0.0, 2.0, &[], 3);
        assert!((v - 2.0).abs() < 1e-13);
        let abs = simpson(|x: f64| x.abs(), -1.0, 1.0, &[0.0], 1);
        assert!((abs - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dyadic_sum_integrates_steps_exactly() {
        // indicator of [0, 1) on a 2^-5 grid
        let v = dyadic_sum(-64, 64, 5, |x| if (0.0..1.0).contains(&x) { 1.0 } else { 0.0 });
        assert_eq!(v, 1.0);
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(stable_sum(xs), 2.0);
    }
}
