//! Exponential tail bounds for the pieces of `W_n`, their Monte Carlo
//! counterparts, and the moment-scaling probe for `E H_n^4` and `E G_n^2`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::estimator::{projection_mean, sample_index, LevelProjection};
use crate::ise::sample_pass;
use crate::kernel::QuadSpec;
use crate::stats::{linear_fit, mean_se};
use crate::variance::{cov_kernels, window_statistic, CovKernels};
use crate::wavelet::{MajorantSpec, ScalingTable};

/// The constants `A, B, C, D` of the canonical U-statistic inequality for
/// the kernel `H_{n,F}` summed over `m` points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailBoundInputs {
    pub a_const: f64,
    pub b_const: f64,
    pub c_const: f64,
    pub d_const: f64,
    pub m: usize,
    pub n: usize,
    pub level: u32,
    pub window: (f64, f64),
}

pub fn glz_constants(density: &DensityModel, majorant: &MajorantSpec, j: u32, m: usize, n: usize, window: (f64, f64)) -> Result<TailBoundInputs> {
    if m < 2 {
        return Err(Error::Config(format!("tail constants need m >= 2, got {m}")));
    }
    let f_sq = density.sq_integral(window.0, window.1);
    if !(f_sq > 0.0) {
        return Err(Error::DegenerateWindow);
    }
    let h = (-(j as f64)).exp2();
    let mf = m as f64;
    let l1 = majorant.l1_norm;
    let l2 = majorant.l2_sq;
    Ok(TailBoundInputs {
        a_const: 4.0 * h * l2,
        b_const: (16.0 * mf * h * h * l2 * l2).sqrt(),
        c_const: (2.0 * mf * mf * h.powi(3) * l1 * l1 * l2 * f_sq).sqrt(),
        d_const: 4.0 * mf * h * h * density.sup_norm * l1 * l1,
        m,
        n,
        level: j,
        window,
    })
}

/// `L exp(-min(x^2/C^2, x/D, x^{2/3}/B^{2/3}, x^{1/2}/A^{1/2}) / L)`.
pub fn glz_tail(inputs: &TailBoundInputs, x: f64, l_const: f64) -> f64 {
    let t = inputs;
    let exponent = (x * x / (t.c_const * t.c_const))
        .min(x / t.d_const)
        .min(x.powf(2.0 / 3.0) / t.b_const.powf(2.0 / 3.0))
        .min(x.sqrt() / t.a_const.sqrt());
    l_const * (-exponent / l_const).exp()
}

/// Tail bound for `|W_n(F)| >= tau n 2^{-3j/2}` with the six-way minimum.
pub fn wn_tail_bound(tau: f64, n: usize, j: u32, kappa0: f64, f_sq_window: f64) -> f64 {
    let nf = n as f64;
    let two_j = (j as f64).exp2();
    let exponent = [
        tau * tau / f_sq_window,
        two_j.sqrt() * tau,
        tau.powf(2.0 / 3.0) * nf.cbrt() / two_j.cbrt(),
        tau.sqrt() * nf.sqrt() / two_j.powf(0.25),
        tau * tau * nf / two_j,
        tau * nf / two_j.sqrt(),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    kappa0 * (-exponent / kappa0).exp()
}

/// The quadratic branch alone, at `tau = eta sqrt(log log n)`.
pub fn wn_tail_bound_lil(eta: f64, n: usize, kappa0: f64, f_sq_window: f64) -> f64 {
    let ll = (n as f64).ln().ln();
    kappa0 * (-eta * eta * ll / (kappa0 * f_sq_window)).exp()
}

/// Tail bound for `|sum_{i != i' <= m} H_{n,F}| >= tau n 2^{-3j/2}`.
pub fn u_tail_bound(tau: f64, m: usize, n: usize, j: u32, kappa0: f64, f_sq_window: f64) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let two_j = (j as f64).exp2();
    let exponent = [
        tau * tau * nf * nf / (mf * mf * f_sq_window),
        tau * nf / (mf / two_j.sqrt()),
        (tau * nf).powf(2.0 / 3.0) / two_j.cbrt() / mf.cbrt(),
        (tau * nf).sqrt() / two_j.powf(0.25),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    kappa0 * (-exponent / kappa0).exp()
}

/// Bernstein bound for `|sum_{i<=m} (H_n(X_i,X_i) - E H_n)| > tau n 2^{-3j/2}`.
pub fn bernstein_diag_bound(tau: f64, m: usize, n: usize, j: u32, phi_l2_sq: f64) -> f64 {
    let (mf, nf) = (m as f64, n as f64);
    let jf = j as f64;
    let num = tau * tau * nf * nf * (-3.0 * jf).exp2();
    let den = 8.0 * mf * (-2.0 * jf).exp2() * phi_l2_sq * phi_l2_sq + 16.0 / 3.0 * tau * nf * (-2.5 * jf).exp2() * phi_l2_sq;
    2.0 * (-num / den).exp()
}

/// Smallest `L >= 1` with `bound(x, L) >= target` at every probe, given that
/// `L exp(-e/L)` increases in `L`.
pub fn calibrate_constant(targets: &[(f64, f64)], bound: impl Fn(f64, f64) -> f64) -> f64 {
    let ok = |l: f64| targets.iter().all(|&(x, t)| bound(x, l) >= t);
    if ok(1.0) {
        return 1.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while !ok(hi.exp()) {
        lo = hi;
        hi *= 2.0;
        if hi > 60.0 {
            return f64::INFINITY;
        }
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if ok(mid.exp()) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TailRow {
    pub statistic: TailStatistic,
    pub tau: f64,
    pub bound: f64,
    pub empirical_freq: f64,
    pub n: usize,
    pub j: u32,
}

impl TailRow {
    pub fn holds(&self) -> bool {
        self.empirical_freq <= self.bound
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailStatistic {
    /// `L_n(R)` against the Bernstein bound.
    Diagonal,
    /// `U_n(F)` against the calibrated canonical U-statistic bound.
    Canonical,
    /// `W_n(F)` against the calibrated six-way bound.
    Window,
}

/// Per-replication `(L_n(R), U_n(F), W_n(F))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailDraw {
    pub diag: f64,
    pub canonical: f64,
    pub window: f64,
}

pub fn tail_draws(density: &DensityModel, table: &ScalingTable, cov: &CovKernels, n: usize, replications: usize, seed: u64) -> Result<Vec<TailDraw>> {
    let proj = &cov.projection;
    let two_j = (cov.level as f64).exp2();
    let e_diag = proj.variance_sum() / (two_j * two_j);
    let window_diag_mean = cov.window_diag_expectation();
    (0..replications as u64)
        .into_par_iter()
        .map(|r| {
            let s = density.sample_stream(n, seed, r)?;
            let pass = sample_pass(&s.values, proj, table, false)?;
            let diag = pass.diag - n as f64 * e_diag;
            let window = window_statistic(cov, table, &s.values)?;
            let window_diag: f64 = s.values.iter().map(|&x| cov.window_diag(table, x)).sum();
            let l_window = window_diag - n as f64 * window_diag_mean;
            Ok(TailDraw {
                diag,
                canonical: window - l_window,
                window,
            })
        })
        .collect()
}

fn frequency(values: &[f64], threshold: f64) -> f64 {
    values.iter().filter(|v| v.abs() >= threshold).count() as f64 / values.len() as f64
}

/// One-sided upper confidence limit of a frequency (normal approximation
/// with a floor of `3/R`).
fn upper_limit(freq: f64, reps: usize) -> f64 {
    let r = reps as f64;
    (freq + 3.0 * (freq * (1.0 - freq) / r).sqrt()).max(3.0 / r).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailComparison {
    pub rows: Vec<TailRow>,
    pub glz_l: f64,
    pub kappa0: f64,
    pub calibration_n: usize,
}

impl TailComparison {
    pub fn all_hold(&self) -> bool {
        self.rows.iter().all(TailRow::holds)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["statistic", "tau", "bound", "empirical_freq", "n", "j"])?;
        for r in &self.rows {
            let stat = match r.statistic {
                TailStatistic::Diagonal => "diagonal",
                TailStatistic::Canonical => "canonical",
                TailStatistic::Window => "window",
            };
            w.write_record([stat.to_string(), format!("{}", r.tau), format!("{:e}", r.bound), format!("{}", r.empirical_freq), r.n.to_string(), r.j.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailPlan {
    /// `(n, j)` pairs, the first one used for calibration.
    pub cases: Vec<(usize, u32)>,
    pub taus: Vec<f64>,
    pub replications: usize,
    pub window_m: f64,
    pub seed: u64,
    /// Frozen constants; calibrated on the first case when absent.
    pub glz_l: Option<f64>,
    pub kappa0: Option<f64>,
}

/// Empirical tail frequencies of `L_n(R)`, `U_n(F)` and `W_n(F)` at
/// thresholds `tau n 2^{-3j/2}`, against their bounds.
pub fn tail_comparison(density: &DensityModel, table: &ScalingTable, plan: &TailPlan) -> Result<TailComparison> {
    let mut glz_l = plan.glz_l;
    let mut kappa0 = plan.kappa0;
    let mut rows = Vec::new();
    let window = (-plan.window_m, plan.window_m);
    let f_sq = density.sq_integral(window.0, window.1);
    let calibration_n = plan.cases.first().map(|c| c.0).unwrap_or(0);
    for (case, &(n, j)) in plan.cases.iter().enumerate() {
        let cov = cov_kernels(density, table, j, plan.window_m, QuadSpec::exact(table))?;
        let draws = tail_draws(density, table, &cov, n, plan.replications, plan.seed.wrapping_add(case as u64))?;
        let scale = n as f64 * (-1.5 * j as f64).exp2();
        let diag: Vec<f64> = draws.iter().map(|d| d.diag).collect();
        let canon: Vec<f64> = draws.iter().map(|d| d.canonical).collect();
        let win: Vec<f64> = draws.iter().map(|d| d.window).collect();
        let inputs = glz_constants(density, &cov.majorant, j, n, n, window)?;
        if glz_l.is_none() {
            let targets: Vec<(f64, f64)> = plan.taus.iter().map(|&t| (t * scale, upper_limit(frequency(&canon, t * scale), plan.replications))).collect();
            glz_l = Some(calibrate_constant(&targets, |x, l| glz_tail(&inputs, x, l)));
        }
        if kappa0.is_none() {
            let targets: Vec<(f64, f64)> = plan.taus.iter().map(|&t| (t, upper_limit(frequency(&win, t * scale), plan.replications))).collect();
            kappa0 = Some(calibrate_constant(&targets, |t, k| wn_tail_bound(t, n, j, k, f_sq)));
        }
        for &tau in &plan.taus {
            let x = tau * scale;
            rows.push(TailRow {
                statistic: TailStatistic::Diagonal,
                tau,
                bound: bernstein_diag_bound(tau, n, n, j, cov.majorant.l2_sq),
                empirical_freq: frequency(&diag, x),
                n,
                j,
            });
            rows.push(TailRow {
                statistic: TailStatistic::Canonical,
                tau,
                bound: glz_tail(&inputs, x, glz_l.unwrap_or(1.0)),
                empirical_freq: frequency(&canon, x),
                n,
                j,
            });
            rows.push(TailRow {
                statistic: TailStatistic::Window,
                tau,
                bound: wn_tail_bound(tau, n, j, kappa0.unwrap_or(1.0), f_sq),
                empirical_freq: frequency(&win, x),
                n,
                j,
            });
        }
    }
    Ok(TailComparison {
        rows,
        glz_l: glz_l.unwrap_or(1.0),
        kappa0: kappa0.unwrap_or(1.0),
        calibration_n,
    })
}

/// `H_n` and `G_n(x, y) = E H_n(X, x) H_n(X, y)` for one level.
pub trait PairMoments: Sync {
    fn h(&self, x: f64, y: f64) -> f64;
    fn g(&self, x: f64, y: f64) -> f64;
}

/// Closed forms `H = 2^-j d(x)'d(y)` and `G = 2^-2j d(x)' (B - c c') d(y)`
/// with `d(x) = phi_x - c`.
pub struct ProjectionPairs<'a> {
    table: &'a ScalingTable,
    proj: LevelProjection,
    /// `(B - c c') c`
    m_c: Vec<f64>,
    c_m_c: f64,
    c_sq: f64,
}

impl<'a> ProjectionPairs<'a> {
    pub fn new(density: &DensityModel, table: &'a ScalingTable, j: u32) -> Result<ProjectionPairs<'a>> {
        let proj = projection_mean(density, table, j, QuadSpec::exact(table))?;
        let nk = proj.c.len();
        let c_total = proj.c_sq_sum();
        let m_c: Vec<f64> = (0..nk)
            .map(|a| {
                let k = proj.k_lo + a as i64;
                let banded: f64 = (k - table.support_radius..=k + table.support_radius).map(|l| proj.b_at(k, l) * proj.c_at(l)).sum();
                banded - proj.c[a] * c_total
            })
            .collect();
        let c_m_c = proj.c.iter().zip(&m_c).map(|(a, b)| a * b).sum();
        Ok(ProjectionPairs { table, c_sq: c_total, proj, m_c, c_m_c })
    }

    fn active(&self, x: f64) -> Vec<(i64, f64)> {
        let t = self.table;
        let i = sample_index(t, self.proj.level, x);
        let s = t.scale();
        t.active_shifts(i).map(|k| (k, t.phi_at(i - k * s))).filter(|p| p.1 != 0.0).collect()
    }

    fn m_c_at(&self, k: i64) -> f64 {
        let off = k - self.proj.k_lo;
        if off >= 0 && (off as usize) < self.m_c.len() {
            self.m_c[off as usize]
        } else {
            0.0
        }
    }
}

impl PairMoments for ProjectionPairs<'_> {
    fn h(&self, x: f64, y: f64) -> f64 {
        let (ax, ay) = (self.active(x), self.active(y));
        let mut k_xy = 0.0;
        for &(k, v) in &ax {
            for &(l, w) in &ay {
                if k == l {
                    k_xy += v * w;
                }
            }
        }
        let gx: f64 = ax.iter().map(|&(k, v)| v * self.proj.c_at(k)).sum();
        let gy: f64 = ay.iter().map(|&(k, v)| v * self.proj.c_at(k)).sum();
        (-(self.proj.level as f64)).exp2() * (k_xy - gx - gy + self.c_sq)
    }

    fn g(&self, x: f64, y: f64) -> f64 {
        let (ax, ay) = (self.active(x), self.active(y));
        let mut quad = 0.0;
        for &(k, v) in &ax {
            for &(l, w) in &ay {
                quad += v * w * self.proj.b_at(k, l);
            }
        }
        let cx: f64 = ax.iter().map(|&(k, v)| v * self.proj.c_at(k)).sum();
        let cy: f64 = ay.iter().map(|&(k, v)| v * self.proj.c_at(k)).sum();
        let mcx: f64 = ax.iter().map(|&(k, v)| v * self.m_c_at(k)).sum();
        let mcy: f64 = ay.iter().map(|&(k, v)| v * self.m_c_at(k)).sum();
        let phi_m_phi = quad - cx * cy;
        (-(2.0 * self.proj.level as f64)).exp2() * (phi_m_phi - mcx - mcy + self.c_m_c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub level: u32,
    pub h4: f64,
    pub h4_se: f64,
    pub g2: f64,
    pub g2_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub rows: Vec<MomentRow>,
    /// Slope of `log2 E H^4` against `j`.
    pub h4_slope: f64,
    pub h4_slope_se: f64,
    pub g2_slope: f64,
    pub g2_slope_se: f64,
}

impl ScalingReport {
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["j", "h4", "h4_se", "g2", "g2_se"])?;
        for r in &self.rows {
            w.write_record([r.level.to_string(), format!("{:e}", r.h4), format!("{:e}", r.h4_se), format!("{:e}", r.g2), format!("{:e}", r.g2_se)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Monte Carlo `E H^4(X1, X2)` and `E G^2(X1, X2)` over `pairs` pairs per level.
pub fn moment_probe<P: PairMoments>(density: &DensityModel, kernels: &[(u32, P)], pairs: usize, seed: u64) -> Result<ScalingReport> {
    if kernels.len() < 3 {
        return Err(Error::Config(format!("moment scaling needs at least 3 levels, got {}", kernels.len())));
    }
    let mut rows = Vec::with_capacity(kernels.len());
    for (j, kernel) in kernels {
        let s = density.sample_stream(2 * pairs, seed, *j as u64)?;
        let (h4, g2): (Vec<f64>, Vec<f64>) = s
            .values
            .par_chunks(2)
            .map(|p| {
                let h = kernel.h(p[0], p[1]);
                let g = kernel.g(p[0], p[1]);
                (h.powi(4), g * g)
            })
            .unzip();
        let (h4m, h4se) = mean_se(&h4);
        let (g2m, g2se) = mean_se(&g2);
        rows.push(MomentRow { level: *j, h4: h4m, h4_se: h4se, g2: g2m, g2_se: g2se });
    }
    let js: Vec<f64> = rows.iter().map(|r| r.level as f64).collect();
    let fit = |vals: Vec<f64>| {
        if vals.iter().all(|&v| v > 0.0) {
            linear_fit(&js, &vals.iter().map(|v| v.log2()).collect::<Vec<_>>())
        } else {
            crate::stats::LinearFit { slope: f64::NAN, intercept: f64::NAN, slope_se: f64::NAN }
        }
    };
    let h = fit(rows.iter().map(|r| r.h4).collect());
    let g = fit(rows.iter().map(|r| r.g2).collect());
    Ok(ScalingReport { rows, h4_slope: h.slope, h4_slope_se: h.slope_se, g2_slope: g.slope, g2_slope_se: g.slope_se })
}

pub fn moment_scaling_probe(density: &DensityModel, table: &ScalingTable, levels: &[u32], pairs: usize, seed: u64) -> Result<ScalingReport> {
    let kernels = levels.iter().map(|&j| Ok((j, ProjectionPairs::new(density, table, j)?))).collect::<Result<Vec<_>>>()?;
    moment_probe(density, &kernels, pairs, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::make_density;
    use crate::ise::hn_eval;
    use crate::wavelet::{cascade, make_filter, make_majorant, Family};
    use approx::assert_abs_diff_eq;

    fn haar() -> ScalingTable {
        cascade(&make_filter(Family::Haar, 1).unwrap(), 2).unwrap()
    }

    fn uniform() -> DensityModel {
        make_density("uniform", &[0.0, 1.0]).unwrap()
    }

    #[test]
    fn haar_constants() {
        let t = haar();
        let m = make_majorant(&t);
        assert_abs_diff_eq!(m.l2_sq, 2.0, epsilon = 1e-15);
        let c = glz_constants(&uniform(), &m, 3, 100, 100, (-1.0, 2.0)).unwrap();
        assert_abs_diff_eq!(c.a_const, 1.0, epsilon = 1e-15);
        let c2 = glz_constants(&uniform(), &m, 3, 200, 200, (-1.0, 2.0)).unwrap();
        assert_abs_diff_eq!(c2.d_const, 2.0 * c.d_const, epsilon = 1e-12);
        assert_abs_diff_eq!(c2.c_const.powi(2), 4.0 * c.c_const.powi(2), epsilon = 1e-12);
        let e = glz_constants(&uniform(), &m, 3, 100, 100, (2.0, 3.0)).unwrap_err();
        assert_eq!(e.code(), "degenerate-window");
        assert!(glz_constants(&uniform(), &m, 3, 1, 1, (0.0, 1.0)).is_err());
    }

    #[test]
    fn glz_tail_shape() {
        let t = haar();
        let c = glz_constants(&uniform(), &make_majorant(&t), 3, 100, 100, (0.0, 1.0)).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let x = 1e-3 * 1.1f64.powi(i);
            let b = glz_tail(&c, x, 3.0);
            assert!(b <= prev);
            prev = b;
        }
        assert!(prev < 1e-10);
        assert!((glz_tail(&c, 1e-14, 3.0) - 3.0).abs() < 1e-6);
        let smaller = TailBoundInputs { c_const: c.c_const * 0.5, ..c };
        assert!(glz_tail(&smaller, 5.0, 3.0) <= glz_tail(&c, 5.0, 3.0));
    }

    #[test]
    fn bernstein_plug_in() {
        // tau = 1, n = m = 1000, j = 3, Haar
        let num = 1e6 / 512.0;
        let den = 8.0 * 1000.0 / 64.0 * 4.0 + 16.0 / 3.0 * 1000.0 * 2f64.powf(-7.5) * 2.0;
        assert_abs_diff_eq!(bernstein_diag_bound(1.0, 1000, 1000, 3, 2.0), 2.0 * (-num / den).exp(), epsilon = 1e-15);
        assert!(num / den > 0.0);
        // quadratic regime: doubling tau scales the exponent by four
        let e = |tau: f64| -(bernstein_diag_bound(tau, 1_000_000, 1000, 3, 2.0) / 2.0).ln();
        assert!((e(2e-3) / e(1e-3) - 4.0).abs() < 1e-3);
    }

    #[test]
    fn lil_branch_is_the_quadratic_term() {
        let n = 1_000_000;
        let eta = 1.5;
        let tau = eta * (n as f64).ln().ln().sqrt();
        assert_abs_diff_eq!(wn_tail_bound(tau, n, 4, 2.0, 1.0), wn_tail_bound_lil(eta, n, 2.0, 1.0), epsilon = 1e-15);
    }

    #[test]
    fn calibration_is_minimal() {
        let b = |x: f64, l: f64| l * (-x / l).exp();
        let l = calibrate_constant(&[(1.0, 0.5), (2.0, 0.3)], b);
        assert!(b(1.0, l) >= 0.5 && b(2.0, l) >= 0.3);
        assert!(b(1.0, l * 0.999) < 0.5 || b(2.0, l * 0.999) < 0.3);
        assert_eq!(calibrate_constant(&[(5.0, 0.0)], b), 1.0);
    }

    #[test]
    fn closed_forms_match_direct() {
        let t = cascade(&make_filter(Family::Daubechies, 2).unwrap(), 8).unwrap();
        let d = make_density("gaussian", &[0.0, 1.0]).unwrap();
        let pp = ProjectionPairs::new(&d, &t, 2).unwrap();
        let proj = projection_mean(&d, &t, 2, QuadSpec::exact(&t)).unwrap();
        for (x, y) in [(0.1, 0.3), (-1.0, 0.7), (2.2, 2.25)] {
            assert_abs_diff_eq!(pp.h(x, y), hn_eval(&proj, &t, x, y), epsilon = 1e-13);
        }
        // G by Monte Carlo over X
        let s = d.sample_stream(200_000, 3, 0).unwrap();
        let (x, y) = (0.2, 0.5);
        let mc = s.values.iter().map(|&v| pp.h(v, x) * pp.h(v, y)).sum::<f64>() / s.values.len() as f64;
        assert!((mc - pp.g(x, y)).abs() < 0.02 * pp.g(x, y).abs() + 1e-5, "{mc} vs {}", pp.g(x, y));
    }

    struct Zero;
    impl PairMoments for Zero {
        fn h(&self, _: f64, _: f64) -> f64 {
            0.0
        }
        fn g(&self, _: f64, _: f64) -> f64 {
            0.0
        }
    }

    #[test]
    fn zero_kernel_moments() {
        let r = moment_probe(&uniform(), &[(2, Zero), (3, Zero), (4, Zero)], 100, 1).unwrap();
        assert!(r.rows.iter().all(|r| r.h4 == 0.0 && r.g2 == 0.0));
        assert!(moment_probe(&uniform(), &[(2, Zero)], 10, 1).is_err());
    }

    #[test]
    fn haar_uniform_slopes() {
        let t = haar();
        let r = moment_scaling_probe(&uniform(), &t, &[2, 3, 4, 5, 6], 10_000, 5).unwrap();
        assert!((r.h4_slope + 5.0).abs() <= 0.5, "{r:?}");
        assert!((r.g2_slope + 7.0).abs() <= 0.5, "{r:?}");
    }
}
