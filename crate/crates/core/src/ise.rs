//! Integrated squared error, its centred stochastic part and the degenerate
//! U-statistic decomposition `W_n = U_n + L_n`.
//!
//! With `d_k(x) = phi(2^j x - k) - c_k` the centred pair kernel is
//! `H(x, y) = 2^-j sum_k d_k(x) d_k(y)
//!          = 2^-j [K(2^j x, 2^j y) - g(x) - g(y) + q]`,
//! so every pair sum aggregates through the shift sums `s_k` in `O(n A)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::estimator::{check_level, projection_mean, sample_index, DensityEstimate, LevelProjection};
use crate::kernel::{KernelEvaluator, QuadSpec};
use crate::quadrature::KahanSum;
use crate::wavelet::ScalingTable;

/// Closed-form `H_n(x, y)`.
pub fn hn_eval(proj: &LevelProjection, table: &ScalingTable, x: f64, y: f64) -> f64 {
    let j = proj.level;
    hn_at_indices(proj, table, sample_index(table, j, x), sample_index(table, j, y))
}

#[inline]
pub fn hn_at_indices(proj: &LevelProjection, table: &ScalingTable, ix: i64, iy: i64) -> f64 {
    let k = KernelEvaluator::new(table).at_indices(ix, iy);
    let scale = (-(proj.level as f64)).exp2();
    scale * (k - mean_term(proj, table, ix) - mean_term(proj, table, iy) + proj.c_sq_sum())
}

/// `g(x) = sum_k phi(2^j x - k) c_k` at grid index `i`.
#[inline]
pub fn mean_term(proj: &LevelProjection, table: &ScalingTable, i: i64) -> f64 {
    let s = table.scale();
    table.active_shifts(i).map(|k| table.phi_at(i - k * s) * proj.c_at(k)).sum()
}

/// `int Kbar_n(t, x) Kbar_n(t, y) dt` by direct quadrature in `t` on the
/// grid of step `2^-(j+q)`.
pub fn hn_brute(proj: &LevelProjection, table: &ScalingTable, x: f64, y: f64, quad: QuadSpec) -> Result<f64> {
    let q = quad.resolve(table)?;
    let j = proj.level;
    let s = table.scale();
    let stride = 1i64 << (table.resolution - q);
    let a = table.support_radius;
    let (ix, iy) = (sample_index(table, j, x), sample_index(table, j, y));
    let lo = (proj.k_lo * s).min(ix.min(iy) - a * s).div_euclid(stride) - 1;
    let hi = ((proj.k_hi() + a) * s).max(ix.max(iy) + a * s).div_euclid(stride) + 1;
    let evaluator = KernelEvaluator::new(table);
    let total: f64 = (lo..=hi)
        .map(|m| {
            let it = m * stride;
            let g = mean_term(proj, table, it);
            (evaluator.at_indices(it, ix) - g) * (evaluator.at_indices(it, iy) - g)
        })
        .collect::<KahanSum>()
        .total();
    Ok(total * (-((j + q) as f64)).exp2())
}

/// One pass over a sample: shift sums, the diagonal `sum_i H(X_i, X_i)` and
/// the ordered pair sum `U_nn = sum_{i > i'} H(X_i, X_{i'})` by prefix sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePass {
    pub n: usize,
    pub k_lo: i64,
    pub sums: Vec<f64>,
    pub diag: f64,
    pub u_nn: f64,
    /// `sum_{i' < i} H(X_i, X_{i'})` for each `i`.
    pub prefix_pairs: Option<Vec<f64>>,
    /// `sum_i ||d(X_i)||^4`, used by the direct `s_n^2` route.
    pub diag_norm4: f64,
}

impl SamplePass {
    #[inline]
    pub fn get(&self, k: i64) -> f64 {
        let i = k - self.k_lo;
        if i >= 0 && (i as usize) < self.sums.len() {
            self.sums[i as usize]
        } else {
            0.0
        }
    }

    pub fn k_hi(&self) -> i64 {
        self.k_lo + self.sums.len() as i64 - 1
    }
}

pub fn sample_pass(values: &[f64], proj: &LevelProjection, table: &ScalingTable, keep_prefix: bool) -> Result<SamplePass> {
    let j = proj.level;
    check_level(table, j)?;
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let s = table.scale();
    let idx: Vec<i64> = values.iter().map(|&x| sample_index(table, j, x)).collect();
    let (mut lo, mut hi) = (proj.k_lo, proj.k_hi());
    for &i in &idx {
        let r = table.active_shifts(i);
        lo = lo.min(*r.start());
        hi = hi.max(*r.end());
    }
    let mut sums = vec![0.0; (hi - lo + 1) as usize];
    let q = proj.c_sq_sum();
    let scale = (-(j as f64)).exp2();
    let mut cs = 0.0;
    let mut diag = KahanSum::default();
    let mut pairs = KahanSum::default();
    let mut norm4 = KahanSum::default();
    let mut prefix = keep_prefix.then(|| Vec::with_capacity(values.len()));
    for (m, &i) in idx.iter().enumerate() {
        let m = m as f64;
        let mut dot = 0.0;
        let mut phi_sq = 0.0;
        let mut phi_c = 0.0;
        for k in table.active_shifts(i) {
            let v = table.phi_at(i - k * s);
            let ck = proj.c_at(k);
            dot += v * (sums[(k - lo) as usize] - m * ck);
            phi_sq += v * v;
            phi_c += v * ck;
        }
        let pair = scale * (dot - (cs - m * q));
        pairs.add(pair);
        if let Some(p) = prefix.as_mut() {
            p.push(pair);
        }
        let dd = phi_sq - 2.0 * phi_c + q;
        diag.add(scale * dd);
        norm4.add(dd * dd);
        for k in table.active_shifts(i) {
            let v = table.phi_at(i - k * s);
            sums[(k - lo) as usize] += v;
            cs += v * proj.c_at(k);
        }
    }
    Ok(SamplePass {
        n: values.len(),
        k_lo: lo,
        sums,
        diag: diag.total(),
        u_nn: pairs.total(),
        prefix_pairs: prefix,
        diag_norm4: norm4.total(),
    })
}

/// Quadrature data for `I_n` and `E I_n` on the cell grid of step `2^-(j+q)`.
#[derive(Debug, Clone)]
pub struct IseContext<'a> {
    pub table: &'a ScalingTable,
    pub projection: LevelProjection,
    pub density: DensityModel,
    /// `sigma = sqrt(2 int f^2)`.
    pub sigma: f64,
    cell_lo: i64,
    masses: Vec<f64>,
    mean_grid: Vec<f64>,
    /// `int 2^{2j} phi_x' b phi_x dx`
    second_moment_int: f64,
    mean_sq_int: f64,
    mean_f_int: f64,
}

impl<'a> IseContext<'a> {
    pub fn new(density: &DensityModel, table: &'a ScalingTable, j: u32, quad: QuadSpec) -> Result<IseContext<'a>> {
        let projection = projection_mean(density, table, j, quad)?;
        Self::from_projection(density, table, projection)
    }

    pub fn from_projection(density: &DensityModel, table: &'a ScalingTable, projection: LevelProjection) -> Result<IseContext<'a>> {
        projection.require(density, projection.level)?;
        let j = projection.level;
        let q = projection.sub_level;
        let per_unit = 1i64 << q;
        let cell = (-((j + q) as f64)).exp2();
        let stride = 1i64 << (table.resolution - q);
        let cell_lo = projection.k_lo * per_unit;
        let cell_hi = (projection.k_hi() + table.support_radius) * per_unit;
        let s = table.scale();
        let two_j = (j as f64).exp2();
        let mut masses = Vec::with_capacity((cell_hi - cell_lo) as usize);
        let mut mean_grid = Vec::with_capacity(masses.capacity());
        let mut second = KahanSum::default();
        let mut mean_sq = KahanSum::default();
        let mut mean_f = KahanSum::default();
        for m in cell_lo..cell_hi {
            let w = density.mass(m as f64 * cell, (m + 1) as f64 * cell);
            let i = m * stride;
            let shifts = table.active_shifts(i);
            let mut mean = 0.0;
            let mut quad_form = 0.0;
            for k in shifts.clone() {
                let pk = table.phi_at(i - k * s);
                mean += pk * projection.c_at(k);
                for l in shifts.clone() {
                    quad_form += pk * table.phi_at(i - l * s) * projection.b_at(k, l);
                }
            }
            let mean = two_j * mean;
            second.add(two_j * two_j * quad_form);
            mean_sq.add(mean * mean);
            mean_f.add(mean * w);
            masses.push(w);
            mean_grid.push(mean);
        }
        Ok(IseContext {
            table,
            sigma: (2.0 * density.l2_sq).sqrt(),
            density: density.clone(),
            projection,
            cell_lo,
            masses,
            mean_grid,
            second_moment_int: second.total() * cell,
            mean_sq_int: mean_sq.total() * cell,
            mean_f_int: mean_f.total(),
        })
    }

    fn cell(&self) -> f64 {
        (-((self.projection.level + self.projection.sub_level) as f64)).exp2()
    }

    /// `E I_n` by quadrature.
    pub fn expected_ise(&self, n: usize) -> f64 {
        let var_int = (self.second_moment_int - self.mean_sq_int) / n as f64;
        var_int + self.mean_sq_int - 2.0 * self.mean_f_int + self.density.l2_sq
    }

    /// `I_n = int (f_{n,K} - f)^2` by quadrature, from raw shift sums.
    pub fn ise_quadrature(&self, sums: &dyn Fn(i64) -> f64, k_range: (i64, i64), n: usize) -> f64 {
        let table = self.table;
        let j = self.projection.level;
        let q = self.projection.sub_level;
        let per_unit = 1i64 << q;
        let stride = 1i64 << (table.resolution - q);
        let s = table.scale();
        let factor = (j as f64).exp2() / n as f64;
        let cell = self.cell();
        let lo = (k_range.0 * per_unit).min(self.cell_lo);
        let hi = ((k_range.1 + table.support_radius) * per_unit).max(self.cell_lo + self.masses.len() as i64);
        let mut sq = KahanSum::default();
        let mut cross = KahanSum::default();
        for m in lo..hi {
            let i = m * stride;
            let fn_val: f64 = factor * table.active_shifts(i).map(|k| sums(k) * table.phi_at(i - k * s)).sum::<f64>();
            if fn_val == 0.0 {
                continue;
            }
            let off = m - self.cell_lo;
            let w = if off >= 0 && (off as usize) < self.masses.len() {
                self.masses[off as usize]
            } else {
                self.density.mass(m as f64 * cell, (m + 1) as f64 * cell)
            };
            sq.add(fn_val * fn_val);
            cross.add(fn_val * w);
        }
        sq.total() * cell - 2.0 * cross.total() + self.density.l2_sq
    }

    /// Mean function on the quadrature grid.
    pub fn mean_grid(&self) -> (i64, &[f64]) {
        (self.cell_lo, &self.mean_grid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IseRoute {
    /// Parseval in the level-`j` span plus the bias term.
    Coefficient,
    /// Grid quadrature of `(f_{n,K} - f)^2`.
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IseBreakdown {
    pub n: usize,
    pub level: u32,
    pub i_n: f64,
    pub expected_i_n: f64,
    /// `I_n - E I_n`.
    pub j_n_stat: f64,
    /// `||f_n - E f_n||^2 - E ||f_n - E f_n||^2`.
    pub jbar: f64,
    pub w_n: f64,
    pub u_n: f64,
    pub l_n: f64,
    pub t_n: f64,
    /// `|jbar - 2^{2j} w_n / n^2|` relative to the scale of `jbar`'s terms.
    pub identity_residual: f64,
}

/// `I_n` by both routes for a stored estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IseRoutes {
    pub quadrature: f64,
    pub coefficient: f64,
}

pub fn ise(estimate: &DensityEstimate, ctx: &IseContext<'_>) -> Result<IseRoutes> {
    ctx.projection.require(&ctx.density, estimate.level)?;
    let root = (estimate.level as f64 / 2.0).exp2();
    let n = estimate.n as f64;
    let lookup = |k: i64| estimate.coefficients.get(&k).copied().unwrap_or(0.0) * n / root;
    let (k_lo, k_hi) = match (estimate.coefficients.keys().next(), estimate.coefficients.keys().last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (ctx.projection.k_lo, ctx.projection.k_lo),
    };
    let quadrature = ctx.ise_quadrature(&lookup, (k_lo, k_hi), estimate.n);
    let proj = &ctx.projection;
    let lo = k_lo.min(proj.k_lo);
    let hi = k_hi.max(proj.k_hi());
    let parseval: f64 = (lo..=hi)
        .map(|k| {
            let d = estimate.coefficients.get(&k).copied().unwrap_or(0.0) - proj.alpha(k);
            d * d
        })
        .collect::<KahanSum>()
        .total();
    Ok(IseRoutes {
        quadrature,
        coefficient: parseval + proj.bias_sq(),
    })
}

/// All `I_n`/`J_n` quantities for one sample.
pub fn jbar_statistic(values: &[f64], density: &DensityModel, j: u32, ctx: &IseContext<'_>, route: IseRoute) -> Result<IseBreakdown> {
    let proj = &ctx.projection;
    proj.require(density, j)?;
    let table = ctx.table;
    let pass = sample_pass(values, proj, table, false)?;
    Ok(breakdown_from_pass(&pass, ctx, route))
}

pub fn breakdown_from_pass(pass: &SamplePass, ctx: &IseContext<'_>, route: IseRoute) -> IseBreakdown {
    let proj = &ctx.projection;
    let j = proj.level;
    let n = pass.n;
    let nf = n as f64;
    let two_j = (j as f64).exp2();
    let root = two_j.sqrt();

    let lo = pass.k_lo.min(proj.k_lo);
    let hi = pass.k_hi().max(proj.k_hi());
    let parseval = (lo..=hi)
        .map(|k| {
            let d = root * (pass.get(k) / nf - proj.c_at(k));
            d * d
        })
        .collect::<KahanSum>()
        .total();
    let expected_parseval = proj.variance_sum() / nf;
    let jbar = parseval - expected_parseval;

    let e_h_diag = proj.variance_sum() / (two_j * two_j);
    let u_n = 2.0 * pass.u_nn;
    let l_n = pass.diag - nf * e_h_diag;
    let w_n = u_n + l_n;
    let scale_ref = parseval.abs().max(expected_parseval).max(f64::MIN_POSITIVE);
    let identity_residual = (jbar - two_j * two_j * w_n / (nf * nf)).abs() / scale_ref;

    let (i_n, expected_i_n) = match route {
        IseRoute::Coefficient => {
            let bias = proj.bias_sq();
            (parseval + bias, expected_parseval + bias)
        }
        IseRoute::Quadrature => {
            let sums = |k: i64| pass.get(k);
            (ctx.ise_quadrature(&sums, (pass.k_lo, pass.k_hi()), n), ctx.expected_ise(n))
        }
    };
    IseBreakdown {
        n,
        level: j,
        i_n,
        expected_i_n,
        j_n_stat: i_n - expected_i_n,
        jbar,
        w_n,
        u_n,
        l_n,
        t_n: nf * jbar / (root * ctx.sigma),
        identity_residual,
    }
}

/// `sum_{i != i'} H(X_i, X_{i'})` and `sum_i H(X_i, X_i)` by the pair loop.
pub fn pair_loop(values: &[f64], proj: &LevelProjection, table: &ScalingTable) -> (f64, f64) {
    let j = proj.level;
    let idx: Vec<i64> = values.iter().map(|&x| sample_index(table, j, x)).collect();
    let mut off = KahanSum::default();
    let mut diag = KahanSum::default();
    for (a, &ia) in idx.iter().enumerate() {
        diag.add(hn_at_indices(proj, table, ia, ia));
        for &ib in &idx[..a] {
            off.add(2.0 * hn_at_indices(proj, table, ia, ib));
        }
    }
    (off.total(), diag.total())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleDecomposition {
    pub n: usize,
    pub level: u32,
    /// `2^j ||b - c c'||_F^2`, the closed-form value of `2^j int int R_n^2`.
    pub e_n_sq: f64,
    /// `n(n-1)/2 2^{-3j} e_n^2`.
    pub s_n_sq: f64,
    /// `sum_{i > i'} H(X_i, X_{i'})^2` for this sample, an unbiased estimate of `s_n^2`.
    pub s_n_sq_direct: f64,
    pub u_nn: f64,
    pub x_ni: Vec<f64>,
    pub s_nn: f64,
}

/// `e_n^2 = 2^j sum_{k,l} (b_kl - c_k c_l)^2`.
pub fn e_n_sq(proj: &LevelProjection) -> f64 {
    let nk = proj.c.len();
    let mut acc = KahanSum::default();
    for a in 0..nk {
        for b in 0..nk {
            let (k, l) = (proj.k_lo + a as i64, proj.k_lo + b as i64);
            let m = proj.b_at(k, l) - proj.c[a] * proj.c[b];
            acc.add(m * m);
        }
    }
    (proj.level as f64).exp2() * acc.total()
}

pub fn martingale_decompose(values: &[f64], density: &DensityModel, table: &ScalingTable, j: u32, proj: &LevelProjection) -> Result<MartingaleDecomposition> {
    if values.len() < 2 {
        return Err(Error::NeedTwoPoints(values.len()));
    }
    proj.require(density, j)?;
    let pass = sample_pass(values, proj, table, true)?;
    let n = values.len();
    let e_sq = e_n_sq(proj);
    let s_n_sq = n as f64 * (n as f64 - 1.0) / 2.0 * (-(3.0 * j as f64)).exp2() * e_sq;
    let s_n = s_n_sq.sqrt();
    let x_ni: Vec<f64> = pass.prefix_pairs.as_ref().map(|p| p.iter().map(|v| v / s_n).collect()).unwrap_or_default();
    let s_nn = x_ni.iter().copied().collect::<KahanSum>().total();
    let s_n_sq_direct = pair_square_sum(values, proj, table, &pass);
    Ok(MartingaleDecomposition {
        n,
        level: j,
        e_n_sq: e_sq,
        s_n_sq,
        s_n_sq_direct,
        u_nn: pass.u_nn,
        x_ni,
        s_nn,
    })
}

/// `sum_{i > i'} H(X_i, X_{i'})^2 = (||D'D||_F^2 - sum_i ||d_i||^4) 2^{-2j} / 2`
/// with `D'D = P - s c' - c s' + n c c'` and `P = sum_i phi_i phi_i'` banded.
fn pair_square_sum(values: &[f64], proj: &LevelProjection, table: &ScalingTable, pass: &SamplePass) -> f64 {
    let j = proj.level;
    let a = table.support_radius;
    let s = table.scale();
    let lo = pass.k_lo;
    let nk = pass.sums.len();
    let mut band = vec![vec![0.0; nk]; a as usize + 1];
    for &x in values {
        let i = sample_index(table, j, x);
        let shifts: Vec<(i64, f64)> = table.active_shifts(i).map(|k| (k, table.phi_at(i - k * s))).collect();
        for &(k, vk) in &shifts {
            for &(l, vl) in &shifts {
                if l >= k {
                    band[(l - k) as usize][(k - lo) as usize] += vk * vl;
                }
            }
        }
    }
    let nf = pass.n as f64;
    let c: Vec<f64> = (0..nk).map(|i| proj.c_at(lo + i as i64)).collect();
    let frob: f64 = (0..nk)
        .into_par_iter()
        .map(|p| {
            let mut acc = KahanSum::default();
            for r in 0..nk {
                let d = p.abs_diff(r);
                let banded = if d <= a as usize { band[d][p.min(r)] } else { 0.0 };
                let v = banded - pass.sums[p] * c[r] - c[p] * pass.sums[r] + nf * c[p] * c[r];
                acc.add(v * v);
            }
            acc.total()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .collect::<KahanSum>()
        .total();
    0.5 * (frob - pass.diag_norm4) * (-(2.0 * j as f64)).exp2()
}

/// Monte Carlo estimate of `E U_nn^2` over `replications` seeded samples,
/// with its standard error.
pub fn u_nn_second_moment(density: &DensityModel, table: &ScalingTable, proj: &LevelProjection, n: usize, replications: usize, seed: u64) -> Result<(f64, f64)> {
    let vals: Vec<f64> = (0..replications as u64)
        .into_par_iter()
        .map(|r| -> Result<f64> {
            let s = density.sample_stream(n, seed, r)?;
            let pass = sample_pass(&s.values, proj, table, false)?;
            Ok(pass.u_nn * pass.u_nn)
        })
        .collect::<Result<Vec<f64>>>()?;
    let m = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() as f64 - 1.0).max(1.0);
    Ok((m, (var / vals.len() as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density::make_density;
    use crate::estimator::estimate;
    use crate::wavelet::{cascade, make_filter, make_majorant, Family};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn haar(r: u32) -> ScalingTable {
        cascade(&make_filter(Family::Haar, 1).unwrap(), r).unwrap()
    }

    fn db2(r: u32) -> ScalingTable {
        cascade(&make_filter(Family::Daubechies, 2).unwrap(), r).unwrap()
    }

    #[test]
    fn haar_uniform_hn_values() {
        let t = haar(4);
        let u = make_density("uniform", &[0.0, 1.0]).unwrap();
        let p = projection_mean(&u, &t, 1, QuadSpec::exact(&t)).unwrap();
        assert_abs_diff_eq!(hn_eval(&p, &t, 0.1, 0.2), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(hn_eval(&p, &t, 0.1, 0.6), -0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(hn_brute(&p, &t, 0.1, 0.2, QuadSpec::exact(&t)).unwrap(), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(hn_brute(&p, &t, 0.1, 0.6, QuadSpec::exact(&t)).unwrap(), -0.25, epsilon = 1e-15);
    }

    #[test]
    fn brute_hn_matches_closed_form_for_db2() {
        let t = db2(10);
        let g = make_density("gaussian", &[0.0, 1.0]).unwrap();
        let p = projection_mean(&g, &t, 2, QuadSpec::exact(&t)).unwrap();
        for (x, y) in [(0.1, 0.2), (-0.7, 0.4), (1.3, 1.31), (0.0, 2.0)] {
            let closed = hn_eval(&p, &t, x, y);
            let brute = hn_brute(&p, &t, x, y, QuadSpec::exact(&t)).unwrap();
            assert!((closed - brute).abs() < 1e-4, "({x},{y}): {closed} vs {brute}");
        }
    }

    #[test]
    fn haar_uniform_ise_examples() {
        let t = haar(3);
        let u = make_density("uniform", &[0.0, 1.0]).unwrap();
        let ctx = IseContext::new(&u, &t, 1, QuadSpec::exact(&t)).unwrap();
        let e = estimate(&[0.1, 0.6], &t, 1).unwrap();
        let routes = ise(&e, &ctx).unwrap();
        assert_eq!(routes.quadrature, 0.0);
        assert_eq!(routes.coefficient, 0.0);
        let e = estimate(&[0.1, 0.2, 0.7], &t, 1).unwrap();
        let routes = ise(&e, &ctx).unwrap();
        // heights 4/3 and 2/3 on the two bins
        assert_abs_diff_eq!(routes.quadrature, 1.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(routes.coefficient, 1.0 / 9.0, epsilon = 1e-15);
    }

    #[test]
    fn identity_haar_uniform_is_exact() {
        let t = haar(0);
        let u = make_density("uniform", &[0.0, 1.0]).unwrap();
        let ctx = IseContext::new(&u, &t, 2, QuadSpec { sub_level: 2 }).unwrap();
        for r in 0..20 {
            let s = u.sample_stream(1024, 5, r).unwrap();
            let b = jbar_statistic(&s.values, &u, 2, &ctx, IseRoute::Quadrature).unwrap();
            assert!((b.j_n_stat - b.jbar).abs() <= 1e-10, "{b:?}");
            assert!(b.identity_residual <= 1e-12);
            assert_eq!(b.w_n, b.u_n + b.l_n);
            assert!(b.i_n >= 0.0);
        }
    }

    #[test]
    fn identity_db2_gaussian() {
        let t = db2(12);
        let g = make_density("gaussian", &[0.0, 1.0]).unwrap();
        let ctx = IseContext::new(&g, &t, 2, QuadSpec::exact(&t)).unwrap();
        for r in 0..5 {
            let s = g.sample_stream(1024, 9, r).unwrap();
            let b = jbar_statistic(&s.values, &g, 2, &ctx, IseRoute::Quadrature).unwrap();
            assert!((b.j_n_stat - b.jbar).abs() <= 1e-4, "{b:?}");
            assert!(b.identity_residual <= 1e-12);
        }
    }

    #[test]
    fn single_point_has_no_pairs() {
        let t = db2(8);
        let g = make_density("gaussian", &[0.0, 1.0]).unwrap();
        let ctx = IseContext::new(&g, &t, 1, QuadSpec::exact(&t)).unwrap();
        let b = jbar_statistic(&[0.3], &g, 1, &ctx, IseRoute::Coefficient).unwrap();
        assert_eq!(b.u_n, 0.0);
        assert_eq!(b.w_n, b.l_n);
    }

    #[test]
    fn mismatched_projection_is_reported() {
        let t = haar(2);
        let u = make_density("uniform", &[0.0, 1.0]).unwrap();
        let ctx = IseContext::new(&u, &t, 2, QuadSpec { sub_level: 2 }).unwrap();
        let e = jbar_statistic(&[0.3, 0.4], &u, 3, &ctx, IseRoute::Coefficient).unwrap_err();
        assert_eq!(e.code(), "mean-projection-required");
    }

    #[test]
    fn fast_path_matches_pair_loop() {
        let t = haar(3);
        let u = make_density("uniform", &[0.0, 1.0]).unwrap();
        for j in [1u32, 3, 5] {
            let p = projection_mean(&u, &t, j, QuadSpec { sub_level: 3 }).unwrap();
            for n in [2usize, 17, 256] {
                let s = u.sample_stream(n, 3, j as u64).unwrap();
                let pass = sample_pass(&s.values, &p, &t, false).unwrap();
                let (off, diag) = pair_loop(&s.values, &p, &t);
                assert!((2.0 * pass.u_nn - off).abs() <= 1e-12 * off.abs().max(1.0), "j={j} n={n}");
                assert!((pass.diag - diag).abs() <= 1e-12 * diag.abs().max(1.0));
            }
        }
    }

    #[test]
    fn fast_path_matches_pair_loop_db3() {
        let t = cascade(&make_filter(Family::Daubechies, 3).unwrap(), 8).unwrap();
        let l = make_density("laplace", &[0.0, 1.0]).unwrap();
        let p = projection_mean(&l, &t, 2, QuadSpec::exact(&t)).unwrap();
        let s = l.sample_stream(120, 1, 0).unwrap();
        let pass = sample_pass(&s.values, &p, &t, false).unwrap();
        let (off, diag) = pair_loop(&s.values, &p, &t);
        assert!((2.0 * pass.u_nn - off).abs() <= 1e-10);
        assert!((pass.diag - diag).abs() <= 1e-10);
    }

    #[test]
    fn martingale_haar_uniform() {
        let t = haar(0);
        let u = make_density("uniform", &[0.0, 1.0]).unwrap();
        for j in 1..6u32 {
            let p = projection_mean(&u, &t, j, QuadSpec { sub_level: 2 }).unwrap();
            assert_abs_diff_eq!(e_n_sq(&p), 1.0 - (-(j as f64)).exp2(), epsilon = 1e-12);
        }
        let j = 2;
        let p = projection_mean(&u, &t, j, QuadSpec { sub_level: 2 }).unwrap();
        let m = martingale_decompose(&[0.1, 0.6], &u, &t, j, &p).unwrap();
        assert_abs_diff_eq!(m.s_nn, hn_eval(&p, &t, 0.6, 0.1) / m.s_n_sq.sqrt(), epsilon = 1e-15);
        let expected = 1.0 * (-(3.0 * j as f64)).exp2() * (1.0 - 0.25);
        assert_abs_diff_eq!(m.s_n_sq, expected, epsilon = 1e-15);
        assert_eq!(martingale_decompose(&[0.1], &u, &t, j, &p).unwrap_err().code(), "need-two-points");

        let s = u.sample_stream(300, 2, 0).unwrap();
        let m = martingale_decompose(&s.values, &u, &t, j, &p).unwrap();
        assert_eq!(m.x_ni.len(), 300);
        assert!((m.s_nn - m.x_ni.iter().sum::<f64>()).abs() < 1e-12);
        // direct route: pair loop of squares
        let mut direct = 0.0;
        for a in 0..300 {
            for b in 0..a {
                direct += hn_eval(&p, &t, s.values[a], s.values[b]).powi(2);
            }
        }
        assert!((m.s_n_sq_direct - direct).abs() <= 1e-10 * direct);
    }

    #[test]
    fn centred_statistics_have_mean_zero() {
        let t = haar(0);
        let u = make_density("uniform", &[0.0, 1.0]).unwrap();
        let j = 3;
        let ctx = IseContext::new(&u, &t, j, QuadSpec { sub_level: 2 }).unwrap();
        let reps = 2000;
        let (mut jb, mut jb2, mut sn, mut sn2) = (0.0, 0.0, 0.0, 0.0);
        for r in 0..reps {
            let s = u.sample_stream(128, 21, r).unwrap();
            let b = jbar_statistic(&s.values, &u, j, &ctx, IseRoute::Coefficient).unwrap();
            jb += b.jbar;
            jb2 += b.jbar * b.jbar;
            let m = martingale_decompose(&s.values, &u, &t, j, &ctx.projection).unwrap();
            sn += m.s_nn;
            sn2 += m.s_nn * m.s_nn;
        }
        let r = reps as f64;
        for (s, s2) in [(jb, jb2), (sn, sn2)] {
            let mean = s / r;
            let se = ((s2 / r - mean * mean) / r).sqrt();
            assert!(mean.abs() <= 4.0 * se, "{mean} vs se {se}");
        }
    }

    proptest! {
        #[test]
        fn hn_is_bounded_by_majorant(x in -3.0f64..3.0, y in -3.0f64..3.0, j in 0u32..5) {
            let t = db2(8);
            let g = make_density("gaussian", &[0.0, 1.0]).unwrap();
            let p = projection_mean(&g, &t, j, QuadSpec::exact(&t)).unwrap();
            let m = make_majorant(&t);
            let bound = 4.0 * (-(j as f64)).exp2() * m.l2_sq;
            prop_assert!(hn_eval(&p, &t, x, y).abs() <= bound);
            prop_assert!(hn_eval(&p, &t, x, x) <= bound);
        }
    }
}
