//! Resolution schedule, the linear estimator and its exact mean.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::kernel::{KernelEvaluator, QuadSpec};
use crate::quadrature::KahanSum;
use crate::wavelet::ScalingTable;

/// Largest `j + r` for which sample grid indices stay exact in `f64`.
pub const MAX_INDEX_BITS: u32 = 48;

/// `log lambda_k = k / ln(e + k)`.
#[inline]
pub fn log_lambda(k: u64) -> f64 {
    k as f64 / (std::f64::consts::E + k as f64).ln()
}

#[inline]
pub fn lambda(k: u64) -> f64 {
    log_lambda(k).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandwidthSchedule {
    pub delta: f64,
    /// Proportionality constant `c` in `2^-j ~ c^-1 n^-delta`.
    pub multiplier: f64,
}

pub fn make_schedule(delta: f64) -> Result<BandwidthSchedule> {
    make_schedule_with(delta, 1.0)
}

pub fn make_schedule_with(delta: f64, multiplier: f64) -> Result<BandwidthSchedule> {
    if !(delta > 0.0 && delta < 1.0 / 3.0) {
        return Err(Error::DeltaOutOfRange(delta));
    }
    if !(multiplier > 0.0 && multiplier.is_finite()) {
        return Err(Error::Config(format!("schedule multiplier must be positive, got {multiplier}")));
    }
    Ok(BandwidthSchedule { delta, multiplier })
}

impl BandwidthSchedule {
    /// Block index `k` with `lambda_k <= n < lambda_{k+1}`.
    pub fn block(&self, n: u64) -> u64 {
        let target = (n.max(1) as f64).ln();
        let (mut lo, mut hi) = (0u64, 1u64);
        while log_lambda(hi) <= target {
            lo = hi;
            hi *= 2;
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if log_lambda(mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn block_level(&self, k: u64) -> u32 {
        let raw = self.delta * log_lambda(k) / std::f64::consts::LN_2 + self.multiplier.log2();
        raw.round().max(0.0) as u32
    }

    /// `j_n`.
    pub fn level(&self, n: u64) -> u32 {
        self.block_level(self.block(n))
    }

    /// First `n` of block `k`, `ceil(lambda_k)`.
    pub fn block_start(&self, k: u64) -> u64 {
        lambda(k).ceil() as u64
    }
}

/// Raw shift sums `s_k = sum_i phi(2^j X_i - k)` held densely from `k_lo`.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSums {
    pub k_lo: i64,
    pub sums: Vec<f64>,
}

impl ShiftSums {
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

/// Grid index of `2^j x` on the table grid, guarding the index budget.
#[inline]
pub fn sample_index(table: &ScalingTable, j: u32, x: f64) -> i64 {
    (x * ((j + table.resolution) as f64).exp2()).floor() as i64
}

pub fn check_level(table: &ScalingTable, j: u32) -> Result<()> {
    if j + table.resolution > MAX_INDEX_BITS {
        return Err(Error::LevelTooFine {
            level: j,
            resolution: table.resolution,
            max: MAX_INDEX_BITS,
        });
    }
    Ok(())
}

pub fn shift_sums(table: &ScalingTable, j: u32, values: &[f64]) -> Result<ShiftSums> {
    check_level(table, j)?;
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let s = table.scale();
    let idx: Vec<i64> = values.iter().map(|&x| sample_index(table, j, x)).collect();
    let lo = idx.iter().min().copied().unwrap_or(0);
    let hi = idx.iter().max().copied().unwrap_or(0);
    let k_lo = *table.active_shifts(lo).start();
    let k_hi = *table.active_shifts(hi).end();
    let mut sums = vec![0.0; (k_hi - k_lo + 1) as usize];
    for &i in &idx {
        for k in table.active_shifts(i) {
            sums[(k - k_lo) as usize] += table.phi_at(i - k * s);
        }
    }
    Ok(ShiftSums { k_lo, sums })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityEstimate {
    pub level: u32,
    pub n: usize,
    /// `k -> hat alpha_{jk}`, nonzero entries only.
    pub coefficients: BTreeMap<i64, f64>,
    /// Evaluation grid `x_m = m 2^-(j+g)` for `m` in `grid_start..grid_start + len`.
    pub grid_sub_level: u32,
    pub grid_start: i64,
    pub grid_values: Vec<f64>,
    /// Largest difference between the coefficient and kernel forms on the grid.
    pub form_discrepancy: f64,
}

impl DensityEstimate {
    pub fn grid_x(&self, m: usize) -> f64 {
        (self.grid_start + m as i64) as f64 * (-((self.level + self.grid_sub_level) as f64)).exp2()
    }

    /// `f_{n,K}(x)` from the coefficients.
    pub fn eval(&self, table: &ScalingTable, x: f64) -> f64 {
        let i = sample_index(table, self.level, x);
        let s = table.scale();
        let scale = (self.level as f64 / 2.0).exp2();
        table
            .active_shifts(i)
            .map(|k| self.coefficients.get(&k).copied().unwrap_or(0.0) * scale * table.phi_at(i - k * s))
            .sum()
    }

    pub fn write_grid_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["x", "f_hat"])?;
        for (m, v) in self.grid_values.iter().enumerate() {
            w.write_record([self.grid_x(m).to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_coefficients_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "alpha_hat"])?;
        for (k, v) in &self.coefficients {
            w.write_record([k.to_string(), v.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Default evaluation sub-level `g`.
pub const DEFAULT_GRID_SUB_LEVEL: u32 = 6;

pub fn estimate(values: &[f64], table: &ScalingTable, j: u32) -> Result<DensityEstimate> {
    estimate_on_grid(values, table, j, DEFAULT_GRID_SUB_LEVEL)
}

/// Coefficients plus grid values in both the coefficient form
/// `sum_k hat alpha_k phi_{jk}(x)` and the kernel form `2^j/n sum_i K(2^j x, 2^j X_i)`.
pub fn estimate_on_grid(values: &[f64], table: &ScalingTable, j: u32, grid_sub_level: u32) -> Result<DensityEstimate> {
    let sums = shift_sums(table, j, values)?;
    let n = values.len();
    let g = grid_sub_level.min(table.resolution);
    let root = (j as f64 / 2.0).exp2();
    let coefficients: BTreeMap<i64, f64> = sums
        .sums
        .iter()
        .enumerate()
        .filter(|(_, &v)| v != 0.0)
        .map(|(i, &v)| (sums.k_lo + i as i64, root * v / n as f64))
        .collect();

    // grid covering every active translate
    let per_unit = 1i64 << g;
    let grid_start = sums.k_lo * per_unit;
    let grid_end = (sums.k_hi() + table.support_radius) * per_unit;
    let stride = 1i64 << (table.resolution - g);
    let s = table.scale();

    let mut sorted: Vec<i64> = values.iter().map(|&x| sample_index(table, j, x)).collect();
    sorted.sort_unstable();
    let evaluator = KernelEvaluator::new(table);
    let two_j = (j as f64).exp2();
    let reach = table.support_radius * s;

    let mut grid_values = Vec::with_capacity((grid_end - grid_start) as usize);
    let mut discrepancy: f64 = 0.0;
    for m in grid_start..grid_end {
        let ix = m * stride;
        let coef_form: f64 = table
            .active_shifts(ix)
            .map(|k| root * sums.get(k) / n as f64 * root * table.phi_at(ix - k * s))
            .sum();
        let from = sorted.partition_point(|&v| v <= ix - reach);
        let to = sorted.partition_point(|&v| v < ix + reach);
        let kernel_form = two_j / n as f64
            * sorted[from..to]
                .iter()
                .map(|&iy| evaluator.at_indices(ix, iy))
                .collect::<KahanSum>()
                .total();
        discrepancy = discrepancy.max((coef_form - kernel_form).abs());
        grid_values.push(coef_form);
    }

    Ok(DensityEstimate {
        level: j,
        n,
        coefficients,
        grid_sub_level: g,
        grid_start,
        grid_values,
        form_discrepancy: discrepancy,
    })
}

/// Exact mean of the estimator at one level: `alpha_{jk} = 2^{j/2} c_k`,
/// `c_k = int phi(2^j y - k) f(y) dy`, the banded second moments
/// `b_{kl} = int phi(2^j y - k) phi(2^j y - l) f(y) dy` and `Var phi_{jk}(X)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelProjection {
    pub density: String,
    pub density_params: String,
    pub level: u32,
    pub sub_level: u32,
    pub resolution: u32,
    pub support_radius: i64,
    pub k_lo: i64,
    pub c: Vec<f64>,
    /// `band[d][k - k_lo] = b_{k, k+d}` for `0 <= d < A`.
    pub band: Vec<Vec<f64>>,
    /// `Var(phi_{jk}(X)) = 2^j (b_kk - c_k^2)`.
    pub variances: Vec<f64>,
    /// `int phi(x) phi(x - d) dx` on the table grid, `0 <= d < A`.
    pub autocorrelation: Vec<f64>,
    pub l2_sq: f64,
}

pub type MeanProjection = LevelProjection;

pub fn projection_mean(density: &DensityModel, table: &ScalingTable, j: u32, quad: QuadSpec) -> Result<LevelProjection> {
    let q = quad.resolve(table)?;
    check_level(table, j)?;
    let a = table.support_radius;
    let per_unit = 1i64 << q;
    let cell = (-((j + q) as f64)).exp2();
    let (lo, hi) = density.support_window;
    let scale = (j as f64).exp2();
    let k_lo = (scale * lo).floor() as i64 - a;
    let k_hi = (scale * hi).ceil() as i64;
    let nk = (k_hi - k_lo + 1) as usize;

    let m_lo = k_lo * per_unit;
    let m_hi = (k_hi + a) * per_unit;
    let masses: Vec<f64> = (m_lo..m_hi)
        .map(|m| density.mass(m as f64 * cell, (m + 1) as f64 * cell))
        .collect();
    let stride = 1i64 << (table.resolution - q);
    let phi: Vec<f64> = (0..a * per_unit).map(|i| table.phi_at(i * stride)).collect();

    let mut c = vec![0.0; nk];
    let mut band = vec![vec![0.0; nk]; a as usize];
    for (kk, k) in (k_lo..=k_hi).enumerate() {
        let base = (k * per_unit - m_lo) as usize;
        let mut acc = KahanSum::default();
        for (i, &p) in phi.iter().enumerate() {
            if let Some(&w) = masses.get(base + i) {
                acc.add(p * w);
            }
        }
        c[kk] = acc.total();
        for d in 0..a as usize {
            let off = d * per_unit as usize;
            let mut acc = KahanSum::default();
            for i in off..phi.len() {
                if let Some(&w) = masses.get(base + i) {
                    acc.add(phi[i] * phi[i - off] * w);
                }
            }
            band[d][kk] = acc.total();
        }
    }
    let variances = (0..nk).map(|i| scale * (band[0][i] - c[i] * c[i])).collect();
    Ok(LevelProjection {
        density: density.name.clone(),
        density_params: serde_json::to_string(&density.spec)?,
        level: j,
        sub_level: q,
        resolution: table.resolution,
        support_radius: a,
        k_lo,
        c,
        band,
        variances,
        autocorrelation: table.autocorrelation(),
        l2_sq: density.l2_sq,
    })
}

impl LevelProjection {
    pub fn k_hi(&self) -> i64 {
        self.k_lo + self.c.len() as i64 - 1
    }

    pub fn matches(&self, density: &DensityModel, j: u32) -> bool {
        self.level == j
            && self.density == density.name
            && serde_json::to_string(&density.spec).map(|s| s == self.density_params).unwrap_or(false)
    }

    pub fn require(&self, density: &DensityModel, j: u32) -> Result<()> {
        if self.matches(density, j) {
            Ok(())
        } else {
            Err(Error::MeanProjectionRequired(format!(
                "projection is for {} at level {}, requested {} at level {j}",
                self.density, self.level, density.name
            )))
        }
    }

    #[inline]
    pub fn c_at(&self, k: i64) -> f64 {
        let i = k - self.k_lo;
        if i >= 0 && (i as usize) < self.c.len() {
            self.c[i as usize]
        } else {
            0.0
        }
    }

    /// `b_{kl}`, zero unless `|k - l| < A`.
    #[inline]
    pub fn b_at(&self, k: i64, l: i64) -> f64 {
        let (k, l) = if k <= l { (k, l) } else { (l, k) };
        let d = l - k;
        let i = k - self.k_lo;
        if d < self.support_radius && i >= 0 && (i as usize) < self.c.len() {
            self.band[d as usize][i as usize]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn alpha(&self, k: i64) -> f64 {
        (self.level as f64 / 2.0).exp2() * self.c_at(k)
    }

    /// `q = sum_k c_k^2`.
    pub fn c_sq_sum(&self) -> f64 {
        self.c.iter().map(|v| v * v).collect::<KahanSum>().total()
    }

    /// `sum_k Var(phi_{jk}(X))`.
    pub fn variance_sum(&self) -> f64 {
        self.variances.iter().copied().collect::<KahanSum>().total()
    }

    /// Gram entry `int phi_{jk} phi_{jl}` of the tabulated translates.
    #[inline]
    pub fn gram(&self, d: i64) -> f64 {
        let d = d.unsigned_abs() as usize;
        self.autocorrelation.get(d).copied().unwrap_or(0.0)
    }

    /// `E f_{n,K}(x) = 2^j sum_k c_k phi(2^j x - k)`.
    pub fn mean_at(&self, table: &ScalingTable, x: f64) -> f64 {
        self.mean_at_index(table, sample_index(table, self.level, x))
    }

    #[inline]
    pub fn mean_at_index(&self, table: &ScalingTable, i: i64) -> f64 {
        let s = table.scale();
        let scale = (self.level as f64).exp2();
        table
            .active_shifts(i)
            .map(|k| self.c_at(k) * table.phi_at(i - k * s))
            .sum::<f64>()
            * scale
    }

    /// `int (E f_{n,K} - f)^2 = int f^2 - 2 sum alpha_k^2 + sum_{k,l} alpha_k alpha_l G_{kl}`.
    pub fn bias_sq(&self) -> f64 {
        let scale = (self.level as f64).exp2();
        let a = self.support_radius;
        let mut quad = KahanSum::default();
        for (i, &ck) in self.c.iter().enumerate() {
            quad.add(ck * ck * self.gram(0));
            for d in 1..a {
                if let Some(&cl) = self.c.get(i + d as usize) {
                    quad.add(2.0 * ck * cl * self.gram(d));
                }
            }
        }
        self.l2_sq - 2.0 * scale * self.c_sq_sum() + scale * quad.total()
    }
}
