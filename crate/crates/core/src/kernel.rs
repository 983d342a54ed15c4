//! The projection kernel `K(x, y) = sum_k phi(x - k) phi(y - k)` and its identities.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::density::DensityModel;
use crate::error::{Error, Result};
use crate::quadrature::KahanSum;
use crate::rng::{open_unit, stream};
use crate::wavelet::{make_majorant, ScalingTable};

/// Sub-level `q` of a quadrature grid: x-step `2^-(j+q)` at level `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadSpec {
    pub sub_level: u32,
}

impl QuadSpec {
    /// The finest grid the table resolves.
    pub fn exact(table: &ScalingTable) -> QuadSpec {
        QuadSpec {
            sub_level: table.resolution,
        }
    }

    /// Effective sub-level, capped at the table resolution.
    pub fn resolve(&self, table: &ScalingTable) -> Result<u32> {
        if self.sub_level < 2 {
            return Err(Error::QuadratureTooCoarse {
                sub_level: self.sub_level,
            });
        }
        Ok(self.sub_level.min(table.resolution))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct KernelEvaluator<'a> {
    pub table: &'a ScalingTable,
    pub support_radius: i64,
}

impl<'a> KernelEvaluator<'a> {
    pub fn new(table: &'a ScalingTable) -> KernelEvaluator<'a> {
        KernelEvaluator {
            table,
            support_radius: table.support_radius,
        }
    }

    /// `K` at table grid indices; the sum over `k` runs in ascending order so
    /// that `K(x, y)` and `K(y, x)` are bitwise equal.
    #[inline]
    pub fn at_indices(&self, ix: i64, iy: i64) -> f64 {
        let t = self.table;
        let s = t.scale();
        let a = t.active_shifts(ix);
        let b = t.active_shifts(iy);
        let lo = *a.start().max(b.start());
        let hi = *a.end().min(b.end());
        let mut acc = 0.0;
        for k in lo..=hi {
            acc += t.phi_at(ix - k * s) * t.phi_at(iy - k * s);
        }
        acc
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        self.at_indices(self.table.grid_index(x), self.table.grid_index(y))
    }
}

pub fn kernel_eval(evaluator: &KernelEvaluator<'_>, x: f64, y: f64) -> f64 {
    evaluator.eval(x, y)
}

/// `c_k = int phi(2^j y - k) f(y) dy` for `k` in `[k_lo, k_hi]`, from exact
/// cell masses on the grid of step `2^-(j+q)`.
pub fn shift_integrals(table: &ScalingTable, density: &DensityModel, j: u32, q: u32, k_lo: i64, k_hi: i64) -> Vec<f64> {
    let step = 1i64 << (table.resolution - q);
    let cells_per_unit = 1i64 << q;
    let h = (-((j + q) as f64)).exp2();
    let span = table.support_radius * cells_per_unit;
    (k_lo..=k_hi)
        .map(|k| {
            let mut acc = KahanSum::default();
            for i in 0..span {
                let v = table.phi_at(i * step);
                if v != 0.0 {
                    let m = k * cells_per_unit + i;
                    acc.add(v * density.mass(m as f64 * h, (m + 1) as f64 * h));
                }
            }
            acc.total()
        })
        .collect()
}

/// `K(2^j t, 2^j x) - int K(2^j t, 2^j y) f(y) dy`.
pub fn centered_kernel_eval(
    evaluator: &KernelEvaluator<'_>,
    density: &DensityModel,
    j: u32,
    t: f64,
    x: f64,
    quad: QuadSpec,
) -> Result<f64> {
    let table = evaluator.table;
    let q = quad.resolve(table)?;
    let scale = j as f64;
    let it = table.grid_index(t * scale.exp2());
    let ix = table.grid_index(x * scale.exp2());
    let shifts = table.active_shifts(it);
    let (k_lo, k_hi) = (*shifts.start(), *shifts.end());
    let c = shift_integrals(table, density, j, q, k_lo, k_hi);
    let s = table.scale();
    let mean: f64 = (k_lo..=k_hi)
        .zip(&c)
        .map(|(k, ck)| table.phi_at(it - k * s) * ck)
        .sum();
    Ok(evaluator.at_indices(it, ix) - mean)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelGridSpec {
    /// Probe points per axis for the reproducing and periodicity checks.
    pub probes: usize,
    /// log2 of the x-nodes per unit in the reproducing integral.
    pub reproducing_level: u32,
    /// log2 of the nodes per unit for the collapsed quadruple integral.
    pub fast_level: u32,
    /// log2 of the nodes per unit for the tensor quadruple integral.
    pub brute_level: u32,
    pub majorization_pairs: usize,
    pub seed: u64,
    /// Also evaluate the tensor route.
    pub brute: bool,
}

impl KernelGridSpec {
    pub fn for_table(table: &ScalingTable) -> KernelGridSpec {
        KernelGridSpec {
            probes: 50,
            reproducing_level: table.resolution,
            fast_level: table.resolution.min(10),
            brute_level: table.resolution.min(6),
            majorization_pairs: 10_000,
            seed: 1,
            brute: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelIdentityReport {
    pub reproducing_residual: f64,
    pub periodicity_residual: f64,
    pub symmetry_residual: f64,
    pub majorization_violations: usize,
    pub majorization_pairs: usize,
    pub quadruple_integral: f64,
    pub quadruple_integral_brute: Option<f64>,
}

pub fn kernel_identity_checks(evaluator: &KernelEvaluator<'_>, spec: &KernelGridSpec) -> KernelIdentityReport {
    let table = evaluator.table;
    let a = evaluator.support_radius;
    let r = table.resolution;

    // probe points snapped to the table grid, spread over [0, A + 1)
    let probe_idx: Vec<i64> = (0..spec.probes)
        .map(|p| {
            let x = (a + 1) as f64 * (p as f64 + 0.5) / spec.probes as f64;
            table.grid_index(x)
        })
        .collect();

    let rep_level = spec.reproducing_level.min(r);
    let stride = 1i64 << (r - rep_level);
    let x_lo = -(a + 1) * table.scale();
    let x_hi = (2 * a + 2) * table.scale();
    let hx = (-(rep_level as f64)).exp2();
    let reproducing_residual = probe_idx
        .par_iter()
        .map(|&iy| {
            let ky: Vec<(i64, f64)> = (x_lo..x_hi)
                .step_by(stride as usize)
                .map(|ix| (ix, evaluator.at_indices(ix, iy)))
                .filter(|(_, v)| *v != 0.0)
                .collect();
            probe_idx
                .iter()
                .map(|&iz| {
                    let integral: f64 = ky
                        .iter()
                        .map(|&(ix, v)| v * evaluator.at_indices(ix, iz))
                        .collect::<KahanSum>()
                        .total()
                        * hx;
                    (integral - evaluator.at_indices(iy, iz)).abs()
                })
                .fold(0.0, f64::max)
        })
        .reduce(|| 0.0, f64::max);

    let s = table.scale();
    let mut periodicity_residual: f64 = 0.0;
    let mut symmetry_residual: f64 = 0.0;
    for &ix in &probe_idx {
        for &iy in &probe_idx {
            let base = evaluator.at_indices(ix, iy);
            periodicity_residual = periodicity_residual.max((evaluator.at_indices(ix + s, iy + s) - base).abs());
            symmetry_residual = symmetry_residual.max((evaluator.at_indices(iy, ix) - base).abs());
        }
    }

    let majorant = make_majorant(table);
    let mut rng = stream(spec.seed, 0);
    let span = (a + 1) as f64;
    let mut violations = 0;
    for _ in 0..spec.majorization_pairs {
        let x = -span + 2.0 * span * open_unit(&mut rng);
        let y = x + 2.0 * a as f64 * (2.0 * open_unit(&mut rng) - 1.0);
        if evaluator.eval(x, y).abs() > majorant.eval(x - y) {
            violations += 1;
        }
    }

    let quadruple_integral = quadruple_fast(evaluator, spec.fast_level.min(r));
    let quadruple_integral_brute = spec.brute.then(|| quadruple_brute(evaluator, spec.brute_level.min(r)));

    KernelIdentityReport {
        reproducing_residual,
        periodicity_residual,
        symmetry_residual,
        majorization_violations: violations,
        majorization_pairs: spec.majorization_pairs,
        quadruple_integral,
        quadruple_integral_brute,
    }
}

/// `int_0^1 int K(x, x - u)^2 du dx`, the quadruple integral after the `z`
/// and `w` integrals are collapsed by the reproducing identity.
pub fn quadruple_fast(evaluator: &KernelEvaluator<'_>, level: u32) -> f64 {
    let table = evaluator.table;
    let level = level.min(table.resolution);
    let stride = 1i64 << (table.resolution - level);
    let per_unit = 1i64 << level;
    let a = evaluator.support_radius;
    let h = (-(level as f64)).exp2();
    let total: f64 = (0..per_unit)
        .into_par_iter()
        .map(|p| {
            let ix = p * stride;
            (-2 * a * per_unit..2 * a * per_unit)
                .map(|m| {
                    let v = evaluator.at_indices(ix, ix - m * stride);
                    v * v
                })
                .collect::<KahanSum>()
                .total()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .collect::<KahanSum>()
        .total();
    total * h * h
}

/// Direct tensor quadrature of
/// `int K(x+z, x) K(x+w, x) K(x+z, x-u) K(x+w, x-u) dx du dz dw`
/// over `x in [0,1], u in [-2A, 2A], z, w in [-A, A]`; the integrand factors
/// in `(z, w)` for fixed `(x, u)`, so the `w`-sum equals the `z`-sum.
pub fn quadruple_brute(evaluator: &KernelEvaluator<'_>, level: u32) -> f64 {
    let table = evaluator.table;
    let level = level.min(table.resolution);
    let stride = 1i64 << (table.resolution - level);
    let per_unit = 1i64 << level;
    let a = evaluator.support_radius;
    let h = (-(level as f64)).exp2();
    let total: f64 = (0..per_unit)
        .into_par_iter()
        .map(|p| {
            let ix = p * stride;
            let mut acc = KahanSum::default();
            for m in -2 * a * per_unit..2 * a * per_unit {
                let iu = m * stride;
                let mut inner = KahanSum::default();
                for l in -a * per_unit..a * per_unit {
                    let iz = l * stride;
                    inner.add(evaluator.at_indices(ix + iz, ix) * evaluator.at_indices(ix + iz, ix - iu));
                }
                let zsum = inner.total() * h;
                acc.add(zsum * zsum);
            }
            acc.total()
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .collect::<KahanSum>()
        .total();
    total * h * h
}
