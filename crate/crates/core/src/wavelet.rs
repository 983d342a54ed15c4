//! Compactly supported orthonormal scaling functions on dyadic grids.
//!
//! A [`ScalingTable`] stores `phi(i / 2^r)` and `psi(i / 2^r)` for
//! `i = 0 ..= (2N-1) 2^r`. Off-grid arguments are resolved to the grid node at
//! or below `x`, i.e. the table represents the step function
//! `phi~(x) = phi(2^-r floor(2^r x))`. For Haar this is the exact indicator of
//! `[0, 1)`; for Daubechies families the pointwise error is `O(2^{-alpha r})`
//! with `alpha` the Hölder exponent of the family.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default table resolution `r`.
pub const DEFAULT_RESOLUTION: u32 = 12;
/// Default cap on the number of `phi` entries in a table.
pub const DEFAULT_ENTRY_CAP: u64 = 1 << 26;
/// Largest supported Daubechies order.
pub const MAX_DAUBECHIES_ORDER: usize = 10;

const TABLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Haar,
    Daubechies,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Haar => "haar",
            Family::Daubechies => "daubechies",
        }
    }

    pub fn parse(s: &str) -> Option<Family> {
        match s.to_ascii_lowercase().as_str() {
            "haar" => Some(Family::Haar),
            "daubechies" | "db" => Some(Family::Daubechies),
            _ => None,
        }
    }
}

/// Low-pass filter `h_0, ..., h_{2N-1}` with `sum h = sqrt 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletFilter {
    pub family: Family,
    pub order: usize,
    pub coefficients: Vec<f64>,
}

impl WaveletFilter {
    /// Support length `2N - 1` of the scaling function.
    pub fn support_radius(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// `max_m |sum_k h_k h_{k+2m} - delta_{0m}|`.
    pub fn orthonormality_residual(&self) -> f64 {
        let h = &self.coefficients;
        let mut worst: f64 = 0.0;
        for m in 0..h.len() / 2 {
            let s: f64 = (0..h.len() - 2 * m).map(|k| h[k] * h[k + 2 * m]).sum();
            let target = if m == 0 { 1.0 } else { 0.0 };
            worst = worst.max((s - target).abs());
        }
        worst
    }
}

/// Build the low-pass filter of a family and order.
pub fn make_filter(family: Family, order: usize) -> Result<WaveletFilter> {
    let unsupported = || Error::UnsupportedOrder {
        family: family.name(),
        order,
    };
    let coefficients = match family {
        Family::Haar if order == 1 => vec![std::f64::consts::FRAC_1_SQRT_2; 2],
        Family::Haar => return Err(unsupported()),
        Family::Daubechies if (1..=MAX_DAUBECHIES_ORDER).contains(&order) => daubechies_filter(order),
        Family::Daubechies => return Err(unsupported()),
    };
    Ok(WaveletFilter {
        family,
        order,
        coefficients,
    })
}

/// Minimum-phase spectral factor of the Daubechies polynomial.
///
/// `P(y) = sum_{k<N} C(N-1+k, k) y^k` with `y = (2 - z - 1/z) / 4`; each root
/// `y_i` contributes the root `z_i` of `z + 1/z = 2 - 4 y_i` inside the unit
/// disc, and `H(z) = sqrt2 ((1+z)/2)^N prod (z - z_i)/(1 - z_i)`.
fn daubechies_filter(order: usize) -> Vec<f64> {
    let n = order;
    let p: Vec<f64> = (0..n).map(|k| binomial(n - 1 + k, k)).collect();
    let y_roots = polynomial_roots(&p);

    let mut poly = vec![Complex64::new(1.0, 0.0)];
    for _ in 0..n {
        poly = poly_mul_linear(&poly, Complex64::new(0.5, 0.0), Complex64::new(0.5, 0.0));
    }
    for y in y_roots {
        let s = Complex64::new(2.0, 0.0) - 4.0 * y;
        let disc = (s * s - 4.0).sqrt();
        let mut z = (s + disc) / 2.0;
        if z.norm() > 1.0 {
            z = (s - disc) / 2.0;
        }
        let scale = Complex64::new(1.0, 0.0) / (Complex64::new(1.0, 0.0) - z);
        // (z - z_i) / (1 - z_i), ascending powers: [-z_i, 1] * scale
        poly = poly_mul_linear(&poly, -z * scale, scale);
    }
    let mut h: Vec<f64> = poly.iter().rev().map(|c| c.re * std::f64::consts::SQRT_2).collect();
    // remove the rounding drift in the normalisation
    let sum: f64 = h.iter().sum();
    let fix = std::f64::consts::SQRT_2 / sum;
    h.iter_mut().for_each(|v| *v *= fix);
    h
}

/// `sqrt2 h_k`; exact ones for Haar so the indicator is reproduced bit for bit.
fn refinement_taps(filter: &WaveletFilter) -> Vec<f64> {
    if filter.coefficients.len() == 2 {
        vec![1.0, 1.0]
    } else {
        filter.coefficients.iter().map(|h| std::f64::consts::SQRT_2 * h).collect()
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn poly_mul_linear(p: &[Complex64], c0: Complex64, c1: Complex64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); p.len() + 1];
    for (i, &a) in p.iter().enumerate() {
        out[i] += a * c0;
        out[i + 1] += a * c1;
    }
    out
}

fn poly_eval(p: &[Complex64], x: Complex64) -> Complex64 {
    p.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &c| acc * x + c)
}

/// Roots of `sum_k p_k y^k` by Aberth iteration followed by Newton polishing.
fn polynomial_roots(p: &[f64]) -> Vec<Complex64> {
    let deg = p.len().saturating_sub(1);
    if deg == 0 {
        return Vec::new();
    }
    let lead = p[deg];
    let coeffs: Vec<Complex64> = p.iter().map(|&c| Complex64::new(c / lead, 0.0)).collect();
    let deriv: Vec<Complex64> = coeffs
        .iter()
        .enumerate()
        .skip(1)
        .map(|(k, &c)| c * k as f64)
        .collect();
    let radius = 1.0 + coeffs[..deg].iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut roots: Vec<Complex64> = (0..deg)
        .map(|k| Complex64::from_polar(radius * 0.5, 0.4 + 2.0 * std::f64::consts::PI * k as f64 / deg as f64))
        .collect();
    for _ in 0..500 {
        let mut moved: f64 = 0.0;
        for i in 0..deg {
            let zi = roots[i];
            let ratio = poly_eval(&coeffs, zi) / poly_eval(&deriv, zi);
            let repulsion: Complex64 = (0..deg)
                .filter(|&m| m != i)
                .map(|m| Complex64::new(1.0, 0.0) / (zi - roots[m]))
                .sum();
            let step = ratio / (Complex64::new(1.0, 0.0) - ratio * repulsion);
            roots[i] = zi - step;
            moved = moved.max(step.norm() / zi.norm().max(1.0));
        }
        if moved < 1e-15 {
            break;
        }
    }
    for r in roots.iter_mut() {
        for _ in 0..3 {
            let d = poly_eval(&deriv, *r);
            if d.norm() == 0.0 {
                break;
            }
            *r -= poly_eval(&coeffs, *r) / d;
        }
    }
    roots
}

/// Grid values of `phi` and `psi` with diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingTable {
    pub filter: WaveletFilter,
    pub resolution: u32,
    pub phi_values: Vec<f64>,
    pub psi_values: Vec<f64>,
    pub sup_norm: f64,
    /// Lower estimate of the total variation of `phi`, jumps at the support
    /// ends included.
    pub tv_norm: f64,
    pub theta_sup: f64,
    pub support_radius: i64,
}

/// Run the cascade with the default entry cap.
pub fn cascade(filter: &WaveletFilter, resolution: u32) -> Result<ScalingTable> {
    cascade_with_cap(filter, resolution, DEFAULT_ENTRY_CAP)
}

pub fn cascade_with_cap(filter: &WaveletFilter, resolution: u32, entry_cap: u64) -> Result<ScalingTable> {
    let support = filter.support_radius();
    let entries = (support as u64)
        .checked_shl(resolution)
        .filter(|&e| resolution < 63 && e >> resolution == support as u64)
        .map(|e| e + 1)
        .unwrap_or(u64::MAX);
    if entries > entry_cap {
        return Err(Error::ResolutionCap {
            entries,
            cap: entry_cap,
        });
    }
    let integer_values = integer_values(filter)?;
    let taps = refinement_taps(filter);
    let phi = refine(&taps, &integer_values, resolution);
    let psi = wavelet_values(&taps, &phi, resolution);
    if phi.iter().chain(psi.iter()).any(|v| !v.is_finite()) {
        return Err(Error::CascadeInit("non-finite table value".into()));
    }
    let mut table = ScalingTable {
        filter: filter.clone(),
        resolution,
        phi_values: phi,
        psi_values: psi,
        sup_norm: 0.0,
        tv_norm: 0.0,
        theta_sup: 0.0,
        support_radius: support as i64,
    };
    table.refresh_norms();
    Ok(table)
}

/// `phi(0), ..., phi(2N-1)` from the eigenvalue-one eigenvector of the
/// refinement matrix, normalised by `sum phi(k) = 1`.
fn integer_values(filter: &WaveletFilter) -> Result<Vec<f64>> {
    let h = &filter.coefficients;
    let len = h.len();
    if len == 2 {
        // the left-closed indicator: phi(0) = 1, phi(1) = 0
        let mut v = vec![0.0; len];
        v[0] = 1.0;
        return Ok(v);
    }
    // phi vanishes at 0 and 2N-1 for N >= 2; solve on the interior nodes
    let inner = len - 2;
    if inner == 0 {
        return Err(Error::CascadeInit("no interior nodes".into()));
    }
    let tap = |idx: i64| -> f64 {
        if idx >= 0 && (idx as usize) < len {
            h[idx as usize]
        } else {
            0.0
        }
    };
    let mut m = DMatrix::<f64>::zeros(inner, inner);
    for a in 0..inner {
        for b in 0..inner {
            let (x, y) = (a as i64 + 1, b as i64 + 1);
            m[(a, b)] = std::f64::consts::SQRT_2 * tap(2 * x - y) - if a == b { 1.0 } else { 0.0 };
        }
    }
    let mut rhs = DVector::<f64>::zeros(inner);
    for b in 0..inner {
        m[(inner - 1, b)] = 1.0;
    }
    rhs[inner - 1] = 1.0;
    let sol = m
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::CascadeInit("singular refinement system".into()))?;
    let mut v = vec![0.0; len];
    for a in 0..inner {
        v[a + 1] = sol[a];
    }
    let eig_residual = (0..inner)
        .map(|a| {
            let x = a as i64 + 1;
            let image: f64 = (0..inner)
                .map(|b| std::f64::consts::SQRT_2 * tap(2 * x - (b as i64 + 1)) * sol[b])
                .sum();
            (image - sol[a]).abs()
        })
        .fold(0.0, f64::max);
    if !eig_residual.is_finite() || eig_residual > 1e-9 {
        return Err(Error::CascadeInit(format!(
            "eigenvector residual {eig_residual:e}"
        )));
    }
    Ok(v)
}

fn refine(h: &[f64], integer_values: &[f64], r: u32) -> Vec<f64> {
    let support = h.len() - 1;
    let scale = 1usize << r;
    let n = support * scale + 1;
    let mut phi = vec![0.0; n];
    for (k, &v) in integer_values.iter().enumerate() {
        phi[k * scale] = v;
    }
    for level in 1..=r {
        let stride = 1usize << (r - level);
        let mut i = stride;
        while i < n {
            phi[i] = two_scale(h, &phi, i as i64, scale as i64);
            i += 2 * stride;
        }
    }
    phi
}

#[inline]
fn two_scale(h: &[f64], phi: &[f64], i: i64, scale: i64) -> f64 {
    let mut s = 0.0;
    for (k, &hk) in h.iter().enumerate() {
        let idx = 2 * i - k as i64 * scale;
        if idx >= 0 && (idx as usize) < phi.len() {
            s += hk * phi[idx as usize];
        }
    }
    s
}

fn wavelet_values(h: &[f64], phi: &[f64], r: u32) -> Vec<f64> {
    let len = h.len();
    let scale = 1i64 << r;
    (0..phi.len() as i64)
        .map(|i| {
            let mut s = 0.0;
            for k in 0..len {
                let idx = 2 * i - k as i64 * scale;
                if idx >= 0 && (idx as usize) < phi.len() {
                    let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
                    s += sign * h[len - 1 - k] * phi[idx as usize];
                }
            }
            s
        })
        .collect()
}

impl ScalingTable {
    fn refresh_norms(&mut self) {
        self.sup_norm = self.phi_values.iter().fold(0.0, |a, v| a.max(v.abs()));
        let mut tv = self.phi_values[0].abs() + self.phi_values[self.phi_values.len() - 1].abs();
        for w in self.phi_values.windows(2) {
            tv += (w[1] - w[0]).abs();
        }
        self.tv_norm = tv;
        let scale = self.scale() as usize;
        self.theta_sup = (0..scale)
            .map(|i| {
                (0..=self.support_radius as usize)
                    .filter_map(|k| self.phi_values.get(i + k * scale))
                    .map(|v| v.abs())
                    .sum::<f64>()
            })
            .fold(0.0, f64::max);
    }

    /// Nodes per unit length, `2^r`.
    #[inline]
    pub fn scale(&self) -> i64 {
        1i64 << self.resolution
    }

    /// `phi(i / 2^r)`, zero off the stored support.
    #[inline]
    pub fn phi_at(&self, i: i64) -> f64 {
        if i >= 0 && (i as usize) < self.phi_values.len() {
            self.phi_values[i as usize]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn psi_at(&self, i: i64) -> f64 {
        if i >= 0 && (i as usize) < self.psi_values.len() {
            self.psi_values[i as usize]
        } else {
            0.0
        }
    }

    /// Grid index `floor(2^r x)` of an off-grid argument.
    #[inline]
    pub fn grid_index(&self, x: f64) -> i64 {
        (x * self.scale() as f64).floor() as i64
    }

    #[inline]
    pub fn phi(&self, x: f64) -> f64 {
        self.phi_at(self.grid_index(x))
    }

    #[inline]
    pub fn psi(&self, x: f64) -> f64 {
        self.psi_at(self.grid_index(x))
    }

    /// Translates `k` with `phi(x - k)` possibly nonzero, for `x` at grid index `i`.
    #[inline]
    pub fn active_shifts(&self, i: i64) -> std::ops::RangeInclusive<i64> {
        let s = self.scale();
        let hi = i.div_euclid(s);
        let lo = (i - self.support_radius * s).div_euclid(s)
            + if (i - self.support_radius * s).rem_euclid(s) == 0 { 0 } else { 1 };
        lo..=hi
    }

    /// `max_x |phi(x) - sqrt2 sum_k h_k phi(2x - k)|` over the grid.
    pub fn two_scale_residual(&self) -> f64 {
        let taps = refinement_taps(&self.filter);
        (0..self.phi_values.len() as i64)
            .map(|i| (self.phi_values[i as usize] - two_scale(&taps, &self.phi_values, i, self.scale())).abs())
            .fold(0.0, f64::max)
    }

    /// `max_x |sum_k phi(x - k) - 1|` over one period of the grid.
    pub fn partition_residual(&self) -> f64 {
        let s = self.scale();
        (0..s)
            .map(|i| {
                let total: f64 = (0..=self.support_radius).map(|k| self.phi_at(i + k * s)).sum();
                (total - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    /// `int phi(x) phi(x - k) dx` for `k = 0, ..., 2N-2` by the grid sum.
    pub fn autocorrelation(&self) -> Vec<f64> {
        let s = self.scale();
        let h = 1.0 / s as f64;
        (0..self.support_radius)
            .map(|k| {
                let shift = (k * s) as usize;
                let mut acc = crate::quadrature::KahanSum::default();
                for i in shift..self.phi_values.len() {
                    acc.add(self.phi_values[i] * self.phi_values[i - shift]);
                }
                acc.total() * h
            })
            .collect()
    }

    pub fn orthonormality_residual(&self) -> f64 {
        self.autocorrelation()
            .iter()
            .enumerate()
            .map(|(k, &a)| (a - if k == 0 { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    /// Write the table as CSV with a versioned header line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "# scaling-table v{TABLE_FORMAT_VERSION} family={} order={} resolution={}",
            self.filter.family.name(),
            self.filter.order,
            self.resolution
        )?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["grid_index", "phi", "psi"])?;
        for (i, (p, q)) in self.phi_values.iter().zip(&self.psi_values).enumerate() {
            w.write_record([i.to_string(), p.to_string(), q.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    /// Read a table written by [`ScalingTable::write_csv`]; norms are recomputed.
    pub fn read_csv<R: BufRead>(mut input: R) -> Result<ScalingTable> {
        let mut header = String::new();
        input.read_line(&mut header)?;
        let bad = |m: &str| Error::TableFormat(m.to_string());
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() < 3 || fields[0] != "#" || fields[1] != "scaling-table" {
            return Err(bad("missing scaling-table header"));
        }
        if fields[2] != format!("v{TABLE_FORMAT_VERSION}") {
            return Err(bad(&format!("unsupported version {}", fields[2])));
        }
        let lookup = |key: &str| -> Result<&str> {
            fields[3..]
                .iter()
                .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| bad(&format!("missing {key}")))
        };
        let family = Family::parse(lookup("family")?).ok_or_else(|| bad("unknown family"))?;
        let order: usize = lookup("order")?.parse().map_err(|_| bad("order"))?;
        let resolution: u32 = lookup("resolution")?.parse().map_err(|_| bad("resolution"))?;
        let filter = make_filter(family, order)?;

        let mut reader = csv::Reader::from_reader(input);
        let mut phi = Vec::new();
        let mut psi = Vec::new();
        for (expected, rec) in reader.records().enumerate() {
            let rec = rec?;
            if rec.len() != 3 {
                return Err(bad("expected three columns"));
            }
            let idx: usize = rec[0].parse().map_err(|_| bad("grid_index"))?;
            if idx != expected {
                return Err(bad("grid_index out of sequence"));
            }
            phi.push(rec[1].parse::<f64>().map_err(|_| bad("phi"))?);
            psi.push(rec[2].parse::<f64>().map_err(|_| bad("psi"))?);
        }
        let expected_len = filter.support_radius() * (1usize << resolution) + 1;
        if phi.len() != expected_len {
            return Err(bad(&format!("expected {expected_len} rows, found {}", phi.len())));
        }
        if phi.iter().chain(&psi).any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        let support_radius = filter.support_radius() as i64;
        let mut table = ScalingTable {
            filter,
            resolution,
            phi_values: phi,
            psi_values: psi,
            sup_norm: 0.0,
            tv_norm: 0.0,
            theta_sup: 0.0,
            support_radius,
        };
        table.refresh_norms();
        Ok(table)
    }

    pub fn load_csv(path: &Path) -> Result<ScalingTable> {
        let f = std::fs::File::open(path)?;
        ScalingTable::read_csv(std::io::BufReader::new(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisReport {
    pub family: Family,
    pub order: usize,
    pub resolution: u32,
    pub sup_norm: f64,
    pub tv_norm: f64,
    pub theta_sup: f64,
    pub orthonormality_residual: f64,
    pub partition_residual: f64,
    pub two_scale_residual: f64,
    pub filter_orthonormality_residual: f64,
}

pub fn basis_diagnostics(table: &ScalingTable) -> BasisReport {
    BasisReport {
        family: table.filter.family,
        order: table.filter.order,
        resolution: table.resolution,
        sup_norm: table.sup_norm,
        tv_norm: table.tv_norm,
        theta_sup: table.theta_sup,
        orthonormality_residual: table.orthonormality_residual(),
        partition_residual: table.partition_residual(),
        two_scale_residual: table.two_scale_residual(),
        filter_orthonormality_residual: table.filter.orthonormality_residual(),
    }
}

/// Convolution envelope `Phi(u) = c 1{|u| <= A}` of the projection kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MajorantSpec {
    pub radius: i64,
    pub height: f64,
    pub l1_norm: f64,
    pub l2_sq: f64,
}

impl MajorantSpec {
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        if u.abs() <= self.radius as f64 {
            self.height
        } else {
            0.0
        }
    }
}

pub fn make_majorant(table: &ScalingTable) -> MajorantSpec {
    let radius = table.support_radius;
    let height = table.sup_norm * table.theta_sup;
    MajorantSpec {
        radius,
        height,
        l1_norm: 2.0 * radius as f64 * height,
        l2_sq: 2.0 * radius as f64 * height * height,
    }
}
