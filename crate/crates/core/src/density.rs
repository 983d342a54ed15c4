//! Test densities with exact functionals and inverse-cdf samplers.

use rand::RngCore;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::quadrature::simpson;
use crate::rng::{open_unit, stream};

/// Probability mass allowed outside a support window.
pub const EPS_TAIL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase")]
pub enum DensitySpec {
    Uniform { a: f64, b: f64 },
    Gaussian { mu: f64, sigma: f64 },
    Laplace { mu: f64, b: f64 },
    Triangular { a: f64, c: f64, b: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityModel {
    pub name: String,
    pub spec: DensitySpec,
    pub l2_sq: f64,
    pub sup_norm: f64,
    pub holder_alpha: f64,
    /// `L` with `f` nondecreasing on `(-inf, -L]` and nonincreasing on
    /// `[L, inf)`; `None` when no such point exists (a uniform law whose
    /// support does not straddle the origin).
    pub tail_point: Option<f64>,
    pub support_window: (f64, f64),
}

impl DensitySpec {
    pub fn name(&self) -> &'static str {
        match self {
            DensitySpec::Uniform { .. } => "uniform",
            DensitySpec::Gaussian { .. } => "gaussian",
            DensitySpec::Laplace { .. } => "laplace",
            DensitySpec::Triangular { .. } => "triangular",
        }
    }

    pub fn params(&self) -> Vec<f64> {
        match *self {
            DensitySpec::Uniform { a, b } => vec![a, b],
            DensitySpec::Gaussian { mu, sigma } => vec![mu, sigma],
            DensitySpec::Laplace { mu, b } => vec![mu, b],
            DensitySpec::Triangular { a, c, b } => vec![a, c, b],
        }
    }

    /// Validate and build.
    pub fn build(&self) -> Result<DensityModel> {
        make_density(self.name(), &self.params())
    }
}

/// Build a catalog density from its name and positional parameters:
/// `uniform(a, b)`, `gaussian(mu, sigma)`, `laplace(mu, b)`, `triangular(a, c, b)`.
pub fn make_density(name: &str, params: &[f64]) -> Result<DensityModel> {
    let bad = |m: String| Error::InvalidDensityParams(m);
    let want = |k: usize| -> Result<()> {
        if params.len() != k {
            return Err(bad(format!("{name} takes {k} parameters, got {}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad(format!("{name}: non-finite parameter")));
        }
        Ok(())
    };
    let spec = match name.to_ascii_lowercase().as_str() {
        "uniform" => {
            want(2)?;
            let (a, b) = (params[0], params[1]);
            if b <= a {
                return Err(bad(format!("uniform needs a < b, got ({a}, {b})")));
            }
            DensitySpec::Uniform { a, b }
        }
        "gaussian" | "normal" => {
            want(2)?;
            let (mu, sigma) = (params[0], params[1]);
            if sigma <= 0.0 {
                return Err(bad(format!("gaussian needs sigma > 0, got {sigma}")));
            }
            DensitySpec::Gaussian { mu, sigma }
        }
        "laplace" => {
            want(2)?;
            let (mu, b) = (params[0], params[1]);
            if b <= 0.0 {
                return Err(bad(format!("laplace needs b > 0, got {b}")));
            }
            DensitySpec::Laplace { mu, b }
        }
        "triangular" => {
            want(3)?;
            let (a, c, b) = (params[0], params[1], params[2]);
            if !(a < b && a <= c && c <= b) {
                return Err(bad(format!("triangular needs a <= c <= b, a < b; got ({a}, {c}, {b})")));
            }
            DensitySpec::Triangular { a, c, b }
        }
        other => return Err(bad(format!("unknown density {other:?}"))),
    };
    Ok(DensityModel::from_spec(spec))
}

impl DensityModel {
    pub fn from_spec(spec: DensitySpec) -> DensityModel {
        let sqrt_pi = std::f64::consts::PI.sqrt();
        let (name, l2_sq, sup_norm, tail_point, window) = match spec {
            DensitySpec::Uniform { a, b } => (
                "uniform",
                1.0 / (b - a),
                1.0 / (b - a),
                if a <= 0.0 && 0.0 <= b { Some(0.0) } else { None },
                (a, b),
            ),
            DensitySpec::Gaussian { mu, sigma } => (
                "gaussian",
                1.0 / (2.0 * sigma * sqrt_pi),
                1.0 / (sigma * (2.0 * std::f64::consts::PI).sqrt()),
                Some(mu.abs()),
                (mu - 7.5 * sigma, mu + 7.5 * sigma),
            ),
            DensitySpec::Laplace { mu, b } => {
                let w = b * (1.0 / (0.1 * EPS_TAIL)).ln();
                ("laplace", 1.0 / (4.0 * b), 1.0 / (2.0 * b), Some(mu.abs()), (mu - w, mu + w))
            }
            DensitySpec::Triangular { a, c, b } => (
                "triangular",
                4.0 / (3.0 * (b - a)),
                2.0 / (b - a),
                Some(c.abs()),
                (a, b),
            ),
        };
        DensityModel {
            name: name.to_string(),
            spec,
            l2_sq,
            sup_norm,
            holder_alpha: 1.0,
            tail_point,
            support_window: window,
        }
    }

    pub fn pdf(&self, x: f64) -> f64 {
        match self.spec {
            DensitySpec::Uniform { a, b } => {
                if a <= x && x < b {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
            DensitySpec::Gaussian { mu, sigma } => {
                let z = (x - mu) / sigma;
                (-0.5 * z * z).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
            }
            DensitySpec::Laplace { mu, b } => (-(x - mu).abs() / b).exp() / (2.0 * b),
            DensitySpec::Triangular { a, c, b } => {
                if x < a || x >= b {
                    0.0
                } else if x < c {
                    2.0 * (x - a) / ((b - a) * (c - a))
                } else if c < b {
                    2.0 * (b - x) / ((b - a) * (b - c))
                } else {
                    0.0
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match self.spec {
            DensitySpec::Uniform { a, b } => ((x - a) / (b - a)).clamp(0.0, 1.0),
            DensitySpec::Gaussian { mu, sigma } => 0.5 * erfc(-(x - mu) / (sigma * std::f64::consts::SQRT_2)),
            DensitySpec::Laplace { mu, b } => {
                if x < mu {
                    0.5 * ((x - mu) / b).exp()
                } else {
                    1.0 - 0.5 * (-(x - mu) / b).exp()
                }
            }
            DensitySpec::Triangular { a, c, b } => {
                if x <= a {
                    0.0
                } else if x >= b {
                    1.0
                } else if x <= c {
                    (x - a) * (x - a) / ((b - a) * (c - a))
                } else {
                    1.0 - (b - x) * (b - x) / ((b - a) * (b - c))
                }
            }
        }
    }

    /// Survival function `1 - F(x)` computed without cancellation in the right tail.
    pub fn sf(&self, x: f64) -> f64 {
        match self.spec {
            DensitySpec::Uniform { a, b } => ((b - x) / (b - a)).clamp(0.0, 1.0),
            DensitySpec::Gaussian { mu, sigma } => 0.5 * erfc((x - mu) / (sigma * std::f64::consts::SQRT_2)),
            DensitySpec::Laplace { mu, b } => {
                if x < mu {
                    1.0 - 0.5 * ((x - mu) / b).exp()
                } else {
                    0.5 * (-(x - mu) / b).exp()
                }
            }
            DensitySpec::Triangular { a, c, b } => {
                if x <= a {
                    1.0
                } else if x >= b {
                    0.0
                } else if x <= c {
                    1.0 - (x - a) * (x - a) / ((b - a) * (c - a))
                } else {
                    (b - x) * (b - x) / ((b - a) * (b - c))
                }
            }
        }
    }

    fn median(&self) -> f64 {
        match self.spec {
            DensitySpec::Uniform { a, b } => 0.5 * (a + b),
            DensitySpec::Gaussian { mu, .. } | DensitySpec::Laplace { mu, .. } => mu,
            DensitySpec::Triangular { .. } => self.quantile(0.5),
        }
    }

    /// `P(lo <= X < hi)`.
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        let med = self.median();
        let m = if hi <= med {
            self.cdf(hi) - self.cdf(lo)
        } else if lo >= med {
            self.sf(lo) - self.sf(hi)
        } else {
            1.0 - self.cdf(lo) - self.sf(hi)
        };
        m.max(0.0)
    }

    pub fn quantile(&self, u: f64) -> f64 {
        match self.spec {
            DensitySpec::Uniform { a, b } => a + u * (b - a),
            DensitySpec::Gaussian { mu, sigma } => {
                let std = Normal::standard();
                mu + sigma * std.inverse_cdf(u)
            }
            DensitySpec::Laplace { mu, b } => {
                if u < 0.5 {
                    mu + b * (2.0 * u).ln()
                } else {
                    mu - b * (2.0 * (1.0 - u)).ln()
                }
            }
            DensitySpec::Triangular { a, c, b } => {
                let split = (c - a) / (b - a);
                if u < split {
                    a + (u * (b - a) * (c - a)).sqrt()
                } else {
                    b - ((1.0 - u) * (b - a) * (b - c)).sqrt()
                }
            }
        }
    }

    /// One inverse-cdf draw.
    #[inline]
    pub fn draw<R: RngCore>(&self, rng: &mut R) -> f64 {
        self.quantile(open_unit(rng))
    }

    /// Points where the density jumps or has a kink.
    pub fn breakpoints(&self) -> Vec<f64> {
        match self.spec {
            DensitySpec::Uniform { a, b } => vec![a, b],
            DensitySpec::Gaussian { .. } => vec![],
            DensitySpec::Laplace { mu, .. } => vec![mu],
            DensitySpec::Triangular { a, c, b } => vec![a, c, b],
        }
    }

    /// `int_lo^hi f^2`, exact up to rounding.
    pub fn sq_integral(&self, lo: f64, hi: f64) -> f64 {
        if hi <= lo {
            return 0.0;
        }
        match self.spec {
            DensitySpec::Uniform { a, b } => {
                let w = (hi.min(b) - lo.max(a)).max(0.0);
                w / ((b - a) * (b - a))
            }
            DensitySpec::Gaussian { mu, sigma } => {
                // f^2 is l2_sq times the N(mu, sigma^2 / 2) density
                let narrow = DensityModel::from_spec(DensitySpec::Gaussian {
                    mu,
                    sigma: sigma * std::f64::consts::FRAC_1_SQRT_2,
                });
                self.l2_sq * narrow.mass(lo, hi)
            }
            DensitySpec::Laplace { mu, b } => {
                let narrow = DensityModel::from_spec(DensitySpec::Laplace { mu, b: 0.5 * b });
                self.l2_sq * narrow.mass(lo, hi)
            }
            DensitySpec::Triangular { a, b, .. } => {
                let (lo, hi) = (lo.max(a), hi.min(b));
                if hi <= lo {
                    return 0.0;
                }
                // f^2 is a quadratic on each linear piece: Gauss-Legendre is exact
                let mut cuts = vec![lo];
                cuts.extend(self.breakpoints().into_iter().filter(|&p| p > lo && p < hi));
                cuts.push(hi);
                let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
                let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
                cuts.windows(2)
                    .map(|w| {
                        let (c, r) = (0.5 * (w[0] + w[1]), 0.5 * (w[1] - w[0]));
                        r * nodes
                            .iter()
                            .zip(weights)
                            .map(|(t, wt)| wt * self.pdf(c + r * t).powi(2))
                            .sum::<f64>()
                    })
                    .sum()
            }
        }
    }

    /// Draw a sample of size `n` from stream `stream_id` of `seed`.
    pub fn sample_stream(&self, n: usize, seed: u64, stream_id: u64) -> Result<Sample> {
        if n == 0 {
            return Err(Error::EmptySample);
        }
        let mut rng = stream(seed, stream_id);
        let values = (0..n).map(|_| self.draw(&mut rng)).collect();
        Ok(Sample {
            values,
            seed,
            stream: stream_id,
            density_name: self.name.clone(),
            n,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub values: Vec<f64>,
    pub seed: u64,
    pub stream: u64,
    pub density_name: String,
    pub n: usize,
}

/// `n` i.i.d. draws from stream 0 of `seed`.
pub fn sample(density: &DensityModel, n: usize, seed: u64) -> Result<Sample> {
    density.sample_stream(n, seed, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxIntegrals {
    pub m: f64,
    pub mass_inside: f64,
    pub mass_outside: f64,
    pub sq_inside: f64,
    pub sq_outside: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalReport {
    pub l2_sq: f64,
    pub l2_sq_quadrature: f64,
    pub sigma_sq: f64,
    pub l2_fourth: f64,
    pub total_mass_quadrature: f64,
    pub boxes: Vec<BoxIntegrals>,
}

/// Functionals of `f` over a window, with `F = [-M, M]` boxes and their complements.
pub fn density_integrals(density: &DensityModel, window: (f64, f64), boxes: &[f64]) -> Result<FunctionalReport> {
    let (lo, hi) = window;
    let tail_mass = density.cdf(lo) + density.sf(hi);
    if !(tail_mass <= EPS_TAIL) {
        return Err(Error::WindowTooSmall {
            lo,
            hi,
            tail_mass,
            tolerance: EPS_TAIL,
        });
    }
    let breaks = density.breakpoints();
    let l2_sq_quadrature = simpson(|x| density.pdf(x).powi(2), lo, hi, &breaks, 2000);
    let total_mass_quadrature = simpson(|x| density.pdf(x), lo, hi, &breaks, 2000);
    let boxes = boxes
        .iter()
        .map(|&m| {
            let sq_inside = density.sq_integral(-m, m);
            BoxIntegrals {
                m,
                mass_inside: density.mass(-m, m),
                mass_outside: density.cdf(-m) + density.sf(m),
                sq_inside,
                sq_outside: density.sq_integral(f64::NEG_INFINITY, -m) + density.sq_integral(m, f64::INFINITY),
            }
        })
        .collect();
    Ok(FunctionalReport {
        l2_sq: density.l2_sq,
        l2_sq_quadrature,
        sigma_sq: 2.0 * density.l2_sq,
        l2_fourth: density.l2_sq * density.l2_sq,
        total_mass_quadrature,
        boxes,
    })
}
