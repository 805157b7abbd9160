//! Monotone links between the observed outcome scale and the latent scale.
//!
//! The beta link rescales an observation into (0, 1) and maps it through the
//! Beta(a, b) CDF, followed by an affine normalisation:
//!
//! ```text
//! ỹ = (y - min + ε₀) / (max - min + 2ε₀)
//! Λ = (I_ỹ(a, b) - offset) / scale
//! ```

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::cohort::ValueRange;

/// Rescale guard that keeps ỹ strictly inside (0, 1).
pub const RESCALE_GUARD: f64 = 1e-4;
/// Tolerance on the observed range before a value is rejected.
pub const DOMAIN_GUARD: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("value {value} lies outside the link domain [{min}, {max}]")]
    OutsideDomain { value: f64, min: f64, max: f64 },
    #[error("latent value {0} lies outside the image of the link")]
    OutsideImage(f64),
    #[error("invalid link parameters: {0}")]
    InvalidParameters(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LinkKind {
    #[default]
    Identity,
    Beta,
}

impl std::str::FromStr for LinkKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(LinkKind::Identity),
            "beta" => Ok(LinkKind::Beta),
            other => Err(format!("unknown link `{other}` (expected identity or beta)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaLink {
    pub shape_a: f64,
    pub shape_b: f64,
    pub offset: f64,
    pub scale: f64,
    pub range: ValueRange,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LinkSpec {
    Identity,
    Beta(BetaLink),
}

/// Number of free link parameters for the beta link: log a, log b, offset, log scale.
pub const BETA_LINK_PARAMS: usize = 4;

/// Λ, log-Jacobian and their derivatives with respect to
/// `(ln a, ln b, offset, ln scale)` at one observation.
#[derive(Debug, Clone, Copy)]
pub struct LinkEval {
    pub latent: f64,
    pub log_jacobian: f64,
    pub d_latent: [f64; BETA_LINK_PARAMS],
    pub d_log_jacobian: [f64; BETA_LINK_PARAMS],
}

impl BetaLink {
    pub fn validate(&self) -> Result<(), LinkError> {
        let ok = self.shape_a > 0.0
            && self.shape_b > 0.0
            && self.scale > 0.0
            && self.offset.is_finite()
            && self.shape_a.is_finite()
            && self.shape_b.is_finite()
            && self.scale.is_finite()
            && self.range.min < self.range.max;
        if ok {
            Ok(())
        } else {
            Err(LinkError::InvalidParameters(format!("{self:?}")))
        }
    }

    fn rescale_width(&self) -> f64 {
        self.range.width() + 2.0 * RESCALE_GUARD
    }

    /// Maps y into (0, 1), rejecting values outside the guarded range.
    pub fn rescale(&self, y: f64) -> Result<f64, LinkError> {
        let (lo, hi) = (self.range.min - DOMAIN_GUARD, self.range.max + DOMAIN_GUARD);
        if !(y >= lo && y <= hi) {
            return Err(LinkError::OutsideDomain {
                value: y,
                min: self.range.min,
                max: self.range.max,
            });
        }
        Ok((y - self.range.min + RESCALE_GUARD) / self.rescale_width())
    }

    fn unscale(&self, u: f64) -> f64 {
        u * self.rescale_width() + self.range.min - RESCALE_GUARD
    }

    /// Link value plus derivatives needed by the likelihood gradient.
    pub fn evaluate(&self, y: f64) -> Result<LinkEval, LinkError> {
        let (a, b) = (self.shape_a, self.shape_b);
        let u = self.rescale(y)?;
        let cdf = beta_reg(a, b, u);
        let latent = (cdf - self.offset) / self.scale;
        let (da, db) = beta_reg_shape_derivatives(a, b, u);
        let d_latent = [a * da / self.scale, b * db / self.scale, -1.0 / self.scale, -latent];

        let ln_pdf = beta_ln_pdf(a, b, u);
        let log_jacobian = ln_pdf - self.scale.ln() - self.rescale_width().ln();
        let psi_ab = digamma(a + b);
        let d_log_jacobian = [
            a * (u.ln() - digamma(a) + psi_ab),
            b * ((-u).ln_1p() - digamma(b) + psi_ab),
            0.0,
            -1.0,
        ];
        Ok(LinkEval {
            latent,
            log_jacobian,
            d_latent,
            d_log_jacobian,
        })
    }
}

impl LinkSpec {
    pub fn kind(&self) -> LinkKind {
        match self {
            LinkSpec::Identity => LinkKind::Identity,
            LinkSpec::Beta(_) => LinkKind::Beta,
        }
    }

    pub fn transform(&self, y: f64) -> Result<f64, LinkError> {
        match self {
            LinkSpec::Identity => Ok(y),
            LinkSpec::Beta(link) => {
                let u = link.rescale(y)?;
                Ok((beta_reg(link.shape_a, link.shape_b, u) - link.offset) / link.scale)
            }
        }
    }

    /// dΛ/dy, strictly positive on the domain.
    pub fn jacobian(&self, y: f64) -> Result<f64, LinkError> {
        match self {
            LinkSpec::Identity => Ok(1.0),
            LinkSpec::Beta(link) => {
                let u = link.rescale(y)?;
                Ok(beta_ln_pdf(link.shape_a, link.shape_b, u).exp() / (link.scale * link.rescale_width()))
            }
        }
    }

    pub fn log_jacobian(&self, y: f64) -> Result<f64, LinkError> {
        match self {
            LinkSpec::Identity => Ok(0.0),
            LinkSpec::Beta(link) => {
                let u = link.rescale(y)?;
                Ok(beta_ln_pdf(link.shape_a, link.shape_b, u) - link.scale.ln() - link.rescale_width().ln())
            }
        }
    }

    /// Inverse of [`transform`](Self::transform) by safeguarded Newton iteration
    /// on the monotone CDF.
    pub fn inverse_transform(&self, latent: f64) -> Result<f64, LinkError> {
        match self {
            LinkSpec::Identity => Ok(latent),
            LinkSpec::Beta(link) => {
                let (a, b) = (link.shape_a, link.shape_b);
                let target = link.offset + link.scale * latent;
                let lo_u = link.rescale(link.range.min - DOMAIN_GUARD)?;
                let hi_u = link.rescale(link.range.max + DOMAIN_GUARD)?;
                let (lo_c, hi_c) = (beta_reg(a, b, lo_u), beta_reg(a, b, hi_u));
                if !(target >= lo_c && target <= hi_c) {
                    return Err(LinkError::OutsideImage(latent));
                }
                let u = invert_beta_cdf(a, b, target, lo_u, hi_u);
                Ok(link.unscale(u))
            }
        }
    }
}

fn invert_beta_cdf(a: f64, b: f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut x = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = beta_reg(a, b, x) - target;
        if f == 0.0 {
            return x;
        }
        if f < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let pdf = beta_ln_pdf(a, b, x).exp();
        let newton = x - f / pdf;
        let next = if pdf > 0.0 && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 1e-16 * x.abs().max(1e-300) || hi - lo <= 1e-17 {
            return next;
        }
        x = next;
    }
    x
}

/// ln B(a, b).
pub fn ln_beta(a: f64, b: f64) -> f64 {
    ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b)
}

/// Log density of Beta(a, b) at x in (0, 1).
pub fn beta_ln_pdf(a: f64, b: f64, x: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p() - ln_beta(a, b)
}

/// Regularized incomplete beta function I_x(a, b).
///
/// Continued fraction (modified Lentz) on whichever of I_x(a, b) or
/// 1 - I_{1-x}(b, a) converges quickly; the switch happens at
/// x = (a + 1) / (a + b + 2).
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (-x).ln_1p() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// ∂I_x(a, b)/∂a and ∂I_x(a, b)/∂b by Richardson-extrapolated central differences.
pub fn beta_reg_shape_derivatives(a: f64, b: f64, x: f64) -> (f64, f64) {
    let da = richardson(|h| beta_reg(a + h, b, x), 1e-3 * a);
    let db = richardson(|h| beta_reg(a, b + h, x), 1e-3 * b);
    (da, db)
}

fn richardson(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
    let (d1, d2) = (d(h), d(0.5 * h));
    (4.0 * d2 - d1) / 3.0
}
