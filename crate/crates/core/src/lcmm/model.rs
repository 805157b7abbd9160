//! Model specification, parameters and their packing into a free vector.

use serde::{Deserialize, Serialize};

use super::optimize::BfgsSettings;
use super::LcmmError;
use crate::cohort::ValueRange;
use crate::link::{BetaLink, LinkKind, LinkSpec, BETA_LINK_PARAMS};

/// Lower bound on the residual SD under the identity link.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Time functions available for design matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisFn {
    Intercept,
    Time,
    TimeSquared,
}

impl BasisFn {
    pub fn eval(self, t: f64) -> f64 {
        match self {
            BasisFn::Intercept => 1.0,
            BasisFn::Time => t,
            BasisFn::TimeSquared => t * t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    pub n_starts: usize,
    pub seed: u64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-5,
            n_starts: 20,
            seed: 0,
        }
    }
}

impl OptimizerSettings {
    pub fn bfgs(&self) -> BfgsSettings {
        BfgsSettings {
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub n_classes: usize,
    pub common_fixed_basis: Vec<BasisFn>,
    pub class_fixed_basis: Vec<BasisFn>,
    pub random_basis: Vec<BasisFn>,
    pub link: LinkKind,
    /// Covariates entering the class-membership model (intercept always included).
    pub class_covariates: Vec<String>,
    pub optimizer: OptimizerSettings,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            n_classes: 1,
            common_fixed_basis: Vec::new(),
            class_fixed_basis: vec![BasisFn::Intercept, BasisFn::Time],
            random_basis: vec![BasisFn::Intercept, BasisFn::Time],
            link: LinkKind::Identity,
            class_covariates: Vec::new(),
            optimizer: OptimizerSettings::default(),
        }
    }
}

impl ModelSpec {
    pub fn with_classes(n_classes: usize) -> Self {
        Self {
            n_classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LcmmError> {
        if self.n_classes == 0 {
            return Err(LcmmError::Config("n_classes must be at least 1".into()));
        }
        if self.common_fixed_basis.is_empty() && self.class_fixed_basis.is_empty() {
            return Err(LcmmError::Config("no fixed effects declared".into()));
        }
        let fixed = self.common_fixed_basis.len() + self.class_fixed_basis.len();
        if self.random_basis.len() > fixed {
            return Err(LcmmError::Config(format!(
                "random basis dimension {} exceeds fixed-effect dimension {fixed}",
                self.random_basis.len()
            )));
        }
        if self.optimizer.n_starts == 0 {
            return Err(LcmmError::Config("n_starts must be at least 1".into()));
        }
        Ok(())
    }

    pub fn n_common(&self) -> usize {
        self.common_fixed_basis.len()
    }

    pub fn n_class_fixed(&self) -> usize {
        self.class_fixed_basis.len()
    }

    pub fn n_random(&self) -> usize {
        self.random_basis.len()
    }

    pub fn n_membership(&self) -> usize {
        1 + self.class_covariates.len()
    }

    pub fn slope_index(&self) -> Option<usize> {
        self.class_fixed_basis.iter().position(|b| *b == BasisFn::Time)
    }

    pub fn intercept_index(&self) -> Option<usize> {
        self.class_fixed_basis.iter().position(|b| *b == BasisFn::Intercept)
    }

    /// Under the beta link one intercept is pinned at zero: the common one if
    /// declared, otherwise the first class's.
    pub fn fixed_intercept(&self) -> Option<FixedIntercept> {
        if self.link != LinkKind::Beta {
            return None;
        }
        if let Some(i) = self.common_fixed_basis.iter().position(|b| *b == BasisFn::Intercept) {
            return Some(FixedIntercept::Common(i));
        }
        self.intercept_index().map(FixedIntercept::Class)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FixedIntercept {
    Common(usize),
    /// Index into the class basis of class 0 (canonical class 1 after ordering).
    Class(usize),
}

/// Beta-link parameters on their natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaShape {
    pub shape_a: f64,
    pub shape_b: f64,
    pub offset: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    /// Common fixed effects.
    pub beta: Vec<f64>,
    /// One row of class-specific fixed effects per class.
    pub class_effects: Vec<Vec<f64>>,
    /// Row-major q×q lower-triangular Cholesky factor of the random-effect covariance.
    pub chol_b: Vec<f64>,
    pub sigma: f64,
    pub link: Option<BetaShape>,
    /// Membership-model coefficients per class; the last class is the zero reference.
    pub class_logits: Vec<Vec<f64>>,
}

impl Parameters {
    pub fn n_classes(&self) -> usize {
        self.class_effects.len()
    }

    pub fn random_dim(&self) -> usize {
        (self.chol_b.len() as f64).sqrt().round() as usize
    }

    /// Random-effect covariance B = L Lᵀ, row-major.
    pub fn random_covariance(&self) -> Vec<f64> {
        let q = self.random_dim();
        let mut b = vec![0.0; q * q];
        for i in 0..q {
            for j in 0..q {
                b[i * q + j] = (0..q).map(|k| self.chol_b[i * q + k] * self.chol_b[j * q + k]).sum();
            }
        }
        b
    }

    /// Mixture weights for a membership design row `x` (first entry 1).
    pub fn class_log_weights(&self, x: &[f64]) -> Vec<f64> {
        let eta: Vec<f64> = self
            .class_logits
            .iter()
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect();
        let m = eta.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + eta.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
        eta.into_iter().map(|e| e - lse).collect()
    }

    /// Intercept-only mixture proportions.
    pub fn proportions(&self) -> Vec<f64> {
        let mut x = vec![0.0; self.class_logits.first().map_or(1, Vec::len)];
        x[0] = 1.0;
        self.class_log_weights(&x).into_iter().map(f64::exp).collect()
    }

    pub fn link_spec(&self, range: Option<ValueRange>) -> Result<LinkSpec, LcmmError> {
        match self.link {
            None => Ok(LinkSpec::Identity),
            Some(s) => {
                let range = range.ok_or_else(|| LcmmError::Config("beta link requires a value range".into()))?;
                let link = BetaLink {
                    shape_a: s.shape_a,
                    shape_b: s.shape_b,
                    offset: s.offset,
                    scale: s.scale,
                    range,
                };
                link.validate().map_err(|e| LcmmError::Config(e.to_string()))?;
                Ok(LinkSpec::Beta(link))
            }
        }
    }

    /// Reorders classes so that canonical class k is internal class `order[k]`,
    /// and re-references logits to the new last class.
    pub fn permute_classes(&self, order: &[usize]) -> Parameters {
        let mut out = self.clone();
        out.class_effects = order.iter().map(|&g| self.class_effects[g].clone()).collect();
        let logits: Vec<Vec<f64>> = order.iter().map(|&g| self.class_logits[g].clone()).collect();
        let reference = logits.last().cloned().unwrap_or_default();
        out.class_logits = logits
            .into_iter()
            .map(|row| row.iter().zip(&reference).map(|(a, r)| a - r).collect())
            .collect();
        out
    }

    /// Flips Cholesky columns so the diagonal is non-negative (B unchanged).
    pub fn normalize_cholesky(&mut self) {
        let q = self.random_dim();
        for j in 0..q {
            if self.chol_b[j * q + j] < 0.0 {
                for i in 0..q {
                    self.chol_b[i * q + j] = -self.chol_b[i * q + j];
                }
            }
        }
    }
}

/// Mapping between [`Parameters`] and the unconstrained optimisation vector.
///
/// Order: common effects, class effects (row-major, minus a pinned intercept),
/// Cholesky lower triangle, log-excess residual SD (identity link only),
/// beta-link `(ln a, ln b, offset, ln scale)`, membership logits of all but
/// the last class.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    pub n_classes: usize,
    pub n_common: usize,
    pub n_class_fixed: usize,
    pub n_random: usize,
    pub n_membership: usize,
    pub link: LinkKind,
    pub fixed_intercept: Option<FixedIntercept>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Common(usize),
    Class(usize, usize),
    Chol(usize, usize),
    Sigma,
    Link(usize),
    Logit(usize, usize),
}

impl ParamLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        Self {
            n_classes: spec.n_classes,
            n_common: spec.n_common(),
            n_class_fixed: spec.n_class_fixed(),
            n_random: spec.n_random(),
            n_membership: spec.n_membership(),
            link: spec.link,
            fixed_intercept: spec.fixed_intercept(),
        }
    }

    /// Free slots in vector order.
    pub fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        for i in 0..self.n_common {
            if self.fixed_intercept != Some(FixedIntercept::Common(i)) {
                out.push(Slot::Common(i));
            }
        }
        for g in 0..self.n_classes {
            for k in 0..self.n_class_fixed {
                if g == 0 && self.fixed_intercept == Some(FixedIntercept::Class(k)) {
                    continue;
                }
                out.push(Slot::Class(g, k));
            }
        }
        for i in 0..self.n_random {
            for j in 0..=i {
                out.push(Slot::Chol(i, j));
            }
        }
        match self.link {
            LinkKind::Identity => out.push(Slot::Sigma),
            LinkKind::Beta => (0..BETA_LINK_PARAMS).for_each(|k| out.push(Slot::Link(k))),
        }
        for g in 0..self.n_classes.saturating_sub(1) {
            for k in 0..self.n_membership {
                out.push(Slot::Logit(g, k));
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.slots().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pack(&self, p: &Parameters) -> Vec<f64> {
        let q = self.n_random;
        let link = p.link.unwrap_or(BetaShape {
            shape_a: 1.0,
            shape_b: 1.0,
            offset: 0.0,
            scale: 1.0,
        });
        self.slots()
            .into_iter()
            .map(|slot| match slot {
                Slot::Common(i) => p.beta[i],
                Slot::Class(g, k) => p.class_effects[g][k],
                Slot::Chol(i, j) => p.chol_b[i * q + j],
                Slot::Sigma => {
                    let excess = p.sigma * p.sigma - SIGMA_FLOOR * SIGMA_FLOOR;
                    (0.5 * excess.max(1e-300).ln()).max(-40.0)
                }
                Slot::Link(0) => link.shape_a.ln(),
                Slot::Link(1) => link.shape_b.ln(),
                Slot::Link(2) => link.offset,
                Slot::Link(_) => link.scale.ln(),
                Slot::Logit(g, k) => p.class_logits[g][k],
            })
            .collect()
    }

    pub fn unpack(&self, x: &[f64]) -> Parameters {
        let (g_n, q) = (self.n_classes, self.n_random);
        let mut p = Parameters {
            beta: vec![0.0; self.n_common],
            class_effects: vec![vec![0.0; self.n_class_fixed]; g_n],
            chol_b: vec![0.0; q * q],
            sigma: 1.0,
            link: match self.link {
                LinkKind::Identity => None,
                LinkKind::Beta => Some(BetaShape {
                    shape_a: 1.0,
                    shape_b: 1.0,
                    offset: 0.0,
                    scale: 1.0,
                }),
            },
            class_logits: vec![vec![0.0; self.n_membership]; g_n],
        };
        for (slot, &v) in self.slots().into_iter().zip(x) {
            match slot {
                Slot::Common(i) => p.beta[i] = v,
                Slot::Class(g, k) => p.class_effects[g][k] = v,
                Slot::Chol(i, j) => p.chol_b[i * q + j] = v,
                Slot::Sigma => p.sigma = (SIGMA_FLOOR * SIGMA_FLOOR + (2.0 * v).exp()).sqrt(),
                Slot::Link(k) => {
                    let l = p.link.as_mut().expect("beta layout");
                    match k {
                        0 => l.shape_a = v.exp(),
                        1 => l.shape_b = v.exp(),
                        2 => l.offset = v,
                        _ => l.scale = v.exp(),
                    }
                }
                Slot::Logit(g, k) => p.class_logits[g][k] = v,
            }
        }
        p
    }

    /// Human-readable name of each free slot, in vector order.
    pub fn names(&self) -> Vec<String> {
        self.slots()
            .into_iter()
            .map(|slot| match slot {
                Slot::Common(i) => format!("beta[{i}]"),
                Slot::Class(g, k) => format!("class{}[{k}]", g + 1),
                Slot::Chol(i, j) => format!("chol_b[{i},{j}]"),
                Slot::Sigma => "log_sigma_excess".into(),
                Slot::Link(0) => "log_shape_a".into(),
                Slot::Link(1) => "log_shape_b".into(),
                Slot::Link(2) => "offset".into(),
                Slot::Link(_) => "log_scale".into(),
                Slot::Logit(g, k) => format!("logit{}[{k}]", g + 1),
            })
            .collect()
    }
}
