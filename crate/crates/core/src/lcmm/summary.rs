use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::fit::FitResult;
use super::likelihood::Model;
use super::model::{FixedIntercept, Slot};
use super::LcmmError;
use crate::cohort::Cohort;

const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    /// `None` when the parameter is pinned or the Hessian is singular.
    pub se: Option<f64>,
    pub ci: Option<(f64, f64)>,
}

impl Estimate {
    fn new(value: f64, se: Option<f64>) -> Self {
        Self {
            value,
            se,
            ci: se.map(|s| (value - Z_95 * s, value + Z_95 * s)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub time: f64,
    pub latent: f64,
    /// Observed-scale value; clamped to the link's range under the beta link.
    pub observed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    /// 1-based canonical class label.
    pub class: usize,
    pub proportion: f64,
    pub intercept: Option<Estimate>,
    pub slope: Estimate,
    pub curve: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySummary {
    pub classes: Vec<ClassSummary>,
    /// False when the negative Hessian could not be inverted.
    pub covariance_available: bool,
}

/// Observed-information covariance of the free parameters, from central
/// differences of the analytic gradient at the optimum.
pub fn parameter_covariance(model: &Model, x: &[f64]) -> Result<Option<DMatrix<f64>>, LcmmError> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    for k in 0..n {
        let step = 1e-5 * x[k].abs().max(1.0);
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[k] += step;
        xm[k] -= step;
        let gp = model.gradient_at(&xp)?.1;
        let gm = model.gradient_at(&xm)?.1;
        for j in 0..n {
            h[(j, k)] = -(gp[j] - gm[j]) / (2.0 * step);
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    Ok(h.cholesky().map(|c| c.inverse()))
}

/// Per-class intercept and slope with Wald 95% intervals, and the class mean
/// curve on a grid over the follow-up window. The observed-scale curve maps the
/// latent mean (random effects at zero) back through the inverse link.
pub fn class_trajectory_summary(
    cohort: &Cohort,
    fit: &FitResult,
    grid_points: usize,
) -> Result<TrajectorySummary, LcmmError> {
    let spec = &fit.spec;
    let slope_k = spec
        .slope_index()
        .ok_or_else(|| LcmmError::Config("class basis has no time term; slope undefined".into()))?;
    let intercept_k = spec.intercept_index();

    let model = Model::new(cohort, spec, fit.value_range)?;
    let layout = model.layout().clone();
    let x = layout.pack(&fit.params);
    let cov = parameter_covariance(&model, &x)?;
    let slots = layout.slots();
    let se_of = |g: usize, k: usize| -> Option<f64> {
        let cov = cov.as_ref()?;
        let pos = slots.iter().position(|s| *s == Slot::Class(g, k))?;
        let v = cov[(pos, pos)];
        (v >= 0.0).then(|| v.sqrt())
    };

    let link = fit.link()?;
    let t_max = cohort.eyes.iter().map(|e| e.last_time()).fold(0.0, f64::max);
    let grid: Vec<f64> = (0..grid_points.max(2))
        .map(|i| t_max * i as f64 / (grid_points.max(2) - 1) as f64)
        .collect();
    let (lo, hi) = match fit.value_range {
        Some(r) => (r.min, r.max),
        None => (f64::NEG_INFINITY, f64::INFINITY),
    };
    let proportions = fit.params.proportions();
    let pinned = spec.fixed_intercept();

    let classes = (0..spec.n_classes)
        .map(|g| {
            let v = &fit.params.class_effects[g];
            let intercept = intercept_k.map(|k| {
                let se = if g == 0 && pinned == Some(FixedIntercept::Class(k)) {
                    None
                } else {
                    se_of(g, k)
                };
                Estimate::new(v[k], se)
            });
            let slope = Estimate::new(v[slope_k], se_of(g, slope_k));
            let curve = grid
                .iter()
                .map(|&t| {
                    let common: f64 = spec
                        .common_fixed_basis
                        .iter()
                        .zip(&fit.params.beta)
                        .map(|(b, c)| b.eval(t) * c)
                        .sum();
                    let class: f64 = spec.class_fixed_basis.iter().zip(v).map(|(b, c)| b.eval(t) * c).sum();
                    let latent = common + class;
                    let observed = link.inverse_transform(latent).unwrap_or_else(|_| {
                        let at_lo = link.transform(lo).unwrap_or(f64::NEG_INFINITY);
                        if latent < at_lo {
                            lo
                        } else {
                            hi
                        }
                    });
                    CurvePoint {
                        time: t,
                        latent,
                        observed,
                    }
                })
                .collect();
            ClassSummary {
                class: g + 1,
                proportion: proportions[g],
                intercept,
                slope,
                curve,
            }
        })
        .collect();
    Ok(TrajectorySummary {
        classes,
        covariance_available: cov.is_some(),
    })
}
