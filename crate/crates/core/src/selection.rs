//! Choosing the number of latent classes by the Integrated Completed
//! Likelihood, with AIC and BIC alongside.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::Cohort;
use crate::lcmm::{fit, posterior_memberships, FitResult, LcmmError, MembershipTable, ModelSpec};

/// Rule identifier recorded in every report.
pub const SELECTION_RULE: &str = "min-ICL";

#[derive(Debug, Error)]
pub enum SelectionError {
    #[error("candidate class range is empty")]
    EmptyRange,
    #[error("class count must be at least 1")]
    ZeroClasses,
    #[error("no candidate converged: {0}")]
    NoneConverged(String),
    #[error(transparent)]
    Fit(#[from] LcmmError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InformationCriteria {
    pub aic: f64,
    pub bic: f64,
    pub icl: f64,
    pub entropy: f64,
}

/// Posterior classification entropy `-Σ_i Σ_g τ ln τ` with `0 ln 0 = 0`.
pub fn classification_entropy(tau: &[Vec<f64>]) -> f64 {
    tau.iter().flatten().filter(|&&t| t > 0.0).map(|&t| -t * t.ln()).sum()
}

/// AIC, BIC (sample size = number of eyes), entropy and ICL = BIC + 2E.
pub fn criteria_from_parts(loglik: f64, n_params: usize, n_eyes: usize, tau: &[Vec<f64>]) -> InformationCriteria {
    let p = n_params as f64;
    let aic = -2.0 * loglik + 2.0 * p;
    let bic = -2.0 * loglik + p * (n_eyes as f64).ln();
    let entropy = classification_entropy(tau);
    InformationCriteria {
        aic,
        bic,
        icl: bic + 2.0 * entropy,
        entropy,
    }
}

pub fn information_criteria(fit: &FitResult, memberships: &MembershipTable) -> InformationCriteria {
    criteria_from_parts(fit.loglik, fit.n_params, fit.n_eyes, &memberships.tau)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRow {
    pub n_classes: usize,
    /// `None` when every start failed.
    pub loglik: Option<f64>,
    pub n_params: usize,
    pub criteria: Option<InformationCriteria>,
    pub converged: bool,
    /// Set when the log-likelihood falls below that of a smaller model by
    /// more than the tolerance; such rows are treated as not converged.
    pub monotonicity_violation: bool,
    pub mean_max_posterior: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub rows: Vec<SelectionRow>,
    pub selected_classes: usize,
    pub selection_rule: String,
}

impl SelectionReport {
    pub fn row(&self, n_classes: usize) -> Option<&SelectionRow> {
        self.rows.iter().find(|r| r.n_classes == n_classes)
    }

    /// CSV with header `G,loglik,n_params,AIC,BIC,entropy,ICL,converged`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("G,loglik,n_params,AIC,BIC,entropy,ICL,converged\n");
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let c = r.criteria;
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.n_classes,
                num(r.loglik),
                r.n_params,
                num(c.map(|c| c.aic)),
                num(c.map(|c| c.bic)),
                num(c.map(|c| c.entropy)),
                num(c.map(|c| c.icl)),
                u8::from(r.converged)
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SelectionError> {
        let io = |source| SelectionError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(io)
    }
}

/// Result of a class-count search: the report and the fit of every candidate
/// that produced one.
#[derive(Debug, Clone)]
pub struct Selection {
    pub report: SelectionReport,
    pub fits: Vec<(usize, FitResult)>,
}

impl Selection {
    pub fn selected_fit(&self) -> &FitResult {
        let g = self.report.selected_classes;
        &self
            .fits
            .iter()
            .find(|(n, _)| *n == g)
            .expect("selected candidate has a fit")
            .1
    }
}

/// Relative log-likelihood tolerance when checking monotonicity in G.
pub const MONOTONE_TOLERANCE: f64 = 1e-3;

/// Fits every class count in `classes` and picks the converged candidate of
/// minimum ICL (ties go to the smaller G). Candidate `G` optimises with seed
/// `base_spec.optimizer.seed + G`.
pub fn select_classes(cohort: &Cohort, base_spec: &ModelSpec, classes: &[usize]) -> Result<Selection, SelectionError> {
    if classes.is_empty() {
        return Err(SelectionError::EmptyRange);
    }
    if classes.contains(&0) {
        return Err(SelectionError::ZeroClasses);
    }
    let mut grid = classes.to_vec();
    grid.sort_unstable();
    grid.dedup();

    type Outcome = (usize, Result<(FitResult, MembershipTable), LcmmError>);
    let outcomes: Vec<Outcome> = grid
        .par_iter()
        .map(|&g| {
            let mut spec = base_spec.clone();
            spec.n_classes = g;
            spec.optimizer.seed = base_spec.optimizer.seed.wrapping_add(g as u64);
            let result = fit(cohort, &spec).and_then(|f| {
                let m = posterior_memberships(cohort, &f)?;
                Ok((f, m))
            });
            (g, result)
        })
        .collect();

    let mut rows = Vec::with_capacity(outcomes.len());
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for (g, outcome) in outcomes {
        match outcome {
            Ok((f, m)) => {
                rows.push(SelectionRow {
                    n_classes: g,
                    loglik: Some(f.loglik),
                    n_params: f.n_params,
                    criteria: Some(information_criteria(&f, &m)),
                    converged: f.convergence.converged,
                    monotonicity_violation: false,
                    mean_max_posterior: Some(m.mean_max_posterior()),
                });
                fits.push((g, f));
            }
            Err(LcmmError::AllStartsFailed(diag)) => {
                let mut spec = base_spec.clone();
                spec.n_classes = g;
                failures.push(format!("G={g}: {} starts failed", diag.len()));
                rows.push(SelectionRow {
                    n_classes: g,
                    loglik: None,
                    n_params: crate::lcmm::ParamLayout::new(&spec).len(),
                    criteria: None,
                    converged: false,
                    monotonicity_violation: false,
                    mean_max_posterior: None,
                });
            }
            Err(e) => return Err(e.into()),
        }
    }

    let mut best_smaller: Option<f64> = None;
    for row in rows.iter_mut() {
        if let (Some(ll), Some(prev)) = (row.loglik, best_smaller) {
            if ll < prev - MONOTONE_TOLERANCE * prev.abs() {
                row.monotonicity_violation = true;
                row.converged = false;
            }
        }
        if let Some(ll) = row.loglik {
            best_smaller = Some(best_smaller.map_or(ll, |p| p.max(ll)));
        }
    }

    let selected = rows
        .iter()
        .filter(|r| r.converged)
        .filter_map(|r| r.criteria.map(|c| (r.n_classes, c.icl)))
        .fold(None::<(usize, f64)>, |best, (g, icl)| match best {
            Some((_, b)) if b <= icl => best,
            _ => Some((g, icl)),
        })
        .map(|(g, _)| g)
        .ok_or_else(|| SelectionError::NoneConverged(failures.join("; ")))?;

    Ok(Selection {
        report: SelectionReport {
            rows,
            selected_classes: selected,
            selection_rule: SELECTION_RULE.into(),
        },
        fits,
    })
}
