//! Baseline characteristics of latent classes: cross-cluster comparisons by
//! GEE with subjects as clusters, odds ratios for class membership, and
//! Kaplan-Meier conversion curves.

mod gee;
mod survival;

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use gee::{
    collinear_columns, gee_fit, normal_p_value, Family, GeeData, GeeResult, WorkingCorrelation, GEE_MAX_ITERATIONS,
    GEE_TOLERANCE,
};
pub use survival::{
    kaplan_meier, log_rank, log_rank_across_clusters, product_limit, survival_csv, LogRankTest, SurvivalCurve,
    SurvivalPoint,
};

use crate::cohort::{mean_sd, Cohort, CovariateKind, EyeEvent};
use crate::lcmm::MembershipTable;

const Z_95: f64 = 1.959_963_984_540_054;

/// Binary variables rarer than this are left out of categorical analyses.
pub const MIN_PREVALENCE: f64 = 0.01;

/// Name of the binary covariate added by [`with_conversion_covariate`].
pub const CONVERSION: &str = "conversion";

#[derive(Debug, Error)]
pub enum CharacterizationError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error("variable `{0}` is not in the covariate schema")]
    UnknownVariable(String),
    #[error("design matrix is rank deficient; collinear columns: {}", .0.join(", "))]
    RankDeficient(Vec<String>),
    #[error("estimate on the boundary: {0}")]
    Boundary(String),
    #[error("GEE did not converge in {0} iterations")]
    NotConverged(usize),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("no contrast: {0}")]
    NoContrast(String),
}

struct Unit<'a> {
    class: usize,
    value: f64,
    subject: &'a str,
}

/// Complete-case rows for `variable`: eyes with a membership and a value.
fn units<'a>(
    memberships: &MembershipTable,
    cohort: &'a Cohort,
    variable: &str,
) -> Result<(CovariateKind, Vec<Unit<'a>>), CharacterizationError> {
    let kind = cohort
        .covariate_schema
        .kind(variable)
        .ok_or_else(|| CharacterizationError::UnknownVariable(variable.to_string()))?;
    let class_of: HashMap<&str, usize> = memberships
        .eye_ids
        .iter()
        .zip(&memberships.map_class)
        .map(|(id, &c)| (id.as_str(), c))
        .collect();
    let rows = cohort
        .eyes
        .iter()
        .filter_map(|e| {
            let class = *class_of.get(e.eye_id.as_str())?;
            let value = e.covariate(variable)?;
            Some(Unit {
                class,
                value,
                subject: e.subject_id.as_str(),
            })
        })
        .collect();
    Ok((kind, rows))
}

fn family_for(kind: CovariateKind) -> Family {
    match kind {
        CovariateKind::Continuous => Family::GaussianIdentity,
        CovariateKind::Binary => Family::BinomialLogit,
    }
}

/// Per-cluster descriptive cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClusterCell {
    Continuous { n: usize, mean: f64, sd: f64 },
    Binary { n: usize, count: usize, percent: f64 },
}

impl ClusterCell {
    fn from_values(kind: CovariateKind, values: &[f64]) -> Self {
        match kind {
            CovariateKind::Continuous => {
                let (mean, sd) = mean_sd(values);
                ClusterCell::Continuous {
                    n: values.len(),
                    mean,
                    sd,
                }
            }
            CovariateKind::Binary => {
                let count = values.iter().filter(|&&v| v == 1.0).count();
                let percent = if values.is_empty() {
                    0.0
                } else {
                    100.0 * count as f64 / values.len() as f64
                };
                ClusterCell::Binary {
                    n: values.len(),
                    count,
                    percent,
                }
            }
        }
    }

    /// `mean (sd)` for continuous cells, the percentage for binary ones.
    pub fn display(&self) -> String {
        match self {
            ClusterCell::Continuous { n: 0, .. } | ClusterCell::Binary { n: 0, .. } => String::new(),
            ClusterCell::Continuous { mean, sd, .. } => format!("{mean:.4} ({sd:.4})"),
            ClusterCell::Binary { percent, .. } => format!("{percent:.4}"),
        }
    }
}

/// Descriptive summary of `variable` in every cluster.
pub fn cluster_cells(
    memberships: &MembershipTable,
    cohort: &Cohort,
    variable: &str,
) -> Result<Vec<ClusterCell>, CharacterizationError> {
    let (kind, rows) = units(memberships, cohort, variable)?;
    Ok((0..memberships.n_classes())
        .map(|g| {
            let values: Vec<f64> = rows.iter().filter(|u| u.class == g).map(|u| u.value).collect();
            ClusterCell::from_values(kind, &values)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterComparison {
    pub variable: String,
    pub gee: GeeResult,
    pub wald_statistic: f64,
    pub df: usize,
    /// Joint Wald p-value for equality of the variable across clusters.
    pub p_value: f64,
}

/// Regresses the variable (gaussian for continuous, logit for binary) on
/// cluster indicators with subject-level exchangeable GEE and tests equality
/// of all cluster effects jointly.
pub fn compare_across_clusters(
    memberships: &MembershipTable,
    cohort: &Cohort,
    variable: &str,
) -> Result<ClusterComparison, CharacterizationError> {
    let (kind, rows) = units(memberships, cohort, variable)?;
    let mut present: Vec<usize> = rows.iter().map(|u| u.class).collect();
    present.sort_unstable();
    present.dedup();
    if present.len() < 2 {
        return Err(CharacterizationError::NoContrast(format!(
            "`{variable}` is observed in fewer than two clusters"
        )));
    }
    let others = &present[1..];
    let mut predictors = vec!["intercept".to_string()];
    predictors.extend(others.iter().map(|g| format!("cluster{}", g + 1)));
    let x = DMatrix::from_fn(rows.len(), predictors.len(), |i, j| {
        if j == 0 {
            1.0
        } else {
            f64::from(u8::from(rows[i].class == others[j - 1]))
        }
    });
    let data = GeeData {
        outcome: variable.to_string(),
        predictors,
        y: rows.iter().map(|u| u.value).collect(),
        x,
        clusters: rows.iter().map(|u| u.subject.to_string()).collect(),
    };
    let gee = gee_fit(&data, family_for(kind), WorkingCorrelation::Exchangeable)?;
    let indices: Vec<usize> = (1..gee.predictors.len()).collect();
    let (wald_statistic, df, p_value) = gee.joint_wald(&indices)?;
    Ok(ClusterComparison {
        variable: variable.to_string(),
        gee,
        wald_statistic,
        df,
        p_value,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Contrast {
    /// Steepest-decline cluster against the two least-declining clusters.
    FastVsNonProgressors,
    /// One cluster against all others.
    ClusterVsRest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OddsRatioRow {
    pub variable: String,
    /// 1-based cluster whose membership is the outcome.
    pub cluster: usize,
    pub contrast: Contrast,
    /// Odds multiplier per unit of the variable; `None` on the boundary.
    pub odds_ratio: Option<f64>,
    pub ci: Option<(f64, f64)>,
    pub p_value: Option<f64>,
    pub boundary: Option<String>,
}

/// Logit GEE of membership on the variable with independence working
/// correlation and subject-clustered sandwich errors. Membership is shared by
/// a subject's eyes, so a non-diagonal working correlation would estimate the
/// within-subject association of eye-level variables instead of the marginal
/// odds ratio.
fn odds_row(
    rows: &[Unit],
    kind: CovariateKind,
    variable: &str,
    target: usize,
    contrast: Contrast,
) -> Result<OddsRatioRow, CharacterizationError> {
    let boundary = |reason: String| OddsRatioRow {
        variable: variable.to_string(),
        cluster: target + 1,
        contrast,
        odds_ratio: None,
        ci: None,
        p_value: None,
        boundary: Some(reason),
    };
    let first = rows.first().map(|u| u.value);
    if rows.iter().all(|u| Some(u.value) == first) {
        return Ok(boundary(format!("`{variable}` is constant")));
    }
    if kind == CovariateKind::Binary {
        let mut cells = [[0usize; 2]; 2];
        for u in rows {
            cells[usize::from(u.value == 1.0)][usize::from(u.class == target)] += 1;
        }
        if cells.iter().flatten().any(|&c| c == 0) {
            return Ok(boundary(format!("`{variable}` has an empty cell in the 2x2 table")));
        }
    }
    let data = GeeData {
        outcome: format!("cluster{}", target + 1),
        predictors: vec!["intercept".into(), variable.to_string()],
        y: rows.iter().map(|u| f64::from(u8::from(u.class == target))).collect(),
        x: DMatrix::from_fn(rows.len(), 2, |i, j| if j == 0 { 1.0 } else { rows[i].value }),
        clusters: rows.iter().map(|u| u.subject.to_string()).collect(),
    };
    let gee = match gee_fit(&data, Family::BinomialLogit, WorkingCorrelation::Independence) {
        Ok(g) => g,
        Err(CharacterizationError::Boundary(reason)) => return Ok(boundary(reason)),
        Err(e) => return Err(e),
    };
    let (b, se) = (gee.coefficients[1], gee.robust_se[1]);
    Ok(OddsRatioRow {
        variable: variable.to_string(),
        cluster: target + 1,
        contrast,
        odds_ratio: Some(b.exp()),
        ci: Some(((b - Z_95 * se).exp(), (b + Z_95 * se).exp())),
        p_value: Some(gee.p_values[1]),
        boundary: None,
    })
}

/// Odds ratio of membership in the last canonical cluster (steepest decline)
/// against clusters 1 and 2 combined, per unit of `variable`.
pub fn fast_progressor_odds(
    memberships: &MembershipTable,
    cohort: &Cohort,
    variable: &str,
) -> Result<OddsRatioRow, CharacterizationError> {
    let g = memberships.n_classes();
    if g < 3 {
        return Err(CharacterizationError::NoContrast(format!(
            "fast-progressor contrast needs at least 3 clusters, found {g}"
        )));
    }
    let fast = g - 1;
    let (kind, rows) = units(memberships, cohort, variable)?;
    let rows: Vec<Unit> = rows.into_iter().filter(|u| u.class <= 1 || u.class == fast).collect();
    for c in [0, 1, fast] {
        if !rows.iter().any(|u| u.class == c) {
            return Err(CharacterizationError::NoContrast(format!(
                "cluster {} has no eyes with `{variable}`",
                c + 1
            )));
        }
    }
    odds_row(&rows, kind, variable, fast, Contrast::FastVsNonProgressors)
}

/// Odds ratio of membership in `cluster` (0-based) against all other clusters.
pub fn cluster_odds(
    memberships: &MembershipTable,
    cohort: &Cohort,
    variable: &str,
    cluster: usize,
) -> Result<OddsRatioRow, CharacterizationError> {
    let (kind, rows) = units(memberships, cohort, variable)?;
    if !rows.iter().any(|u| u.class == cluster) || rows.iter().all(|u| u.class == cluster) {
        return Err(CharacterizationError::NoContrast(format!(
            "cluster {} is empty or the only cluster",
            cluster + 1
        )));
    }
    odds_row(&rows, kind, variable, cluster, Contrast::ClusterVsRest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChordRow {
    pub cluster: usize,
    pub variable: String,
    pub odds_ratio: f64,
}

/// Rows with odds ratio above 1, sorted by decreasing odds ratio, for an
/// external chord-diagram renderer.
pub fn association_chord_table(rows: &[OddsRatioRow]) -> Vec<ChordRow> {
    let mut out: Vec<ChordRow> = rows
        .iter()
        .filter_map(|r| {
            let or = r.odds_ratio?;
            (or > 1.0).then(|| ChordRow {
                cluster: r.cluster,
                variable: r.variable.clone(),
                odds_ratio: or,
            })
        })
        .collect();
    out.sort_by(|a, b| b.odds_ratio.total_cmp(&a.odds_ratio));
    out
}

pub fn chord_csv(rows: &[ChordRow]) -> String {
    let mut out = String::from("cluster,variable,odds_ratio\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.cluster, r.variable, r.odds_ratio));
    }
    out
}

/// Copy of the cohort with a binary `conversion` covariate taken from the
/// event records (missing for eyes without a record).
pub fn with_conversion_covariate(cohort: &Cohort, events: &[EyeEvent]) -> Cohort {
    let flag: HashMap<&str, bool> = events.iter().map(|e| (e.eye_id.as_str(), e.record.event)).collect();
    let mut out = cohort.clone();
    if out.covariate_schema.kind(CONVERSION).is_none() {
        out.covariate_schema
            .columns
            .push((CONVERSION.to_string(), CovariateKind::Binary));
    }
    for eye in &mut out.eyes {
        let v = flag.get(eye.eye_id.as_str()).map(|&f| f64::from(u8::from(f)));
        eye.covariates.insert(CONVERSION.to_string(), v);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableRow {
    pub variable: String,
    pub kind: CovariateKind,
    pub cells: Vec<ClusterCell>,
    pub p_all: Option<f64>,
    pub fast_odds: Option<OddsRatioRow>,
    /// Why a test was not reported.
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationReport {
    pub n_clusters: usize,
    pub rows: Vec<VariableRow>,
    /// Binary variables left out for prevalence below [`MIN_PREVALENCE`].
    pub excluded_rare: Vec<String>,
    /// Odds ratios of every cluster against the rest, for every variable.
    pub cluster_odds: Vec<OddsRatioRow>,
}

fn prevalence(memberships: &MembershipTable, cohort: &Cohort, variable: &str) -> Result<f64, CharacterizationError> {
    let (_, rows) = units(memberships, cohort, variable)?;
    if rows.is_empty() {
        return Ok(0.0);
    }
    Ok(rows.iter().filter(|u| u.value == 1.0).count() as f64 / rows.len() as f64)
}

/// Univariable analysis of every listed variable: descriptive cells, joint
/// cross-cluster test, fast-progressor odds ratio and per-cluster odds ratios.
pub fn characterize(
    memberships: &MembershipTable,
    cohort: &Cohort,
    variables: &[String],
) -> Result<CharacterizationReport, CharacterizationError> {
    let mut kept = Vec::new();
    let mut excluded_rare = Vec::new();
    for v in variables {
        let kind = cohort
            .covariate_schema
            .kind(v)
            .ok_or_else(|| CharacterizationError::UnknownVariable(v.clone()))?;
        if kind == CovariateKind::Binary && prevalence(memberships, cohort, v)? < MIN_PREVALENCE {
            excluded_rare.push(v.clone());
        } else {
            kept.push((v.clone(), kind));
        }
    }
    let g = memberships.n_classes();
    let rows = kept
        .par_iter()
        .map(|(v, kind)| {
            let mut notes = Vec::new();
            let cells = cluster_cells(memberships, cohort, v)?;
            let p_all = match compare_across_clusters(memberships, cohort, v) {
                Ok(c) => Some(c.p_value),
                Err(e) => {
                    notes.push(format!("cluster comparison: {e}"));
                    None
                }
            };
            let fast_odds = match fast_progressor_odds(memberships, cohort, v) {
                Ok(r) => {
                    if let Some(b) = &r.boundary {
                        notes.push(format!("odds ratio: {b}"));
                    }
                    Some(r)
                }
                Err(e) => {
                    notes.push(format!("odds ratio: {e}"));
                    None
                }
            };
            Ok(VariableRow {
                variable: v.clone(),
                kind: *kind,
                cells,
                p_all,
                fast_odds,
                notes,
            })
        })
        .collect::<Result<Vec<_>, CharacterizationError>>()?;
    let cluster_odds = kept
        .par_iter()
        .flat_map_iter(|(v, _)| (0..g).filter_map(move |c| cluster_odds(memberships, cohort, v, c).ok()))
        .collect();
    Ok(CharacterizationReport {
        n_clusters: g,
        rows,
        excluded_rare,
        cluster_odds,
    })
}

impl CharacterizationReport {
    /// CSV with header `variable,c1,...,cG,p_all,p_G_vs_12,or,or_low,or_high`.
    pub fn to_csv(&self) -> String {
        let g = self.n_clusters;
        let mut out = String::from("variable");
        for c in 1..=g {
            out.push_str(&format!(",c{c}"));
        }
        out.push_str(&format!(",p_all,p_{g}_vs_12,or,or_low,or_high\n"));
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            out.push_str(&r.variable);
            for cell in &r.cells {
                out.push(',');
                out.push_str(&cell.display());
            }
            let odds = r.fast_odds.as_ref();
            out.push_str(&format!(
                ",{},{},{},{},{}\n",
                num(r.p_all),
                num(odds.and_then(|o| o.p_value)),
                num(odds.and_then(|o| o.odds_ratio)),
                num(odds.and_then(|o| o.ci.map(|c| c.0))),
                num(odds.and_then(|o| o.ci.map(|c| c.1)))
            ));
        }
        out
    }

    pub fn chord_table(&self) -> Vec<ChordRow> {
        association_chord_table(&self.cluster_odds)
    }
}
