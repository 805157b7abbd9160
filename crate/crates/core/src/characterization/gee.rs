//! Generalized estimating equations with cluster-robust (sandwich) inference.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use super::CharacterizationError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    GaussianIdentity,
    BinomialLogit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable,
}

/// Rows of a GEE problem: outcome, design matrix (including any intercept
/// column) and the cluster each row belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct GeeData {
    pub outcome: String,
    pub predictors: Vec<String>,
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    pub clusters: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeeResult {
    pub outcome: String,
    pub predictors: Vec<String>,
    pub family: Family,
    pub correlation: WorkingCorrelation,
    pub coefficients: Vec<f64>,
    pub robust_se: Vec<f64>,
    /// Row-major robust covariance.
    pub robust_covariance: Vec<Vec<f64>>,
    pub wald_z: Vec<f64>,
    pub p_values: Vec<f64>,
    /// Exchangeable correlation; 0 under independence.
    pub alpha: f64,
    pub scale: f64,
    pub n_clusters: usize,
    pub n_units: usize,
    pub iterations: usize,
}

impl GeeResult {
    pub fn coefficient(&self, name: &str) -> Option<(f64, f64)> {
        let k = self.predictors.iter().position(|p| p == name)?;
        Some((self.coefficients[k], self.robust_se[k]))
    }

    /// Joint Wald test that the coefficients at `indices` are all zero.
    /// Returns `(statistic, df, p)`.
    pub fn joint_wald(&self, indices: &[usize]) -> Result<(f64, usize, f64), CharacterizationError> {
        let k = indices.len();
        if k == 0 {
            return Err(CharacterizationError::NoContrast("no coefficients to test".into()));
        }
        let b = DVector::from_iterator(k, indices.iter().map(|&i| self.coefficients[i]));
        let cov = DMatrix::from_fn(k, k, |r, c| self.robust_covariance[indices[r]][indices[c]]);
        let inv = cov
            .cholesky()
            .ok_or_else(|| {
                CharacterizationError::Numerical("robust covariance of the tested block is singular".into())
            })?
            .inverse();
        let stat = (b.transpose() * inv * &b)[(0, 0)];
        let chi = ChiSquared::new(k as f64).expect("positive degrees of freedom");
        Ok((stat, k, chi.sf(stat).clamp(0.0, 1.0)))
    }
}

pub const GEE_TOLERANCE: f64 = 1e-8;
pub const GEE_MAX_ITERATIONS: usize = 100;
/// Linear predictors beyond this magnitude signal a fitted probability on
/// the boundary.
const BOUNDARY_ETA: f64 = 30.0;

/// Two-sided normal p-value of a Wald statistic.
pub fn normal_p_value(z: f64) -> f64 {
    let n = Normal::standard();
    (2.0 * n.sf(z.abs())).clamp(0.0, 1.0)
}

/// Names of columns that lie (numerically) in the span of earlier columns.
pub fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut out = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col.clone();
        for q in &basis {
            let proj = q.dot(&r);
            r -= q * proj;
        }
        if norm == 0.0 || r.norm() <= 1e-10 * norm.max(1.0) {
            out.push(names.get(j).cloned().unwrap_or_else(|| format!("column {j}")));
        } else {
            let n = r.norm();
            basis.push(r / n);
        }
    }
    out
}

struct Clusters {
    rows: Vec<Vec<usize>>,
}

impl Clusters {
    fn new(ids: &[String]) -> Self {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut rows: Vec<Vec<usize>> = Vec::new();
        for (i, id) in ids.iter().enumerate() {
            let k = *index.entry(id.as_str()).or_insert_with(|| {
                rows.push(Vec::new());
                rows.len() - 1
            });
            rows[k].push(i);
        }
        Self { rows }
    }
}

fn mean_and_derivative(family: Family, eta: f64) -> (f64, f64, f64) {
    match family {
        Family::GaussianIdentity => (eta, 1.0, 1.0),
        Family::BinomialLogit => {
            let mu = 1.0 / (1.0 + (-eta).exp());
            let v = mu * (1.0 - mu);
            (mu, v, v)
        }
    }
}

/// Working correlation inverse for a cluster of size `m`: (1-α)⁻¹ [I - α/(1+(m-1)α) J].
fn exchangeable_inverse(m: usize, alpha: f64) -> DMatrix<f64> {
    if alpha == 0.0 || m == 1 {
        return DMatrix::identity(m, m);
    }
    let c = alpha / (1.0 + (m as f64 - 1.0) * alpha);
    DMatrix::from_fn(m, m, |i, j| ((if i == j { 1.0 } else { 0.0 }) - c) / (1.0 - alpha))
}

/// Information matrix `Σ DᵀV⁻¹D`, score `Σ DᵀV⁻¹(y-μ)` and the outer product
/// of cluster scores. The scale cancels in every use, so V omits it.
fn estimating_terms(
    data: &GeeData,
    clusters: &Clusters,
    family: Family,
    eta: &DVector<f64>,
    alpha: f64,
) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let p = data.x.ncols();
    let mut bread = DMatrix::<f64>::zeros(p, p);
    let mut score = DVector::<f64>::zeros(p);
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for rows in &clusters.rows {
        let m = rows.len();
        let mut d = DMatrix::<f64>::zeros(m, p);
        let mut resid = DVector::<f64>::zeros(m);
        let mut sd = DVector::<f64>::zeros(m);
        for (a, &i) in rows.iter().enumerate() {
            let (mu, v, dmu) = mean_and_derivative(family, eta[i]);
            for k in 0..p {
                d[(a, k)] = dmu * data.x[(i, k)];
            }
            resid[a] = data.y[i] - mu;
            sd[a] = v.sqrt();
        }
        let rinv = exchangeable_inverse(m, alpha);
        let vinv = DMatrix::from_fn(m, m, |a, b| rinv[(a, b)] / (sd[a] * sd[b]));
        let dt_vinv = d.transpose() * vinv;
        bread += &dt_vinv * &d;
        let s = &dt_vinv * &resid;
        meat += &s * s.transpose();
        score += s;
    }
    (bread, score, meat)
}

/// Fits a GEE by Fisher scoring. The exchangeable correlation is estimated by
/// moments from Pearson residuals; the robust covariance is the sandwich
/// built from cluster-level score sums.
pub fn gee_fit(
    data: &GeeData,
    family: Family,
    correlation: WorkingCorrelation,
) -> Result<GeeResult, CharacterizationError> {
    let n = data.y.len();
    let p = data.x.ncols();
    if data.x.nrows() != n || data.clusters.len() != n || data.predictors.len() != p {
        return Err(CharacterizationError::Input(
            "outcome, design and cluster lengths disagree".into(),
        ));
    }
    let clusters = Clusters::new(&data.clusters);
    if clusters.rows.len() < 2 {
        return Err(CharacterizationError::Input(
            "at least two clusters are required".into(),
        ));
    }
    if n <= p {
        return Err(CharacterizationError::Input(format!("{n} rows for {p} coefficients")));
    }
    let collinear = collinear_columns(&data.x, &data.predictors);
    if !collinear.is_empty() {
        return Err(CharacterizationError::RankDeficient(collinear));
    }
    if family == Family::BinomialLogit {
        if data.y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(CharacterizationError::Input("binomial outcome must be 0/1".into()));
        }
        let ones = data.y.iter().filter(|&&v| v == 1.0).count();
        if ones == 0 || ones == n {
            return Err(CharacterizationError::Boundary(format!(
                "outcome `{}` is constant; no finite logit estimate",
                data.outcome
            )));
        }
    }

    let mut beta = DVector::<f64>::zeros(p);
    let mut alpha = 0.0;
    let mut scale;
    let mut iterations = 0;
    let max_size = clusters.rows.iter().map(Vec::len).max().unwrap_or(1);
    let n_pairs: f64 = clusters.rows.iter().map(|r| (r.len() * (r.len() - 1) / 2) as f64).sum();

    let pearson = |beta: &DVector<f64>| -> Vec<f64> {
        let eta = &data.x * beta;
        (0..n)
            .map(|i| {
                let (mu, v, _) = mean_and_derivative(family, eta[i]);
                (data.y[i] - mu) / v.sqrt()
            })
            .collect()
    };

    loop {
        iterations += 1;
        let eta = &data.x * &beta;
        if eta.iter().any(|e| !e.is_finite()) {
            return Err(CharacterizationError::Numerical(
                "linear predictor is not finite".into(),
            ));
        }
        if family == Family::BinomialLogit && eta.iter().any(|e| e.abs() > BOUNDARY_ETA) {
            return Err(CharacterizationError::Boundary(
                "fitted probabilities reach 0 or 1".into(),
            ));
        }
        let (bread, score, _) = estimating_terms(data, &clusters, family, &eta, alpha);
        let step = bread
            .cholesky()
            .ok_or_else(|| CharacterizationError::Numerical("GEE information matrix is singular".into()))?
            .solve(&score);
        beta += &step;

        let r = pearson(&beta);
        scale = r.iter().map(|v| v * v).sum::<f64>() / (n - p) as f64;
        if correlation == WorkingCorrelation::Exchangeable && n_pairs > 0.0 {
            let mut cross = 0.0;
            for rows in &clusters.rows {
                for a in 0..rows.len() {
                    for b in (a + 1)..rows.len() {
                        cross += r[rows[a]] * r[rows[b]];
                    }
                }
            }
            let denom = (n_pairs - p as f64).max(1.0);
            let lower = if max_size > 1 {
                -1.0 / (max_size as f64 - 1.0) + 1e-6
            } else {
                -0.999_999
            };
            alpha = (cross / (denom * scale)).clamp(lower, 0.999_999);
        }
        if step.amax() < GEE_TOLERANCE {
            break;
        }
        if iterations >= GEE_MAX_ITERATIONS {
            return Err(CharacterizationError::NotConverged(iterations));
        }
    }

    let eta = &data.x * &beta;
    let (bread, _, meat) = estimating_terms(data, &clusters, family, &eta, alpha);
    let bread_inv = bread
        .cholesky()
        .ok_or_else(|| CharacterizationError::Numerical("GEE information matrix is singular".into()))?
        .inverse();
    let cov = &bread_inv * meat * &bread_inv;
    let cov = (&cov + cov.transpose()) * 0.5;

    let coefficients: Vec<f64> = beta.iter().copied().collect();
    let robust_se: Vec<f64> = (0..p).map(|k| cov[(k, k)].max(0.0).sqrt()).collect();
    let wald_z: Vec<f64> = coefficients.iter().zip(&robust_se).map(|(b, s)| b / s).collect();
    let p_values = wald_z.iter().map(|&z| normal_p_value(z)).collect();
    Ok(GeeResult {
        outcome: data.outcome.clone(),
        predictors: data.predictors.clone(),
        family,
        correlation,
        coefficients,
        robust_se,
        robust_covariance: (0..p).map(|r| (0..p).map(|c| cov[(r, c)]).collect()).collect(),
        wald_z,
        p_values,
        alpha,
        scale,
        n_clusters: clusters.rows.len(),
        n_units: n,
        iterations,
    })
}
