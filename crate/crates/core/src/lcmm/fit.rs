//! Multi-start maximum-likelihood fitting and posterior class membership.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::likelihood::Model;
use super::model::{BasisFn, BetaShape, FixedIntercept, ModelSpec, ParamLayout, Parameters, Slot, SIGMA_FLOOR};
use super::optimize::{minimize, Termination};
use super::{LcmmError, StartDiagnostic};
use crate::cohort::{Cohort, ValueRange};
use crate::link::{LinkKind, LinkSpec, RESCALE_GUARD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub termination: Termination,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    /// Parameters in canonical class order.
    pub params: Parameters,
    /// Rescaling range of the beta link (also recorded for identity fits).
    pub value_range: Option<ValueRange>,
    pub loglik: f64,
    pub n_params: usize,
    pub n_eyes: usize,
    pub convergence: Convergence,
    pub start_index: usize,
    /// `class_order[k]` is the optimiser's class index of canonical class k.
    pub class_order: Vec<usize>,
    /// Canonical classes whose weight fell below 1 / (10 · n_eyes).
    pub degenerate_classes: Vec<usize>,
    pub starts: Vec<StartDiagnostic>,
}

impl FitResult {
    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn link(&self) -> Result<LinkSpec, LcmmError> {
        self.params.link_spec(self.value_range)
    }

    /// Class slopes (coefficient of t in the class basis), canonical order.
    pub fn slopes(&self) -> Option<Vec<f64>> {
        let k = self.spec.slope_index()?;
        Some(self.params.class_effects.iter().map(|v| v[k]).collect())
    }
}

/// Posterior class probabilities per eye.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipTable {
    pub eye_ids: Vec<String>,
    pub tau: Vec<Vec<f64>>,
    /// Canonical class index (0-based) of the largest posterior.
    pub map_class: Vec<usize>,
    pub max_posterior: Vec<f64>,
}

impl MembershipTable {
    pub fn n_classes(&self) -> usize {
        self.tau.first().map_or(0, Vec::len)
    }

    pub fn len(&self) -> usize {
        self.eye_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eye_ids.is_empty()
    }

    pub fn mean_max_posterior(&self) -> f64 {
        if self.max_posterior.is_empty() {
            return f64::NAN;
        }
        self.max_posterior.iter().sum::<f64>() / self.max_posterior.len() as f64
    }

    /// Builds a table from posterior rows; MAP ties go to the lowest class.
    pub fn from_posteriors(eye_ids: Vec<String>, tau: Vec<Vec<f64>>) -> Self {
        let (map_class, max_posterior) = tau
            .iter()
            .map(|row| {
                row.iter().enumerate().fold(
                    (0usize, f64::NEG_INFINITY),
                    |(bi, bv), (i, &v)| {
                        if v > bv {
                            (i, v)
                        } else {
                            (bi, bv)
                        }
                    },
                )
            })
            .unzip();
        Self {
            eye_ids,
            tau,
            map_class,
            max_posterior,
        }
    }

    /// Hard assignment table, e.g. from known labels.
    pub fn from_labels(eye_ids: Vec<String>, labels: &[usize], n_classes: usize) -> Self {
        let tau = labels
            .iter()
            .map(|&c| (0..n_classes).map(|g| if g == c { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_posteriors(eye_ids, tau)
    }

    /// Class sizes by MAP label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        self.map_class.iter().for_each(|&c| counts[c] += 1);
        counts
    }
}

fn ols_line(times: &[f64], values: &[f64]) -> (f64, f64) {
    let n = times.len() as f64;
    let mt = times.iter().sum::<f64>() / n;
    let my = values.iter().sum::<f64>() / n;
    let sxx: f64 = times.iter().map(|t| (t - mt).powi(2)).sum();
    let sxy: f64 = times.iter().zip(values).map(|(t, y)| (t - mt) * (y - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    (my - slope * mt, slope)
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    // normal equations are tiny; SVD handles rank-deficient bases
    let ata = a.tr_mul(a);
    let atb = a.tr_mul(b);
    ata.svd(true, true)
        .solve(&atb, 1e-12)
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Deterministic slope-stratified initial values plus per-slot perturbation scales.
pub(crate) struct Initialization {
    pub params: Parameters,
    pub scales: Vec<f64>,
}

pub(crate) fn initialize(
    cohort: &Cohort,
    spec: &ModelSpec,
    range: Option<ValueRange>,
) -> Result<Initialization, LcmmError> {
    let g_n = spec.n_classes;
    let q = spec.n_random();
    let p1 = spec.n_common();
    let range = range.or(cohort.value_range);

    // latent values under the starting link (a = b = 1, before offset/scale)
    let rescale = |y: f64| match (spec.link, range) {
        (LinkKind::Beta, Some(r)) => (y - r.min + RESCALE_GUARD) / (r.width() + 2.0 * RESCALE_GUARD),
        _ => y,
    };
    let latent: Vec<Vec<f64>> = cohort
        .eyes
        .iter()
        .map(|e| e.values.iter().map(|&y| rescale(y)).collect())
        .collect();

    let slopes: Vec<f64> = cohort
        .eyes
        .iter()
        .zip(&latent)
        .map(|(e, l)| ols_line(&e.times, l).1)
        .collect();
    let mut order: Vec<usize> = (0..cohort.len()).collect();
    order.sort_by(|&a, &b| slopes[b].total_cmp(&slopes[a]).then(a.cmp(&b)));
    let n = order.len();
    let group_of = |rank: usize| (rank * g_n / n).min(g_n - 1);
    let mut groups = vec![Vec::new(); g_n];
    for (rank, &i) in order.iter().enumerate() {
        groups[group_of(rank)].push(i);
    }

    let w_of = |i: usize| {
        let t = &cohort.eyes[i].times;
        let mut cols: Vec<BasisFn> = spec.common_fixed_basis.clone();
        cols.extend(&spec.class_fixed_basis);
        DMatrix::from_fn(t.len(), cols.len(), |r, c| cols[c].eval(t[r]))
    };

    let mut class_effects = Vec::with_capacity(g_n);
    let mut beta = vec![0.0; p1];
    for members in &groups {
        let p = p1 + spec.n_class_fixed();
        let mut ata = DMatrix::zeros(p, p);
        let mut atb = DVector::zeros(p);
        for &i in members {
            let w = w_of(i);
            let y = DVector::from_column_slice(&latent[i]);
            ata += w.tr_mul(&w);
            atb += w.tr_mul(&y);
        }
        let coef = ata
            .svd(true, true)
            .solve(&atb, 1e-12)
            .unwrap_or_else(|_| DVector::zeros(p));
        for k in 0..p1 {
            beta[k] += coef[k] * members.len() as f64 / n as f64;
        }
        class_effects.push(coef.rows(p1, spec.n_class_fixed()).iter().copied().collect::<Vec<_>>());
    }

    // per-eye OLS on the random basis: spread of coefficients and residual variance
    let mut rss = 0.0;
    let mut dof = 0.0;
    let mut coefs: Vec<DVector<f64>> = Vec::with_capacity(n);
    for (i, e) in cohort.eyes.iter().enumerate() {
        let z = DMatrix::from_fn(e.times.len(), q, |r, c| spec.random_basis[c].eval(e.times[r]));
        let y = DVector::from_column_slice(&latent[i]);
        let b = lstsq(&z, &y);
        let resid = &y - &z * &b;
        rss += resid.dot(&resid);
        dof += (e.times.len() - q.min(e.times.len())) as f64;
        coefs.push(b);
    }
    let sigma2 = if dof > 0.0 { rss / dof } else { 1.0 };
    let mut cov = DMatrix::<f64>::zeros(q, q);
    for members in &groups {
        if members.is_empty() {
            continue;
        }
        let mean = members.iter().fold(DVector::zeros(q), |acc, &i| acc + &coefs[i]) / members.len() as f64;
        for &i in members {
            let d = &coefs[i] - &mean;
            cov += &d * d.transpose();
        }
    }
    cov /= n.max(1) as f64;
    cov *= 0.5;
    for k in 0..q {
        cov[(k, k)] += 1e-6 * (1.0 + cov[(k, k)]);
    }
    let chol = cov
        .clone()
        .cholesky()
        .map(|c| c.l())
        .unwrap_or_else(|| DMatrix::from_fn(q, q, |r, c| if r == c { cov[(r, r)].max(0.0).sqrt() } else { 0.0 }));
    let mut chol_b: Vec<f64> = vec![0.0; q * q];
    for r in 0..q {
        for c in 0..=r {
            chol_b[r * q + c] = chol[(r, c)];
        }
    }

    let mut params = Parameters {
        beta,
        class_effects,
        chol_b,
        sigma: sigma2.sqrt().max(10.0 * SIGMA_FLOOR),
        link: None,
        class_logits: vec![vec![0.0; spec.n_membership()]; g_n],
    };

    if spec.link == LinkKind::Beta {
        // put the latent residual SD at 1 and pin the reference intercept at 0
        let scale = sigma2.sqrt().max(1e-6);
        let offset = match spec.fixed_intercept() {
            Some(FixedIntercept::Common(i)) => params.beta[i],
            Some(FixedIntercept::Class(k)) => params.class_effects[0][k],
            None => 0.0,
        };
        let shift = |basis: &[BasisFn], coef: &mut [f64]| {
            for (c, b) in coef.iter_mut().zip(basis) {
                if *b == BasisFn::Intercept {
                    *c -= offset;
                }
                *c /= scale;
            }
        };
        match spec.fixed_intercept() {
            Some(FixedIntercept::Common(_)) => shift(&spec.common_fixed_basis, &mut params.beta),
            _ => {
                params.beta.iter_mut().for_each(|b| *b /= scale);
                params
                    .class_effects
                    .iter_mut()
                    .for_each(|v| shift(&spec.class_fixed_basis, v));
            }
        }
        params.chol_b.iter_mut().for_each(|c| *c /= scale);
        params.sigma = 1.0;
        params.link = Some(BetaShape {
            shape_a: 1.0,
            shape_b: 1.0,
            offset,
            scale,
        });
    }

    // perturbation scales: spread of per-eye coefficients for mean effects
    let eye_lines: Vec<(f64, f64)> = cohort
        .eyes
        .iter()
        .zip(&latent)
        .map(|(e, l)| ols_line(&e.times, l))
        .collect();
    let link_scale = params.link.map_or(1.0, |l| l.scale);
    let spread = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let vals: Vec<f64> = eye_lines.iter().map(f).collect();
        crate::cohort::mean_sd(&vals).1.max(1e-3) / link_scale
    };
    let intercept_spread = spread(&|l| l.0);
    let slope_spread = spread(&|l| l.1);
    let basis_scale = |b: BasisFn| match b {
        BasisFn::Intercept => intercept_spread,
        BasisFn::Time => slope_spread,
        BasisFn::TimeSquared => slope_spread / 10.0,
    };
    let layout = ParamLayout::new(spec);
    let x0 = layout.pack(&params);
    let scales = layout
        .slots()
        .into_iter()
        .zip(&x0)
        .map(|(slot, &x)| match slot {
            Slot::Common(i) => basis_scale(spec.common_fixed_basis[i]),
            Slot::Class(_, k) => basis_scale(spec.class_fixed_basis[k]),
            Slot::Chol(..) => x.abs().max(1e-3),
            Slot::Sigma | Slot::Link(_) | Slot::Logit(..) => 1.0,
        })
        .collect();
    Ok(Initialization { params, scales })
}

/// Fraction of the per-slot scale used as perturbation SD for random starts.
const START_PERTURBATION: f64 = 0.1;

fn start_vector(init: &Initialization, layout: &ParamLayout, index: usize, seed: u64) -> Vec<f64> {
    let mut x = layout.pack(&init.params);
    if index == 0 {
        return x;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    for (xi, s) in x.iter_mut().zip(&init.scales) {
        let z: f64 = StandardNormal.sample(&mut rng);
        *xi += START_PERTURBATION * s * z;
    }
    x
}

fn canonical_order(spec: &ModelSpec, params: &Parameters) -> Vec<usize> {
    let key_index = spec.slope_index().or(spec.intercept_index());
    let mut order: Vec<usize> = (0..spec.n_classes).collect();
    if let Some(k) = key_index {
        order.sort_by(|&a, &b| {
            params.class_effects[b][k]
                .total_cmp(&params.class_effects[a][k])
                .then(a.cmp(&b))
        });
    }
    order
}

/// Puts parameters in canonical form: classes ordered from most positive to
/// most negative slope, Cholesky diagonal non-negative, and under the beta
/// link the first canonical class's intercept moved to zero.
pub(crate) fn canonicalize(spec: &ModelSpec, params: &Parameters) -> (Parameters, Vec<usize>) {
    let order = canonical_order(spec, params);
    let mut out = params.permute_classes(&order);
    out.normalize_cholesky();
    if let (Some(FixedIntercept::Class(k)), Some(link)) = (spec.fixed_intercept(), out.link.as_mut()) {
        let c = out.class_effects[0][k];
        if c != 0.0 {
            out.class_effects.iter_mut().for_each(|v| v[k] -= c);
            link.offset += c * link.scale;
        }
        out.class_effects[0][k] = 0.0;
    }
    (out, order)
}

/// Extra inputs for [`fit_with_options`].
#[derive(Debug, Clone, Copy, Default)]
pub struct FitOptions<'a> {
    /// Parameters tried as an additional start before the fresh ones.
    pub warm_start: Option<&'a Parameters>,
    /// Beta-link rescaling range; defaults to the cohort's range.
    pub value_range: Option<ValueRange>,
}

/// Fits the model from `spec.optimizer.n_starts` starting points.
pub fn fit(cohort: &Cohort, spec: &ModelSpec) -> Result<FitResult, LcmmError> {
    fit_with_options(cohort, spec, &FitOptions::default())
}

pub fn fit_with_options(cohort: &Cohort, spec: &ModelSpec, options: &FitOptions) -> Result<FitResult, LcmmError> {
    let warm = options.warm_start;
    spec.validate()?;
    if cohort.is_empty() {
        return Err(LcmmError::Config("cohort is empty".into()));
    }
    if spec.n_classes > cohort.len() {
        return Err(LcmmError::Config(format!(
            "{} classes requested for {} eyes",
            spec.n_classes,
            cohort.len()
        )));
    }
    let model = Model::new(cohort, spec, options.value_range)?;
    let layout = model.layout().clone();
    let init = initialize(cohort, spec, model.value_range())?;
    let n_eyes = cohort.len() as f64;
    let settings = spec.optimizer.bfgs();

    let mut starts: Vec<(usize, Vec<f64>)> = Vec::new();
    if let Some(w) = warm {
        starts.push((usize::MAX, layout.pack(w)));
    }
    for s in 0..spec.optimizer.n_starts {
        starts.push((s, start_vector(&init, &layout, s, spec.optimizer.seed)));
    }

    let runs: Vec<_> = starts
        .into_par_iter()
        .map(|(tag, x0)| {
            let objective = |x: &[f64]| {
                model
                    .gradient_at(x)
                    .ok()
                    .map(|(ll, g)| (-ll / n_eyes, g.into_iter().map(|v| -v / n_eyes).collect()))
            };
            (tag, minimize(objective, x0, &settings))
        })
        .collect();

    let mut diagnostics = Vec::with_capacity(runs.len());
    let mut best: Option<(usize, &super::optimize::BfgsOutcome)> = None;
    for (pos, (tag, out)) in runs.iter().enumerate() {
        let loglik = out.value.is_finite().then(|| -out.value * n_eyes);
        diagnostics.push(StartDiagnostic {
            index: pos,
            warm: *tag == usize::MAX,
            loglik,
            converged: out.converged(),
            iterations: out.iterations,
            gradient_norm: out.gradient_norm(),
            termination: out.termination,
        });
        if out.converged() && best.is_none_or(|(_, b)| out.value < b.value) {
            best = Some((pos, out));
        }
    }
    let (start_index, outcome) = best.ok_or_else(|| LcmmError::AllStartsFailed(diagnostics.clone()))?;

    let raw = layout.unpack(&outcome.x);
    let (params, class_order) = canonicalize(spec, &raw);
    let loglik = model.log_likelihood(&params)?;
    let proportions: Vec<f64> = {
        let w = model.class_log_weights(&params);
        (0..spec.n_classes)
            .map(|g| w.iter().map(|row| row[g].exp()).sum::<f64>() / n_eyes)
            .collect()
    };
    let degenerate_classes = proportions
        .iter()
        .enumerate()
        .filter(|(_, &p)| p < 1.0 / (10.0 * n_eyes))
        .map(|(g, _)| g)
        .collect();

    Ok(FitResult {
        spec: spec.clone(),
        params,
        value_range: model.value_range(),
        loglik,
        n_params: layout.len(),
        n_eyes: cohort.len(),
        convergence: Convergence {
            converged: true,
            iterations: outcome.iterations,
            gradient_norm: outcome.gradient_norm(),
            termination: outcome.termination,
        },
        start_index,
        class_order,
        degenerate_classes,
        starts: diagnostics,
    })
}

/// Posterior membership of every eye of `cohort` under a fitted model.
pub fn posterior_memberships(cohort: &Cohort, fit: &FitResult) -> Result<MembershipTable, LcmmError> {
    let model = Model::new(cohort, &fit.spec, fit.value_range)?;
    let tau = model.posteriors(&fit.params)?;
    Ok(MembershipTable::from_posteriors(model.eye_ids().to_vec(), tau))
}
