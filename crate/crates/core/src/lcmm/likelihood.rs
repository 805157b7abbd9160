//! Marginal likelihood of the latent-class linear mixed model and its gradient.
//!
//! For eye i in class g the latent outcomes Λᵢ are Gaussian with mean
//! `X₁β + X₂v_g` and covariance `Vᵢ = Zᵢ B Zᵢᵀ + σ²I`. With B = LLᵀ and
//! K = ZᵢL, Vᵢ is handled through the q×q matrix `M = I + KᵀK/σ²`:
//!
//! ```text
//! log|Vᵢ|   = nᵢ log σ² + log|M|
//! Vᵢ⁻¹      = (I - K M⁻¹ Kᵀ / σ²) / σ²
//! ```
//!
//! so each eye only needs small Gram matrices of its design, computed once,
//! and every class costs O((p + q)²).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use super::model::{BasisFn, ModelSpec, ParamLayout, Parameters, Slot, SIGMA_FLOOR};
use super::LcmmError;
use crate::cohort::{Cohort, EyeSeries, ValueRange};
use crate::link::{BetaLink, LinkKind, LinkSpec, BETA_LINK_PARAMS};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const CHUNK: usize = 32;

fn design(basis: &[BasisFn], times: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), basis.len(), |r, c| basis[c].eval(times[r]))
}

#[derive(Debug, Clone)]
struct EyeDesign {
    n: usize,
    w: DMatrix<f64>,
    z: DMatrix<f64>,
    wtw: DMatrix<f64>,
    ztw: DMatrix<f64>,
    ztz: DMatrix<f64>,
    values: Vec<f64>,
    membership: Vec<f64>,
}

/// Λ-dependent sufficient statistics of one eye.
struct LatentStats {
    wtl: DVector<f64>,
    ztl: DVector<f64>,
    ltl: f64,
    sum_log_jac: f64,
    link: Option<LinkStats>,
}

struct LinkStats {
    d_log_jac: [f64; BETA_LINK_PARAMS],
    dtl: DVector<f64>,
    dtw: DMatrix<f64>,
    dtz: DMatrix<f64>,
}

struct EvalCtx {
    theta: Vec<DVector<f64>>,
    l: DMatrix<f64>,
    sigma2: f64,
    link: Option<BetaLink>,
}

/// Per-eye quantities shared by density, posterior and gradient computations.
struct EyeCore {
    log_dens: Vec<f64>,
    log_w: Vec<f64>,
    stats: LatentStats,
    m_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    ktk: DMatrix<f64>,
}

/// A cohort prepared for likelihood evaluation under one model spec.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    layout: ParamLayout,
    slots: Vec<Slot>,
    range: Option<ValueRange>,
    eyes: Vec<EyeDesign>,
    eye_ids: Vec<String>,
}

impl Model {
    /// Prepares `cohort` for `spec`. `range` fixes the beta-link rescaling;
    /// `None` uses the cohort's own value range.
    pub fn new(cohort: &Cohort, spec: &ModelSpec, range: Option<ValueRange>) -> Result<Self, LcmmError> {
        spec.validate()?;
        let range = range.or(cohort.value_range);
        if spec.link == LinkKind::Beta && range.is_none() {
            return Err(LcmmError::Config("beta link requires a non-empty cohort".into()));
        }
        let eyes = cohort
            .eyes
            .iter()
            .map(|eye| Self::prepare_eye(eye, spec))
            .collect::<Result<Vec<_>, _>>()?;
        let layout = ParamLayout::new(spec);
        Ok(Self {
            spec: spec.clone(),
            slots: layout.slots(),
            layout,
            range,
            eyes,
            eye_ids: cohort.eyes.iter().map(|e| e.eye_id.clone()).collect(),
        })
    }

    fn prepare_eye(eye: &EyeSeries, spec: &ModelSpec) -> Result<EyeDesign, LcmmError> {
        let x1 = design(&spec.common_fixed_basis, &eye.times);
        let x2 = design(&spec.class_fixed_basis, &eye.times);
        let n = eye.times.len();
        let mut w = DMatrix::zeros(n, x1.ncols() + x2.ncols());
        w.columns_mut(0, x1.ncols()).copy_from(&x1);
        w.columns_mut(x1.ncols(), x2.ncols()).copy_from(&x2);
        let z = design(&spec.random_basis, &eye.times);
        let mut membership = vec![1.0];
        for name in &spec.class_covariates {
            let v = eye.covariate(name).ok_or_else(|| LcmmError::MissingCovariate {
                eye_id: eye.eye_id.clone(),
                name: name.clone(),
            })?;
            membership.push(v);
        }
        Ok(EyeDesign {
            n,
            wtw: w.transpose() * &w,
            ztw: z.transpose() * &w,
            ztz: z.transpose() * &z,
            w,
            z,
            values: eye.values.clone(),
            membership,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn value_range(&self) -> Option<ValueRange> {
        self.range
    }

    pub fn n_eyes(&self) -> usize {
        self.eyes.len()
    }

    pub fn n_params(&self) -> usize {
        self.slots.len()
    }

    pub fn eye_ids(&self) -> &[String] {
        &self.eye_ids
    }

    fn context(&self, params: &Parameters) -> Result<EvalCtx, LcmmError> {
        let g_n = self.spec.n_classes;
        let q = self.spec.n_random();
        if params.class_effects.len() != g_n || params.class_logits.len() != g_n || params.chol_b.len() != q * q {
            return Err(LcmmError::Config("parameters do not match the model spec".into()));
        }
        let theta = params
            .class_effects
            .iter()
            .map(|v| DVector::from_iterator(params.beta.len() + v.len(), params.beta.iter().chain(v).copied()))
            .collect();
        let mut l = DMatrix::from_row_slice(q, q, &params.chol_b);
        // only the lower triangle is a parameter
        for i in 0..q {
            for j in (i + 1)..q {
                l[(i, j)] = 0.0;
            }
        }
        let link = match params.link_spec(self.range)? {
            LinkSpec::Identity => None,
            LinkSpec::Beta(b) => Some(b),
        };
        let sigma2 = if self.spec.link == LinkKind::Beta {
            1.0
        } else {
            params.sigma * params.sigma
        };
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(LcmmError::Config(format!("invalid residual variance {sigma2}")));
        }
        Ok(EvalCtx { theta, l, sigma2, link })
    }

    fn latent_stats(&self, i: usize, ctx: &EvalCtx, with_link_grad: bool) -> Result<LatentStats, LcmmError> {
        let e = &self.eyes[i];
        match &ctx.link {
            None => {
                let y = DVector::from_column_slice(&e.values);
                Ok(LatentStats {
                    wtl: e.w.tr_mul(&y),
                    ztl: e.z.tr_mul(&y),
                    ltl: y.dot(&y),
                    sum_log_jac: 0.0,
                    link: None,
                })
            }
            Some(link) => {
                let mut lam = DVector::zeros(e.n);
                let mut d = DMatrix::zeros(e.n, BETA_LINK_PARAMS);
                let mut sum_log_jac = 0.0;
                let mut d_log_jac = [0.0; BETA_LINK_PARAMS];
                for (j, &y) in e.values.iter().enumerate() {
                    let ev = link.evaluate(y).map_err(|source| LcmmError::Link {
                        eye_id: self.eye_ids[i].clone(),
                        source,
                    })?;
                    lam[j] = ev.latent;
                    sum_log_jac += ev.log_jacobian;
                    for k in 0..BETA_LINK_PARAMS {
                        d[(j, k)] = ev.d_latent[k];
                        d_log_jac[k] += ev.d_log_jacobian[k];
                    }
                }
                let link_stats = with_link_grad.then(|| LinkStats {
                    d_log_jac,
                    dtl: d.tr_mul(&lam),
                    dtw: d.tr_mul(&e.w),
                    dtz: d.tr_mul(&e.z),
                });
                Ok(LatentStats {
                    wtl: e.w.tr_mul(&lam),
                    ztl: e.z.tr_mul(&lam),
                    ltl: lam.dot(&lam),
                    sum_log_jac,
                    link: link_stats,
                })
            }
        }
    }

    fn core(&self, i: usize, params: &Parameters, ctx: &EvalCtx, with_link_grad: bool) -> Result<EyeCore, LcmmError> {
        let e = &self.eyes[i];
        let stats = self.latent_stats(i, ctx, with_link_grad)?;
        let s2 = ctx.sigma2;
        let ktk = ctx.l.transpose() * &e.ztz * &ctx.l;
        let q = ktk.nrows();
        let mut m_chol = None;
        let mut ridge = 0.0;
        for _attempt in 0..4 {
            let m = DMatrix::identity(q, q) + &ktk / s2 + DMatrix::identity(q, q) * ridge;
            if let Some(c) = m.cholesky() {
                m_chol = Some(c);
                break;
            }
            ridge = if ridge == 0.0 { 1e-8 } else { ridge * 10.0 };
        }
        let m_chol = m_chol.ok_or_else(|| LcmmError::NotPositiveDefinite(self.eye_ids[i].clone()))?;
        let log_det_m: f64 = 2.0 * m_chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let log_det_v = e.n as f64 * s2.ln() + log_det_m;
        let a_mat = ctx.l.transpose() * &e.ztw; // Kᵀ W
        let c = ctx.l.transpose() * &stats.ztl; // Kᵀ Λ
        let base = -0.5 * e.n as f64 * LN_2PI - 0.5 * log_det_v + stats.sum_log_jac;

        let mut log_dens = Vec::with_capacity(ctx.theta.len());
        for theta in &ctx.theta {
            let kr = &c - &a_mat * theta;
            let rr = stats.ltl - 2.0 * theta.dot(&stats.wtl) + theta.dot(&(&e.wtw * theta));
            let a = m_chol.solve(&kr) / s2;
            let quad = (rr - kr.dot(&a)) / s2;
            let ld = base - 0.5 * quad;
            if !ld.is_finite() {
                return Err(LcmmError::NonFinite(self.eye_ids[i].clone()));
            }
            log_dens.push(ld);
        }
        let log_w = params.class_log_weights(&e.membership);
        Ok(EyeCore {
            log_dens,
            log_w,
            stats,
            m_chol,
            ktk,
        })
    }

    fn eye_loglik(core: &EyeCore) -> (f64, Vec<f64>) {
        let terms: Vec<f64> = core.log_dens.iter().zip(&core.log_w).map(|(a, b)| a + b).collect();
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        let tau = terms.iter().map(|t| (t - lse).exp()).collect();
        (lse, tau)
    }

    fn slot_index(&self) -> SlotIndex {
        SlotIndex::new(&self.layout, &self.slots)
    }

    #[allow(clippy::too_many_arguments)]
    fn accumulate_gradient(
        &self,
        i: usize,
        params: &Parameters,
        ctx: &EvalCtx,
        core: &EyeCore,
        tau: &[f64],
        idx: &SlotIndex,
        grad: &mut [f64],
    ) {
        let e = &self.eyes[i];
        let s2 = ctx.sigma2;
        let q = ctx.l.nrows();
        let p1 = params.beta.len();
        let stats = &core.stats;
        let l = &ctx.l;
        let a_mat = l.transpose() * &e.ztw;
        let c = l.transpose() * &stats.ztl;
        let ztk = &e.ztz * l;

        let mut s_acc = DMatrix::<f64>::zeros(q, q);
        let mut ww_acc = 0.0;
        let mut link_acc = [0.0; BETA_LINK_PARAMS];
        for (g, theta) in ctx.theta.iter().enumerate() {
            let t = tau[g];
            if t == 0.0 {
                continue;
            }
            let kr = &c - &a_mat * theta;
            let rr = stats.ltl - 2.0 * theta.dot(&stats.wtl) + theta.dot(&(&e.wtw * theta));
            let a = core.m_chol.solve(&kr) / s2;
            let wtr = &stats.wtl - &e.wtw * theta;
            let wtw_vec = (wtr - a_mat.tr_mul(&a)) / s2;
            for k in 0..p1 {
                if let Some(ix) = idx.common[k] {
                    grad[ix] += t * wtw_vec[k];
                }
            }
            for k in 0..(wtw_vec.len() - p1) {
                if let Some(ix) = idx.class[g][k] {
                    grad[ix] += t * wtw_vec[p1 + k];
                }
            }
            let ztr = &stats.ztl - &e.ztw * theta;
            let ztw_vec = (ztr - &ztk * &a) / s2;
            s_acc += &ztw_vec * ztw_vec.transpose() * t;
            let ww = (rr - 2.0 * a.dot(&kr) + a.dot(&(&core.ktk * &a))) / (s2 * s2);
            ww_acc += t * ww;
            if let Some(ls) = &stats.link {
                let dtr = &ls.dtl - &ls.dtw * theta;
                let dtk = &ls.dtz * l;
                let dtw_vec = (dtr - dtk * &a) / s2;
                for k in 0..BETA_LINK_PARAMS {
                    link_acc[k] -= t * dtw_vec[k];
                }
            }
        }

        // Zᵀ V⁻¹ Z and tr V⁻¹
        let m_inv_ktz = core.m_chol.solve(&ztk.transpose());
        let zvz = (&e.ztz - &ztk * m_inv_ktz / s2) / s2;
        let tr_vinv = (e.n as f64 - core.m_chol.solve(&core.ktk).trace() / s2) / s2;
        let gl = (s_acc - zvz) * l;
        for r in 0..q {
            for col in 0..=r {
                if let Some(ix) = idx.chol[r * q + col] {
                    grad[ix] += gl[(r, col)];
                }
            }
        }
        if let Some(ix) = idx.sigma {
            let d_s2 = 0.5 * (ww_acc - tr_vinv);
            grad[ix] += d_s2 * 2.0 * (s2 - SIGMA_FLOOR * SIGMA_FLOOR);
        }
        if let Some(ls) = &stats.link {
            for ((slot, acc), d) in idx.link.iter().zip(&link_acc).zip(&ls.d_log_jac) {
                if let Some(ix) = *slot {
                    grad[ix] += acc + d;
                }
            }
        }
        let log_pi = &core.log_w;
        for (g, row) in idx.logit.iter().enumerate() {
            let diff = tau[g] - log_pi[g].exp();
            for (k, ix) in row.iter().enumerate() {
                grad[*ix] += diff * e.membership[k];
            }
        }
    }

    /// log f_ig for every eye and class, in cohort order.
    pub fn class_log_densities(&self, params: &Parameters) -> Result<Vec<Vec<f64>>, LcmmError> {
        let ctx = self.context(params)?;
        (0..self.eyes.len())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| self.core(i, params, &ctx, false).map(|c| c.log_dens))
            .collect()
    }

    /// Log mixture weights log π_ig for every eye.
    pub fn class_log_weights(&self, params: &Parameters) -> Vec<Vec<f64>> {
        self.eyes
            .iter()
            .map(|e| params.class_log_weights(&e.membership))
            .collect()
    }

    /// Posterior membership probabilities τ_ig.
    pub fn posteriors(&self, params: &Parameters) -> Result<Vec<Vec<f64>>, LcmmError> {
        let ctx = self.context(params)?;
        (0..self.eyes.len())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| self.core(i, params, &ctx, false).map(|c| Self::eye_loglik(&c).1))
            .collect()
    }

    /// Per-eye log-likelihood contributions.
    pub fn eye_log_likelihoods(&self, params: &Parameters) -> Result<Vec<f64>, LcmmError> {
        let ctx = self.context(params)?;
        (0..self.eyes.len())
            .into_par_iter()
            .with_min_len(CHUNK)
            .map(|i| self.core(i, params, &ctx, false).map(|c| Self::eye_loglik(&c).0))
            .collect()
    }

    pub fn log_likelihood(&self, params: &Parameters) -> Result<f64, LcmmError> {
        // fixed chunking keeps the summation order independent of thread count
        let ctx = self.context(params)?;
        let partial: Vec<f64> = self
            .chunks()
            .into_par_iter()
            .map(|(start, end)| {
                let mut acc = 0.0;
                for i in start..end {
                    acc += Self::eye_loglik(&self.core(i, params, &ctx, false)?).0;
                }
                Ok(acc)
            })
            .collect::<Result<_, LcmmError>>()?;
        Ok(partial.into_iter().sum())
    }

    /// Log-likelihood and its gradient with respect to the packed free vector.
    pub fn log_likelihood_and_gradient(&self, params: &Parameters) -> Result<(f64, Vec<f64>), LcmmError> {
        let ctx = self.context(params)?;
        let idx = self.slot_index();
        let n_free = self.slots.len();
        let with_link = ctx.link.is_some();
        let partial: Vec<(f64, Vec<f64>)> = self
            .chunks()
            .into_par_iter()
            .map(|(start, end)| {
                let mut acc = 0.0;
                let mut grad = vec![0.0; n_free];
                for i in start..end {
                    let core = self.core(i, params, &ctx, with_link)?;
                    let (ll, tau) = Self::eye_loglik(&core);
                    acc += ll;
                    self.accumulate_gradient(i, params, &ctx, &core, &tau, &idx, &mut grad);
                }
                Ok((acc, grad))
            })
            .collect::<Result<_, LcmmError>>()?;
        let mut total = 0.0;
        let mut grad = vec![0.0; n_free];
        for (ll, g) in partial {
            total += ll;
            grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        if !total.is_finite() {
            return Err(LcmmError::NonFinite("<cohort>".into()));
        }
        Ok((total, grad))
    }

    /// Log-likelihood at a packed vector.
    pub fn log_likelihood_at(&self, x: &[f64]) -> Result<f64, LcmmError> {
        self.log_likelihood(&self.layout.unpack(x))
    }

    pub fn gradient_at(&self, x: &[f64]) -> Result<(f64, Vec<f64>), LcmmError> {
        self.log_likelihood_and_gradient(&self.layout.unpack(x))
    }

    fn chunks(&self) -> Vec<(usize, usize)> {
        let n = self.eyes.len();
        (0..n.div_ceil(CHUNK))
            .map(|c| (c * CHUNK, ((c + 1) * CHUNK).min(n)))
            .collect()
    }

    /// Dense design of eye `i`: (W = [X₁ X₂], Z).
    pub fn eye_design(&self, i: usize) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.eyes[i].w, &self.eyes[i].z)
    }
}

/// Position of every parameter in the free vector, `None` when pinned.
struct SlotIndex {
    common: Vec<Option<usize>>,
    class: Vec<Vec<Option<usize>>>,
    chol: Vec<Option<usize>>,
    sigma: Option<usize>,
    link: [Option<usize>; BETA_LINK_PARAMS],
    logit: Vec<Vec<usize>>,
}

impl SlotIndex {
    fn new(layout: &ParamLayout, slots: &[Slot]) -> Self {
        let q = layout.n_random;
        let mut idx = SlotIndex {
            common: vec![None; layout.n_common],
            class: vec![vec![None; layout.n_class_fixed]; layout.n_classes],
            chol: vec![None; q * q],
            sigma: None,
            link: [None; BETA_LINK_PARAMS],
            logit: vec![vec![0; layout.n_membership]; layout.n_classes.saturating_sub(1)],
        };
        for (pos, slot) in slots.iter().enumerate() {
            match *slot {
                Slot::Common(i) => idx.common[i] = Some(pos),
                Slot::Class(g, k) => idx.class[g][k] = Some(pos),
                Slot::Chol(i, j) => idx.chol[i * q + j] = Some(pos),
                Slot::Sigma => idx.sigma = Some(pos),
                Slot::Link(k) => idx.link[k] = Some(pos),
                Slot::Logit(g, k) => idx.logit[g][k] = pos,
            }
        }
        idx
    }
}

/// Log-density of one eye's trajectory under class `g`, including the link
/// Jacobian. `range` is the beta-link rescaling range (ignored for identity).
pub fn eye_class_log_density(
    eye: &EyeSeries,
    class: usize,
    params: &Parameters,
    spec: &ModelSpec,
    range: Option<ValueRange>,
) -> Result<f64, LcmmError> {
    if class >= spec.n_classes {
        return Err(LcmmError::Config(format!("class {class} out of range")));
    }
    let cohort = Cohort {
        eyes: vec![eye.clone()],
        value_range: range.or_else(|| {
            ValueRange::new(
                eye.values.iter().cloned().fold(f64::INFINITY, f64::min),
                eye.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            )
            .ok()
        }),
        covariate_schema: Default::default(),
    };
    let model = Model::new(&cohort, spec, range)?;
    Ok(model.class_log_densities(params)?[0][class])
}

/// Mixture log-likelihood of a cohort.
pub fn log_likelihood(cohort: &Cohort, params: &Parameters, spec: &ModelSpec) -> Result<f64, LcmmError> {
    Model::new(cohort, spec, None)?.log_likelihood(params)
}

/// Gradient of [`log_likelihood`] with respect to the free parameter vector
/// (see [`ParamLayout`] for the ordering).
pub fn log_likelihood_gradient(cohort: &Cohort, params: &Parameters, spec: &ModelSpec) -> Result<Vec<f64>, LcmmError> {
    Ok(Model::new(cohort, spec, None)?.log_likelihood_and_gradient(params)?.1)
}
