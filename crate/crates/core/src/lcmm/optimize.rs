//! BFGS minimisation with a strong-Wolfe line search.
//!
//! The objective returns `None` when it cannot be evaluated (non-finite value,
//! numerical failure); the line search treats such points as +∞ and backs off.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BfgsSettings {
    pub max_iterations: usize,
    /// Convergence when the gradient ∞-norm falls below this value.
    pub gradient_tolerance: f64,
}

impl Default for BfgsSettings {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    MaxIterations,
    LineSearchFailed,
    Stalled,
    InitialPointInvalid,
}

#[derive(Debug, Clone)]
pub struct BfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    /// Objective at every accepted iterate, starting with the initial point.
    pub trace: Vec<f64>,
}

impl BfgsOutcome {
    pub fn converged(&self) -> bool {
        self.termination == Termination::GradientTolerance
    }

    pub fn gradient_norm(&self) -> f64 {
        inf_norm(&self.gradient)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(xi, di)| xi + alpha * di).collect()
}

struct Probe {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    gradient: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;
const MAX_LINE_EVALS: usize = 40;

/// Strong-Wolfe line search along `dir`. Returns an accepted probe that at
/// least satisfies sufficient decrease, or `None`.
fn line_search<F>(f: &mut F, x: &[f64], f0: f64, g0: &[f64], dir: &[f64], alpha0: f64) -> Option<Probe>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let slope0 = dot(g0, dir);
    if slope0 >= 0.0 {
        return None;
    }
    let mut evals = 0usize;
    let mut eval = |alpha: f64, evals: &mut usize| -> Probe {
        *evals += 1;
        let xa = axpy(x, alpha, dir);
        match f(&xa) {
            Some((v, g)) if v.is_finite() && g.iter().all(|gi| gi.is_finite()) => Probe {
                alpha,
                value: v,
                slope: dot(&g, dir),
                x: xa,
                gradient: g,
            },
            _ => Probe {
                alpha,
                value: f64::INFINITY,
                slope: f64::NAN,
                x: xa,
                gradient: Vec::new(),
            },
        }
    };
    let armijo = |p: &Probe| p.value <= f0 + C1 * p.alpha * slope0;

    let mut best: Option<Probe> = None;
    let keep_best = |best: &mut Option<Probe>, p: &Probe| {
        if p.value.is_finite() && armijo(p) && best.as_ref().is_none_or(|b| p.value < b.value) {
            *best = Some(Probe {
                alpha: p.alpha,
                value: p.value,
                slope: p.slope,
                x: p.x.clone(),
                gradient: p.gradient.clone(),
            });
        }
    };

    let mut prev = Probe {
        alpha: 0.0,
        value: f0,
        slope: slope0,
        x: x.to_vec(),
        gradient: g0.to_vec(),
    };
    let mut alpha = alpha0;
    let mut first = true;
    loop {
        if evals >= MAX_LINE_EVALS {
            return best;
        }
        let cur = eval(alpha, &mut evals);
        keep_best(&mut best, &cur);
        if !cur.value.is_finite() {
            // shrink into the finite region
            alpha = 0.5 * (prev.alpha + alpha);
            if alpha - prev.alpha < 1e-20 {
                return best;
            }
            continue;
        }
        if !armijo(&cur) || (!first && cur.value >= prev.value) {
            return zoom(&mut eval, &mut evals, prev, cur, f0, slope0, best);
        }
        if cur.slope.abs() <= -C2 * slope0 {
            return Some(cur);
        }
        if cur.slope >= 0.0 {
            return zoom(&mut eval, &mut evals, cur, prev, f0, slope0, best);
        }
        first = false;
        let next = 2.0 * cur.alpha;
        prev = cur;
        alpha = next;
        if alpha > 1e10 {
            return best;
        }
    }
}

fn zoom<E>(
    eval: &mut E,
    evals: &mut usize,
    mut lo: Probe,
    mut hi: Probe,
    f0: f64,
    slope0: f64,
    mut best: Option<Probe>,
) -> Option<Probe>
where
    E: FnMut(f64, &mut usize) -> Probe,
{
    loop {
        if *evals >= MAX_LINE_EVALS || (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1e-16) {
            return best;
        }
        // safeguarded quadratic interpolation using lo's value and slope
        let (a, b) = (lo.alpha, hi.alpha);
        let mut alpha = 0.5 * (a + b);
        if hi.value.is_finite() && lo.slope.is_finite() {
            let d = b - a;
            let denom = 2.0 * (hi.value - lo.value - lo.slope * d);
            if denom > 0.0 {
                let cand = a - lo.slope * d * d / denom;
                let (l, h) = if a < b { (a, b) } else { (b, a) };
                let margin = 0.1 * (h - l);
                if cand > l + margin && cand < h - margin {
                    alpha = cand;
                }
            }
        }
        let cur = eval(alpha, evals);
        if cur.value.is_finite()
            && cur.value <= f0 + C1 * cur.alpha * slope0
            && best.as_ref().is_none_or(|p| cur.value < p.value)
        {
            best = Some(Probe {
                alpha: cur.alpha,
                value: cur.value,
                slope: cur.slope,
                x: cur.x.clone(),
                gradient: cur.gradient.clone(),
            });
        }
        if !cur.value.is_finite() || cur.value > f0 + C1 * cur.alpha * slope0 || cur.value >= lo.value {
            hi = cur;
        } else {
            if cur.slope.abs() <= -C2 * slope0 {
                return Some(cur);
            }
            if cur.slope * (hi.alpha - lo.alpha) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
    }
}

/// Minimises `f` from `x0` with BFGS on the inverse Hessian.
pub fn minimize<F>(mut f: F, x0: Vec<f64>, settings: &BfgsSettings) -> BfgsOutcome
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let (mut value, mut gradient) = match f(&x0) {
        Some((v, g)) if v.is_finite() && g.iter().all(|x| x.is_finite()) => (v, g),
        _ => {
            return BfgsOutcome {
                x: x0,
                value: f64::INFINITY,
                gradient: vec![f64::NAN; n],
                iterations: 0,
                termination: Termination::InitialPointInvalid,
                trace: Vec::new(),
            }
        }
    };
    let mut x = x0;
    let mut trace = vec![value];
    let identity = |n: usize| {
        let mut h = vec![0.0; n * n];
        (0..n).for_each(|i| h[i * n + i] = 1.0);
        h
    };
    let mut h_inv = identity(n);
    let mut fresh = true;
    let mut stalled = 0usize;

    for iter in 0..settings.max_iterations {
        if inf_norm(&gradient) < settings.gradient_tolerance {
            return BfgsOutcome {
                x,
                value,
                gradient,
                iterations: iter,
                termination: Termination::GradientTolerance,
                trace,
            };
        }
        let dir: Vec<f64> = (0..n).map(|i| -dot(&h_inv[i * n..(i + 1) * n], &gradient)).collect();
        let alpha0 = if fresh {
            (1.0 / inf_norm(&gradient).max(1e-12)).min(1.0)
        } else {
            1.0
        };
        let probe = match line_search(&mut f, &x, value, &gradient, &dir, alpha0) {
            Some(p) => p,
            None if !fresh => {
                h_inv = identity(n);
                fresh = true;
                continue;
            }
            None => {
                return BfgsOutcome {
                    x,
                    value,
                    gradient,
                    iterations: iter,
                    termination: Termination::LineSearchFailed,
                    trace,
                };
            }
        };

        let s: Vec<f64> = probe.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = probe.gradient.iter().zip(&gradient).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let decrease = value - probe.value;
        x = probe.x;
        value = probe.value;
        gradient = probe.gradient;
        trace.push(value);

        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if fresh {
                let scale = sy / dot(&y, &y);
                h_inv.iter_mut().for_each(|v| *v *= scale);
                fresh = false;
            }
            // H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ
            let rho = 1.0 / sy;
            let hy: Vec<f64> = (0..n).map(|i| dot(&h_inv[i * n..(i + 1) * n], &y)).collect();
            let yhy = dot(&y, &hy);
            for i in 0..n {
                for j in 0..n {
                    h_inv[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
        }

        if decrease.abs() <= 1e-15 * (1.0 + value.abs()) {
            stalled += 1;
            if stalled >= 5 {
                let termination = if inf_norm(&gradient) < settings.gradient_tolerance {
                    Termination::GradientTolerance
                } else {
                    Termination::Stalled
                };
                return BfgsOutcome {
                    x,
                    value,
                    gradient,
                    iterations: iter + 1,
                    termination,
                    trace,
                };
            }
        } else {
            stalled = 0;
        }
    }
    let termination = if inf_norm(&gradient) < settings.gradient_tolerance {
        Termination::GradientTolerance
    } else {
        Termination::MaxIterations
    };
    BfgsOutcome {
        x,
        value,
        gradient,
        iterations: settings.max_iterations,
        termination,
        trace,
    }
}
