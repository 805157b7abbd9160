//! Membership stability: refit on random subsets of eyes or on trajectories
//! with their last visits removed, then score agreement with the reference
//! clustering after optimal label matching.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortError, MIN_VISITS};
use crate::lcmm::{fit_with_options, posterior_memberships, FitOptions, FitResult, LcmmError, MembershipTable};

const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Error)]
pub enum RobustnessError {
    #[error("labelings share no eyes")]
    EmptyIntersection,
    #[error("labelings have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("label {label} is out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("subsample fraction {0} is outside (0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Fit(#[from] LcmmError),
    #[error(transparent)]
    Cohort(#[from] CohortError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Maximum-weight perfect matching on a square matrix. Returns, for every
/// row, the column assigned to it.
pub fn hungarian_max(weights: &[Vec<f64>]) -> Vec<usize> {
    let n = weights.len();
    if n == 0 {
        return Vec::new();
    }
    let max = weights.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    // Shortest augmenting path with potentials on cost = max - weight,
    // 1-based with a virtual column 0.
    let cost = |i: usize, j: usize| max - weights[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// `permutation[trial_class] = reference_class` (0-based).
    pub permutation: Vec<usize>,
    pub matched: usize,
    pub n_common: usize,
    pub accuracy: f64,
}

/// Matches trial labels to reference labels (both 0-based, same eyes in the
/// same order) so as to maximise agreement.
pub fn align_labels(reference: &[usize], trial: &[usize], n_classes: usize) -> Result<Alignment, RobustnessError> {
    if reference.len() != trial.len() {
        return Err(RobustnessError::LengthMismatch(reference.len(), trial.len()));
    }
    if reference.is_empty() {
        return Err(RobustnessError::EmptyIntersection);
    }
    if let Some(&label) = reference.iter().chain(trial).find(|&&l| l >= n_classes) {
        return Err(RobustnessError::LabelOutOfRange { label, n_classes });
    }
    let mut agree = vec![vec![0.0; n_classes]; n_classes];
    for (&r, &t) in reference.iter().zip(trial) {
        agree[t][r] += 1.0;
    }
    let permutation = hungarian_max(&agree);
    let matched = permutation
        .iter()
        .enumerate()
        .map(|(t, &r)| agree[t][r] as usize)
        .sum::<usize>();
    Ok(Alignment {
        permutation,
        matched,
        n_common: reference.len(),
        accuracy: matched as f64 / reference.len() as f64,
    })
}

/// Aligns two membership tables on the eyes they share.
pub fn align_memberships(reference: &MembershipTable, trial: &MembershipTable) -> Result<Alignment, RobustnessError> {
    let index: HashMap<&str, usize> = reference
        .eye_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let (mut r, mut t) = (Vec::new(), Vec::new());
    for (j, id) in trial.eye_ids.iter().enumerate() {
        if let Some(&i) = index.get(id.as_str()) {
            r.push(reference.map_class[i]);
            t.push(trial.map_class[j]);
        }
    }
    let n_classes = reference.n_classes().max(trial.n_classes());
    align_labels(&r, &t, n_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Subsample,
    Truncate,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Subsample => "subsample",
            Protocol::Truncate => "truncate",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityTrial {
    /// Subsample fraction or number of dropped visits.
    pub parameter: f64,
    pub trial: usize,
    pub converged: bool,
    /// `None` when the refit did not converge.
    pub accuracy: Option<f64>,
    pub n_common: usize,
    pub permutation: Option<Vec<usize>>,
    /// Eyes left out because too few visits remained.
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityAggregate {
    pub parameter: f64,
    pub n_trials: usize,
    pub n_failed: usize,
    pub mean_accuracy: Option<f64>,
    /// Normal-approximation 95% interval over trials, clamped to [0, 1].
    pub ci: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub protocol: Protocol,
    pub trials: Vec<StabilityTrial>,
    pub aggregates: Vec<StabilityAggregate>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl StabilityReport {
    fn from_trials(protocol: Protocol, trials: Vec<StabilityTrial>, parameters: &[f64]) -> Self {
        let aggregates = parameters
            .iter()
            .map(|&p| {
                let group: Vec<&StabilityTrial> = trials.iter().filter(|t| t.parameter == p).collect();
                let acc: Vec<f64> = group.iter().filter_map(|t| t.accuracy).collect();
                let n = acc.len();
                let mean = (n > 0).then(|| acc.iter().sum::<f64>() / n as f64);
                let ci = mean.map(|m| {
                    let sd = if n > 1 {
                        (acc.iter().map(|a| (a - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                    } else {
                        0.0
                    };
                    let half = Z_95 * sd / (n as f64).sqrt();
                    ((m - half).max(0.0), (m + half).min(1.0))
                });
                StabilityAggregate {
                    parameter: p,
                    n_trials: group.len(),
                    n_failed: group.len() - n,
                    mean_accuracy: mean,
                    ci,
                }
            })
            .collect();
        Self {
            protocol,
            trials,
            aggregates,
        }
    }

    pub fn aggregate(&self, parameter: f64) -> Option<&StabilityAggregate> {
        self.aggregates.iter().find(|a| a.parameter == parameter)
    }

    /// Per-trial CSV: `protocol,parameter,trial,accuracy,n_common,converged`.
    pub fn trials_csv(&self) -> String {
        let mut out = String::from("protocol,parameter,trial,accuracy,n_common,converged\n");
        for t in &self.trials {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.protocol.name(),
                t.parameter,
                t.trial,
                fmt_opt(t.accuracy),
                t.n_common,
                u8::from(t.converged)
            ));
        }
        out
    }

    /// Aggregate CSV shaped like a membership-accuracy table.
    pub fn aggregate_csv(&self) -> String {
        let mut out = String::from("protocol,parameter,n_trials,n_failed,mean_accuracy,ci_low,ci_high\n");
        for a in &self.aggregates {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.protocol.name(),
                a.parameter,
                a.n_trials,
                a.n_failed,
                fmt_opt(a.mean_accuracy),
                fmt_opt(a.ci.map(|c| c.0)),
                fmt_opt(a.ci.map(|c| c.1))
            ));
        }
        out
    }

    pub fn write_csvs(&self, trials_path: &Path, aggregate_path: &Path) -> Result<(), RobustnessError> {
        for (path, body) in [(trials_path, self.trials_csv()), (aggregate_path, self.aggregate_csv())] {
            std::fs::File::create(path)
                .and_then(|mut f| f.write_all(body.as_bytes()))
                .map_err(|source| RobustnessError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
        }
        Ok(())
    }
}

/// Settings shared by both protocols.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefitSettings {
    /// Fresh random starts per refit, in addition to the warm start from the
    /// reference parameters.
    pub fresh_starts: usize,
    pub seed: u64,
}

fn refit_trial(
    sub: &Cohort,
    reference: &FitResult,
    reference_labels: &MembershipTable,
    settings: &RefitSettings,
    trial_seed: u64,
) -> Result<(bool, Option<Alignment>), RobustnessError> {
    let mut spec = reference.spec.clone();
    spec.optimizer.n_starts = settings.fresh_starts;
    spec.optimizer.seed = trial_seed;
    let options = FitOptions {
        warm_start: Some(&reference.params),
        value_range: reference.value_range,
    };
    match fit_with_options(sub, &spec, &options) {
        Ok(refit) => {
            let labels = posterior_memberships(sub, &refit)?;
            Ok((true, Some(align_memberships(reference_labels, &labels)?)))
        }
        Err(LcmmError::AllStartsFailed(_)) => Ok((false, None)),
        Err(e) => Err(e.into()),
    }
}

fn trial_record(parameter: f64, trial: usize, n_excluded: usize, outcome: (bool, Option<Alignment>)) -> StabilityTrial {
    let (converged, alignment) = outcome;
    StabilityTrial {
        parameter,
        trial,
        converged,
        accuracy: alignment.as_ref().map(|a| a.accuracy),
        n_common: alignment.as_ref().map_or(0, |a| a.n_common),
        permutation: alignment.map(|a| a.permutation),
        n_excluded,
    }
}

/// Refits on `trials_per_fraction` random subsets at each fraction and
/// scores MAP labels against the reference on the sampled eyes. Trial
/// `(f, k)` samples with ChaCha8 stream `f · 2³² + k`.
pub fn subsample_stability(
    cohort: &Cohort,
    reference: &FitResult,
    fractions: &[f64],
    trials_per_fraction: usize,
    settings: &RefitSettings,
) -> Result<StabilityReport, RobustnessError> {
    if let Some(&f) = fractions.iter().find(|&&f| !(f > 0.0 && f <= 1.0)) {
        return Err(RobustnessError::InvalidFraction(f));
    }
    let reference_labels = posterior_memberships(cohort, reference)?;
    let jobs: Vec<(usize, usize)> = (0..fractions.len())
        .flat_map(|f| (0..trials_per_fraction).map(move |k| (f, k)))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(f, k)| {
            let fraction = fractions[f];
            let stream = ((f as u64) << 32) | k as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(stream);
            let n = cohort.len();
            let m = ((fraction * n as f64).round() as usize).clamp(1, n);
            let mut picked = rand::seq::index::sample(&mut rng, n, m).into_vec();
            picked.sort_unstable();
            let sub = cohort.subset(&picked)?;
            let outcome = refit_trial(
                &sub,
                reference,
                &reference_labels,
                settings,
                settings.seed.wrapping_add(stream),
            )?;
            Ok(trial_record(fraction, k, 0, outcome))
        })
        .collect::<Result<Vec<_>, RobustnessError>>()?;
    Ok(StabilityReport::from_trials(Protocol::Subsample, trials, fractions))
}

/// Removes the last `k` visits of every eye, excluding eyes left with fewer
/// than the minimum number of visits, and scores each refit.
pub fn truncation_stability(
    cohort: &Cohort,
    reference: &FitResult,
    drops: &[usize],
    settings: &RefitSettings,
) -> Result<StabilityReport, RobustnessError> {
    let reference_labels = posterior_memberships(cohort, reference)?;
    let trials = drops
        .par_iter()
        .map(|&k| {
            let eyes: Vec<_> = cohort
                .eyes
                .iter()
                .filter(|e| e.n_visits() >= MIN_VISITS + k)
                .map(|e| e.truncated(k))
                .collect();
            let n_excluded = cohort.len() - eyes.len();
            if eyes.is_empty() {
                return Err(RobustnessError::EmptyIntersection);
            }
            let sub = Cohort::from_eyes(eyes, cohort.covariate_schema.clone())?;
            let outcome = refit_trial(
                &sub,
                reference,
                &reference_labels,
                settings,
                settings.seed.wrapping_add(k as u64),
            )?;
            Ok(trial_record(k as f64, 0, n_excluded, outcome))
        })
        .collect::<Result<Vec<_>, RobustnessError>>()?;
    let parameters: Vec<f64> = drops.iter().map(|&k| k as f64).collect();
    Ok(StabilityReport::from_trials(Protocol::Truncate, trials, &parameters))
}
