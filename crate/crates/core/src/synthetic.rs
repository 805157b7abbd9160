//! Synthetic cohorts with known latent-class structure.
//!
//! Each eye belongs to exactly one class. Its outcome follows the class line
//! plus a correlated random intercept and slope plus Gaussian measurement
//! error. Baseline covariates are drawn from class-conditional distributions,
//! and conversion times are exponential with a class-specific hazard,
//! censored at the last visit.
//!
//! Randomness is split per subject: subject `s` draws from a ChaCha8 stream
//! `s` seeded by the configured seed, so output does not depend on the
//! order in which subjects are generated.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Cohort, CohortError, CovariateKind, CovariateSchema, EventRecord, EyeEvent, EyeSeries};

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("invalid generator configuration: {0}")]
    Config(String),
    #[error("cannot parse generator configuration: {0}")]
    Parse(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Cohort(#[from] CohortError),
}

/// Scale on which class intercepts are given.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InterceptScale {
    #[default]
    Db,
    /// Intercepts in [0, 1], mapped linearly onto `latent_reference`.
    Latent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub label: String,
    pub proportion: f64,
    pub intercept: f64,
    /// dB per year.
    pub slope: f64,
    /// Conversion events per year.
    #[serde(default)]
    pub hazard: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomEffects {
    pub intercept_sd: f64,
    pub slope_sd: f64,
    #[serde(default)]
    pub correlation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisitSchedule {
    pub per_year: f64,
    pub follow_up_years: f64,
    /// Half-width of the uniform jitter applied to every visit after baseline.
    pub jitter: f64,
}

impl VisitSchedule {
    pub fn n_visits(&self) -> usize {
        (self.per_year * self.follow_up_years + 1e-9).floor() as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectConfig {
    /// Group eyes in pairs under one subject.
    pub two_eyes: bool,
    /// Share of random-effect variance common to both eyes of a subject;
    /// 1 gives identical random effects.
    pub sharing_weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CovariateDistribution {
    /// Normal within each class.
    Continuous { means: Vec<f64>, sds: Vec<f64> },
    /// Bernoulli within each class.
    Binary { prevalence: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateConfig {
    pub name: String,
    /// Correlation between the two eyes of a subject; 1 makes the value a
    /// subject-level trait.
    #[serde(default)]
    pub within_subject_correlation: f64,
    #[serde(flatten)]
    pub distribution: CovariateDistribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_eyes: usize,
    pub seed: u64,
    pub error_sd: f64,
    #[serde(default)]
    pub intercept_scale: InterceptScale,
    /// dB range spanned by latent intercepts 0 and 1.
    #[serde(default = "default_latent_reference")]
    pub latent_reference: (f64, f64),
    pub random_effects: RandomEffects,
    pub visits: VisitSchedule,
    pub subjects: SubjectConfig,
    pub classes: Vec<ClassConfig>,
    #[serde(default)]
    pub covariates: Vec<CovariateConfig>,
}

fn default_latent_reference() -> (f64, f64) {
    (-2.0, 2.0)
}

fn class(label: &str, proportion: f64, intercept: f64, slope: f64, hazard: f64) -> ClassConfig {
    ClassConfig {
        label: label.into(),
        proportion,
        intercept,
        slope,
        hazard,
    }
}

fn continuous(name: &str, rho: f64, means: [f64; 4], sds: [f64; 4]) -> CovariateConfig {
    CovariateConfig {
        name: name.into(),
        within_subject_correlation: rho,
        distribution: CovariateDistribution::Continuous {
            means: means.to_vec(),
            sds: sds.to_vec(),
        },
    }
}

fn binary(name: &str, rho: f64, prevalence: [f64; 4]) -> CovariateConfig {
    CovariateConfig {
        name: name.into(),
        within_subject_correlation: rho,
        distribution: CovariateDistribution::Binary {
            prevalence: prevalence.to_vec(),
        },
    }
}

impl Default for GeneratorConfig {
    /// Four-class ocular-hypertension cohort with per-class slopes, sizes,
    /// conversion rates and baseline covariate distributions.
    fn default() -> Self {
        Self {
            n_eyes: 3133,
            seed: 20240501,
            error_sd: 0.5,
            intercept_scale: InterceptScale::Db,
            latent_reference: default_latent_reference(),
            random_effects: RandomEffects {
                intercept_sd: 1.3,
                slope_sd: 0.02,
                correlation: 0.0,
            },
            visits: VisitSchedule {
                per_year: 2.0,
                follow_up_years: 10.5,
                jitter: 0.1,
            },
            subjects: SubjectConfig {
                two_eyes: true,
                sharing_weight: 0.5,
            },
            classes: vec![
                class("Improvers", 0.25, -0.45, 0.08, 0.0038),
                class("Stables", 0.54, 0.14, -0.06, 0.0091),
                class("Slow progressors", 0.17, 0.30, -0.21, 0.0249),
                class("Fast progressors", 0.04, 0.20, -0.45, 0.0509),
            ],
            covariates: vec![
                continuous("age", 1.0, [51.8, 55.8, 61.3, 63.9], [8.3, 9.2, 8.7, 9.0]),
                continuous("iop", 0.5, [24.7, 24.8, 25.4, 25.7], [2.8, 2.9, 3.2, 3.3]),
                continuous("cct", 0.8, [574.3, 574.1, 570.5, 557.5], [37.5, 38.5, 41.2, 38.7]),
                continuous("psd", 0.5, [2.0, 2.0, 2.0, 2.2], [0.58, 0.48, 0.37, 0.36]),
                continuous("re", 0.8, [-1.0, -0.68, -0.24, 0.09], [2.3, 2.5, 2.3, 2.0]),
                binary("male", 1.0, [0.404, 0.421, 0.465, 0.579]),
                binary("african_american", 1.0, [0.286, 0.222, 0.232, 0.346]),
                binary("calcium_channel_blockers", 1.0, [0.074, 0.128, 0.126, 0.218]),
                binary("migraine", 1.0, [0.110, 0.120, 0.094, 0.045]),
            ],
        }
    }
}

impl GeneratorConfig {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn from_toml_str(text: &str) -> Result<Self, GeneratorError> {
        let config: Self = toml::from_str(text).map_err(|e| GeneratorError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self, GeneratorError> {
        let text = std::fs::read_to_string(path).map_err(|source| GeneratorError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("generator configuration serialises to TOML")
    }

    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: String| Err(GeneratorError::Config(m));
        let g = self.classes.len();
        if self.n_eyes == 0 {
            return bad("n_eyes must be positive".into());
        }
        if g == 0 {
            return bad("at least one class is required".into());
        }
        if self.classes.iter().any(|c| !(c.proportion >= 0.0)) {
            return bad("class proportions must be non-negative".into());
        }
        let total: f64 = self.classes.iter().map(|c| c.proportion).sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad(format!("class proportions sum to {total}, not 1"));
        }
        if self.classes.iter().any(|c| !(c.hazard >= 0.0)) {
            return bad("hazards must be non-negative".into());
        }
        if self
            .classes
            .iter()
            .any(|c| !c.intercept.is_finite() || !c.slope.is_finite())
        {
            return bad("class intercepts and slopes must be finite".into());
        }
        let re = &self.random_effects;
        if !(self.error_sd >= 0.0 && re.intercept_sd >= 0.0 && re.slope_sd >= 0.0) {
            return bad("standard deviations must be non-negative".into());
        }
        if !(re.correlation.abs() <= 1.0) {
            return bad("random-effect correlation must lie in [-1, 1]".into());
        }
        let v = &self.visits;
        if !(v.per_year > 0.0 && v.follow_up_years > 0.0 && v.jitter >= 0.0) {
            return bad("visit schedule needs positive rate and follow-up, non-negative jitter".into());
        }
        if v.jitter * 2.0 >= 1.0 / v.per_year {
            return bad("visit jitter must be below half the visit spacing".into());
        }
        if !(0.0..=1.0).contains(&self.subjects.sharing_weight) {
            return bad("sharing_weight must lie in [0, 1]".into());
        }
        let (lo, hi) = self.latent_reference;
        if !(lo < hi) {
            return bad("latent_reference must be an increasing pair".into());
        }
        let mut names = std::collections::HashSet::new();
        for cov in &self.covariates {
            if !names.insert(cov.name.as_str()) {
                return bad(format!("covariate `{}` declared twice", cov.name));
            }
            if !(0.0..=1.0).contains(&cov.within_subject_correlation) {
                return bad(format!(
                    "covariate `{}`: within_subject_correlation must lie in [0, 1]",
                    cov.name
                ));
            }
            match &cov.distribution {
                CovariateDistribution::Continuous { means, sds } => {
                    if means.len() != g || sds.len() != g {
                        return bad(format!("covariate `{}`: expected {g} means and sds", cov.name));
                    }
                    if sds.iter().any(|s| !(*s >= 0.0)) || means.iter().any(|m| !m.is_finite()) {
                        return bad(format!("covariate `{}`: invalid mean or sd", cov.name));
                    }
                }
                CovariateDistribution::Binary { prevalence } => {
                    if prevalence.len() != g {
                        return bad(format!("covariate `{}`: expected {g} prevalences", cov.name));
                    }
                    if prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
                        return bad(format!("covariate `{}`: prevalence outside [0, 1]", cov.name));
                    }
                }
            }
        }
        Ok(())
    }

    /// Class intercept in dB.
    pub fn intercept_db(&self, class: usize) -> f64 {
        let v = self.classes[class].intercept;
        match self.intercept_scale {
            InterceptScale::Db => v,
            InterceptScale::Latent => {
                let (lo, hi) = self.latent_reference;
                lo + v * (hi - lo)
            }
        }
    }

    pub fn covariate_schema(&self) -> CovariateSchema {
        CovariateSchema {
            columns: self
                .covariates
                .iter()
                .map(|c| {
                    let kind = match c.distribution {
                        CovariateDistribution::Continuous { .. } => CovariateKind::Continuous,
                        CovariateDistribution::Binary { .. } => CovariateKind::Binary,
                    };
                    (c.name.clone(), kind)
                })
                .collect(),
        }
    }
}

/// Generated eye-level ground truth, kept apart from the cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueLabel {
    pub eye_id: String,
    /// 1-based class index in configuration order.
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    pub events: Vec<EyeEvent>,
    pub labels: Vec<TrueLabel>,
}

impl SyntheticCohort {
    /// 0-based class of each eye, in cohort order.
    pub fn class_indices(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.class - 1).collect()
    }
}

struct GeneratedEye {
    eye: EyeSeries,
    event: EyeEvent,
    class: usize,
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_class<R: Rng>(rng: &mut R, classes: &[ClassConfig]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (g, c) in classes.iter().enumerate() {
        acc += c.proportion;
        if u < acc {
            return g;
        }
    }
    classes.iter().rposition(|c| c.proportion > 0.0).unwrap_or(0)
}

fn random_effect_pair(re: &RandomEffects, z0: f64, z1: f64) -> (f64, f64) {
    let r = re.correlation;
    let b0 = re.intercept_sd * z0;
    let b1 = re.slope_sd * (r * z0 + (1.0 - r * r).max(0.0).sqrt() * z1);
    (b0, b1)
}

/// Mixes a shared and an own standard normal so the pair has correlation `w`.
fn share(w: f64, shared: f64, own: f64) -> f64 {
    w.sqrt() * shared + (1.0 - w).sqrt() * own
}

fn generate_subject(config: &GeneratorConfig, subject: usize, eye_count: usize) -> Vec<GeneratedEye> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(subject as u64);
    let g = draw_class(&mut rng, &config.classes);
    let cls = &config.classes[g];
    let subject_id = format!("S{:05}", subject + 1);

    let shared_re = (normal(&mut rng), normal(&mut rng));
    let shared_cov: Vec<(f64, f64)> = config
        .covariates
        .iter()
        .map(|_| (normal(&mut rng), rng.random::<f64>()))
        .collect();

    let w = config.subjects.sharing_weight;
    let n_visits = config.visits.n_visits();
    let spacing = 1.0 / config.visits.per_year;
    let jitter = config.visits.jitter;
    let intercept = config.intercept_db(g);

    (0..eye_count)
        .map(|e| {
            let eye_id = if config.subjects.two_eyes {
                format!("{subject_id}-{}", ["OD", "OS"][e])
            } else {
                format!("E{:05}", subject + 1)
            };
            let z0 = share(w, shared_re.0, normal(&mut rng));
            let z1 = share(w, shared_re.1, normal(&mut rng));
            let (b0, b1) = random_effect_pair(&config.random_effects, z0, z1);

            let mut times = Vec::with_capacity(n_visits);
            let mut values = Vec::with_capacity(n_visits);
            for k in 0..n_visits {
                let t = if k == 0 {
                    0.0
                } else {
                    k as f64 * spacing + jitter * (2.0 * rng.random::<f64>() - 1.0)
                };
                let err = config.error_sd * normal(&mut rng);
                times.push(t);
                values.push(intercept + b0 + (cls.slope + b1) * t + err);
            }

            let mut covariates = BTreeMap::new();
            for (cov, &(zs, us)) in config.covariates.iter().zip(&shared_cov) {
                let rho = cov.within_subject_correlation;
                let value = match &cov.distribution {
                    CovariateDistribution::Continuous { means, sds } => {
                        means[g] + sds[g] * share(rho, zs, normal(&mut rng))
                    }
                    CovariateDistribution::Binary { prevalence } => {
                        let own: f64 = rng.random();
                        let pick_shared: f64 = rng.random();
                        let u = if pick_shared < rho { us } else { own };
                        f64::from(u8::from(u < prevalence[g]))
                    }
                };
                covariates.insert(cov.name.clone(), Some(value));
            }

            let last = *times.last().expect("at least one visit");
            let event_time = if cls.hazard > 0.0 {
                Exp::new(cls.hazard).expect("positive hazard").sample(&mut rng)
            } else {
                f64::INFINITY
            };
            let record = if event_time <= last {
                EventRecord {
                    event_time_years: event_time,
                    event: true,
                }
            } else {
                EventRecord {
                    event_time_years: last,
                    event: false,
                }
            };
            GeneratedEye {
                eye: EyeSeries {
                    eye_id: eye_id.clone(),
                    subject_id: subject_id.clone(),
                    times,
                    values,
                    covariates,
                },
                event: EyeEvent { eye_id, record },
                class: g,
            }
        })
        .collect()
}

/// Draws a cohort, its conversion events and the true class of every eye.
pub fn generate(config: &GeneratorConfig) -> Result<SyntheticCohort, GeneratorError> {
    config.validate()?;
    let per_subject = if config.subjects.two_eyes { 2 } else { 1 };
    let n_subjects = config.n_eyes.div_ceil(per_subject);
    let generated: Vec<Vec<GeneratedEye>> = (0..n_subjects)
        .into_par_iter()
        .map(|s| {
            let count = per_subject.min(config.n_eyes - s * per_subject);
            generate_subject(config, s, count)
        })
        .collect();

    let mut eyes = Vec::with_capacity(config.n_eyes);
    let mut events = Vec::with_capacity(config.n_eyes);
    let mut labels = Vec::with_capacity(config.n_eyes);
    for item in generated.into_iter().flatten() {
        labels.push(TrueLabel {
            eye_id: item.eye.eye_id.clone(),
            class: item.class + 1,
        });
        events.push(item.event);
        eyes.push(item.eye);
    }
    let cohort = Cohort::from_eyes(eyes, config.covariate_schema())?;
    Ok(SyntheticCohort { cohort, events, labels })
}

/// Paths of the files written by [`write_cohort`].
#[derive(Debug, Clone, PartialEq)]
pub struct CohortFiles {
    pub trajectories: PathBuf,
    pub covariates: PathBuf,
    pub events: PathBuf,
    pub labels: PathBuf,
}

impl CohortFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            trajectories: dir.join("trajectories.csv"),
            covariates: dir.join("covariates.csv"),
            events: dir.join("events.csv"),
            labels: dir.join("true_labels.csv"),
        }
    }

    pub fn all(&self) -> [&Path; 4] {
        [&self.trajectories, &self.covariates, &self.events, &self.labels]
    }
}

fn write_file(path: &Path, body: &str) -> Result<(), GeneratorError> {
    let io = |source| GeneratorError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io)?;
    file.write_all(body.as_bytes()).map_err(io)
}

/// Writes the three cohort CSVs plus `true_labels.csv` into `out_dir`.
/// Floating-point values use shortest round-trip formatting, so reading the
/// files back reproduces every value bit for bit.
pub fn write_cohort(
    cohort: &Cohort,
    events: &[EyeEvent],
    labels: &[TrueLabel],
    out_dir: &Path,
) -> Result<CohortFiles, GeneratorError> {
    std::fs::create_dir_all(out_dir).map_err(|source| GeneratorError::Io {
        path: out_dir.display().to_string(),
        source,
    })?;
    let files = CohortFiles::in_dir(out_dir);

    let mut traj = String::from("eye_id,subject_id,time_years,value\n");
    for eye in &cohort.eyes {
        for (t, y) in eye.times.iter().zip(&eye.values) {
            traj.push_str(&format!("{},{},{t},{y}\n", eye.eye_id, eye.subject_id));
        }
    }
    write_file(&files.trajectories, &traj)?;

    let names: Vec<&str> = cohort.covariate_schema.names().collect();
    let mut cov = String::from("eye_id");
    for name in &names {
        cov.push(',');
        cov.push_str(name);
    }
    cov.push('\n');
    for eye in &cohort.eyes {
        cov.push_str(&eye.eye_id);
        for name in &names {
            cov.push(',');
            if let Some(v) = eye.covariate(name) {
                cov.push_str(&v.to_string());
            }
        }
        cov.push('\n');
    }
    write_file(&files.covariates, &cov)?;

    let mut ev = String::from("eye_id,event_time_years,event_flag\n");
    for e in events {
        ev.push_str(&format!(
            "{},{},{}\n",
            e.eye_id,
            e.record.event_time_years,
            u8::from(e.record.event)
        ));
    }
    write_file(&files.events, &ev)?;

    let mut lab = String::from("eye_id,class\n");
    for l in labels {
        lab.push_str(&format!("{},{}\n", l.eye_id, l.class));
    }
    write_file(&files.labels, &lab)?;
    Ok(files)
}

/// Reads a `true_labels.csv` file.
pub fn read_labels(path: &Path) -> Result<Vec<TrueLabel>, GeneratorError> {
    let io = |e: csv::Error| GeneratorError::Parse(format!("{}: {e}", path.display()));
    let mut rdr = csv::Reader::from_path(path).map_err(io)?;
    rdr.deserialize().map(|r| r.map_err(io)).collect()
}
