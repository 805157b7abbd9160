//! Long-format longitudinal cohorts: per-eye trajectories, baseline covariates
//! and conversion events.
//!
//! Three CSV files describe a cohort:
//!
//! * trajectories: `eye_id,subject_id,time_years,value`, one row per visit;
//! * covariates: `eye_id,<name1>,<name2>,...`, one row per eye, empty cell = missing;
//! * events (optional): `eye_id,event_time_years,event_flag`.
//!
//! Eyes that violate a per-eye invariant (too few visits, non-monotone times,
//! non-finite values) are excluded and reported; file-level problems abort the load.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum number of visits an eye must have to enter the cohort.
pub const MIN_VISITS: usize = 5;

#[derive(Debug, Error)]
pub enum CohortError {
    #[error("{path}: line {line}: {message}")]
    Parse { path: String, line: u64, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("eye {eye_id}: duplicate visit at time {time}")]
    DuplicateVisit { eye_id: String, time: f64 },
    #[error("eye {eye_id}: rows disagree on subject_id ({first} vs {second})")]
    InconsistentSubject {
        eye_id: String,
        first: String,
        second: String,
    },
    #[error("covariate `{0}` is not declared in the covariate schema")]
    UndeclaredCovariate(String),
    #[error("binary covariate `{name}` has non-binary value {value} for eye {eye_id}")]
    NonBinaryValue { name: String, eye_id: String, value: f64 },
    #[error("eye {0} appears more than once in the covariate file")]
    DuplicateCovariateRow(String),
    #[error("event for eye {eye_id}: {message}")]
    InvalidEvent { eye_id: String, message: String },
    #[error("observed values span a degenerate range [{min}, {max}]")]
    DegenerateRange { min: f64, max: f64 },
    #[error("eye {0} appears more than once in the cohort")]
    DuplicateEye(String),
    #[error("cohort is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovariateKind {
    Continuous,
    Binary,
}

/// Declared covariate names with their kinds, in column order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CovariateSchema {
    pub columns: Vec<(String, CovariateKind)>,
}

impl CovariateSchema {
    pub fn kind(&self, name: &str) -> Option<CovariateKind> {
        self.columns.iter().find(|(n, _)| n == name).map(|(_, k)| *k)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.columns.iter().map(|(n, _)| n.as_str())
    }
}

/// Observed outcome range used to rescale values for the beta link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueRange {
    pub min: f64,
    pub max: f64,
}

impl ValueRange {
    pub fn new(min: f64, max: f64) -> Result<Self, CohortError> {
        if !(min.is_finite() && max.is_finite() && min < max) {
            return Err(CohortError::DegenerateRange { min, max });
        }
        Ok(Self { min, max })
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

/// One eye's trajectory, nested under a subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeSeries {
    pub eye_id: String,
    pub subject_id: String,
    /// Years since this eye's baseline visit, strictly increasing.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// `None` marks a missing covariate cell.
    pub covariates: BTreeMap<String, Option<f64>>,
}

impl EyeSeries {
    pub fn n_visits(&self) -> usize {
        self.times.len()
    }

    pub fn last_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn covariate(&self, name: &str) -> Option<f64> {
        self.covariates.get(name).copied().flatten()
    }

    /// Checks the per-eye invariants; returns a diagnostic on violation.
    pub fn validate(&self) -> Result<(), String> {
        if self.times.len() != self.values.len() {
            return Err(format!("{} times but {} values", self.times.len(), self.values.len()));
        }
        if self.times.len() < MIN_VISITS {
            return Err(format!(
                "only {} visits (at least {MIN_VISITS} required)",
                self.times.len()
            ));
        }
        if let Some(t) = self.times.iter().find(|t| !t.is_finite() || **t < 0.0) {
            return Err(format!("invalid visit time {t}"));
        }
        if let Some(w) = self.times.windows(2).find(|w| w[1] <= w[0]) {
            return Err(format!("visit times not strictly increasing ({} then {})", w[0], w[1]));
        }
        if let Some(v) = self.values.iter().find(|v| !v.is_finite()) {
            return Err(format!("non-finite value {v}"));
        }
        Ok(())
    }

    /// Copy of this eye with the last `k` visits removed.
    pub fn truncated(&self, k: usize) -> EyeSeries {
        let keep = self.times.len().saturating_sub(k);
        EyeSeries {
            times: self.times[..keep].to_vec(),
            values: self.values[..keep].to_vec(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub eyes: Vec<EyeSeries>,
    /// `None` only for an empty cohort.
    pub value_range: Option<ValueRange>,
    pub covariate_schema: CovariateSchema,
}

impl Cohort {
    /// Builds a cohort from already-validated eyes, computing the value range.
    pub fn from_eyes(eyes: Vec<EyeSeries>, schema: CovariateSchema) -> Result<Self, CohortError> {
        let mut seen = HashSet::new();
        for eye in &eyes {
            if !seen.insert(eye.eye_id.as_str()) {
                return Err(CohortError::DuplicateEye(eye.eye_id.clone()));
            }
        }
        let value_range = if eyes.is_empty() {
            None
        } else {
            let (lo, hi) = eyes
                .iter()
                .flat_map(|e| e.values.iter().copied())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            Some(ValueRange::new(lo, hi)?)
        };
        Ok(Self {
            eyes,
            value_range,
            covariate_schema: schema,
        })
    }

    pub fn len(&self) -> usize {
        self.eyes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eyes.is_empty()
    }

    pub fn n_subjects(&self) -> usize {
        self.eyes
            .iter()
            .map(|e| e.subject_id.as_str())
            .collect::<HashSet<_>>()
            .len()
    }

    pub fn n_observations(&self) -> usize {
        self.eyes.iter().map(|e| e.n_visits()).sum()
    }

    pub fn mean_visits(&self) -> f64 {
        if self.eyes.is_empty() {
            return 0.0;
        }
        self.n_observations() as f64 / self.eyes.len() as f64
    }

    /// Sub-cohort holding the eyes at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Cohort, CohortError> {
        let eyes = indices.iter().map(|&i| self.eyes[i].clone()).collect();
        Cohort::from_eyes(eyes, self.covariate_schema.clone())
    }

    pub fn index_of(&self) -> HashMap<&str, usize> {
        self.eyes
            .iter()
            .enumerate()
            .map(|(i, e)| (e.eye_id.as_str(), i))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_time_years: f64,
    /// `true` = converted, `false` = censored at `event_time_years`.
    pub event: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EyeEvent {
    pub eye_id: String,
    #[serde(flatten)]
    pub record: EventRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub eye_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCohort {
    pub cohort: Cohort,
    pub events: Vec<EyeEvent>,
    pub exclusions: Vec<Exclusion>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CohortError + '_ {
    move |source| CohortError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> CohortError {
    CohortError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>, CohortError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn expect_header(path: &Path, got: &csv::StringRecord, want: &[&str]) -> Result<(), CohortError> {
    let names: Vec<&str> = got.iter().collect();
    if names != want {
        return Err(parse_err(
            path,
            1,
            format!("expected header `{}`, found `{}`", want.join(","), names.join(",")),
        ));
    }
    Ok(())
}

fn parse_f64(path: &Path, line: u64, field: &str, column: &str) -> Result<f64, CohortError> {
    field.parse::<f64>().map_err(|_| {
        parse_err(
            path,
            line,
            format!("column `{column}`: cannot parse `{field}` as a number"),
        )
    })
}

fn record_line(rec: &csv::StringRecord) -> u64 {
    rec.position().map(|p| p.line()).unwrap_or(0)
}

struct RawEye {
    subject_id: String,
    times: Vec<f64>,
    values: Vec<f64>,
}

fn read_trajectories(path: &Path) -> Result<Vec<(String, RawEye)>, CohortError> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    expect_header(path, &header, &["eye_id", "subject_id", "time_years", "value"])?;

    let mut order: Vec<String> = Vec::new();
    let mut eyes: HashMap<String, RawEye> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record_line(&rec);
        if rec.len() != 4 {
            return Err(parse_err(path, line, format!("expected 4 fields, found {}", rec.len())));
        }
        let eye_id = rec[0].to_string();
        let subject_id = rec[1].to_string();
        if eye_id.is_empty() || subject_id.is_empty() {
            return Err(parse_err(path, line, "empty eye_id or subject_id"));
        }
        let time = parse_f64(path, line, &rec[2], "time_years")?;
        let value = parse_f64(path, line, &rec[3], "value")?;
        let entry = eyes.entry(eye_id.clone()).or_insert_with(|| {
            order.push(eye_id.clone());
            RawEye {
                subject_id: subject_id.clone(),
                times: Vec::new(),
                values: Vec::new(),
            }
        });
        if entry.subject_id != subject_id {
            return Err(CohortError::InconsistentSubject {
                eye_id,
                first: entry.subject_id.clone(),
                second: subject_id,
            });
        }
        if entry.times.contains(&time) {
            return Err(CohortError::DuplicateVisit { eye_id, time });
        }
        entry.times.push(time);
        entry.values.push(value);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let raw = eyes.remove(&id).expect("eye recorded in order");
            (id, raw)
        })
        .collect())
}

type CovariateRows = HashMap<String, BTreeMap<String, Option<f64>>>;

fn read_covariates(
    path: &Path,
    declared: Option<&CovariateSchema>,
) -> Result<(CovariateSchema, CovariateRows), CohortError> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    if header.get(0) != Some("eye_id") {
        return Err(parse_err(path, 1, "first column must be `eye_id`"));
    }
    let names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    if let Some(schema) = declared {
        if let Some(n) = names.iter().find(|n| schema.kind(n).is_none()) {
            return Err(CohortError::UndeclaredCovariate(n.clone()));
        }
    }

    let mut rows: CovariateRows = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record_line(&rec);
        let eye_id = rec[0].to_string();
        let mut map = BTreeMap::new();
        for (name, cell) in names.iter().zip(rec.iter().skip(1)) {
            let value = if cell.is_empty() {
                None
            } else {
                Some(parse_f64(path, line, cell, name)?)
            };
            map.insert(name.clone(), value);
        }
        if rows.insert(eye_id.clone(), map).is_some() {
            return Err(CohortError::DuplicateCovariateRow(eye_id));
        }
    }

    let schema = match declared {
        Some(schema) => CovariateSchema {
            columns: names
                .iter()
                .map(|n| (n.clone(), schema.kind(n).expect("checked above")))
                .collect(),
        },
        None => CovariateSchema {
            columns: names
                .iter()
                .map(|n| {
                    let binary = rows
                        .values()
                        .filter_map(|m| m.get(n).copied().flatten())
                        .all(|v| v == 0.0 || v == 1.0);
                    let kind = if binary {
                        CovariateKind::Binary
                    } else {
                        CovariateKind::Continuous
                    };
                    (n.clone(), kind)
                })
                .collect(),
        },
    };

    for (eye_id, map) in &rows {
        for (name, kind) in &schema.columns {
            if *kind != CovariateKind::Binary {
                continue;
            }
            if let Some(v) = map.get(name).copied().flatten() {
                if v != 0.0 && v != 1.0 {
                    return Err(CohortError::NonBinaryValue {
                        name: name.clone(),
                        eye_id: eye_id.clone(),
                        value: v,
                    });
                }
            }
        }
    }
    Ok((schema, rows))
}

fn read_events(path: &Path) -> Result<Vec<EyeEvent>, CohortError> {
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?.clone();
    expect_header(path, &header, &["eye_id", "event_time_years", "event_flag"])?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(path, line, e.to_string())
        })?;
        let line = record_line(&rec);
        let eye_id = rec[0].to_string();
        let time = parse_f64(path, line, &rec[1], "event_time_years")?;
        let event = match &rec[2] {
            "1" => true,
            "0" => false,
            other => {
                return Err(parse_err(
                    path,
                    line,
                    format!("event_flag must be 0 or 1, found `{other}`"),
                ))
            }
        };
        if !(time.is_finite() && time >= 0.0) {
            return Err(CohortError::InvalidEvent {
                eye_id,
                message: format!("negative or non-finite event time {time}"),
            });
        }
        out.push(EyeEvent {
            eye_id,
            record: EventRecord {
                event_time_years: time,
                event,
            },
        });
    }
    Ok(out)
}

/// Loads and validates a cohort.
///
/// When `schema` is given, every covariate column must be declared in it;
/// otherwise kinds are inferred (a column holding only 0/1 is binary).
/// Times are re-expressed relative to each eye's first visit.
pub fn load_cohort(
    trajectory_file: &Path,
    covariate_file: &Path,
    events_file: Option<&Path>,
    schema: Option<&CovariateSchema>,
) -> Result<LoadedCohort, CohortError> {
    let raw = read_trajectories(trajectory_file)?;
    let (schema, mut covariate_rows) = read_covariates(covariate_file, schema)?;

    let mut eyes = Vec::new();
    let mut exclusions = Vec::new();
    for (eye_id, raw) in raw {
        let base = raw.times.first().copied().unwrap_or(0.0);
        let covariates = covariate_rows
            .remove(&eye_id)
            .unwrap_or_else(|| schema.names().map(|n| (n.to_string(), None)).collect());
        let mut eye = EyeSeries {
            eye_id,
            subject_id: raw.subject_id,
            times: raw.times,
            values: raw.values,
            covariates,
        };
        match eye.validate() {
            Ok(()) => {
                if base != 0.0 {
                    eye.times.iter_mut().for_each(|t| *t -= base);
                }
                eyes.push(eye);
            }
            Err(reason) => exclusions.push(Exclusion {
                eye_id: eye.eye_id,
                reason,
            }),
        }
    }

    let cohort = Cohort::from_eyes(eyes, schema)?;

    let mut events = Vec::new();
    if let Some(path) = events_file {
        let index = cohort.index_of();
        let excluded: HashSet<&str> = exclusions.iter().map(|e| e.eye_id.as_str()).collect();
        for ev in read_events(path)? {
            match index.get(ev.eye_id.as_str()) {
                Some(&i) => {
                    let last = cohort.eyes[i].last_time();
                    if ev.record.event_time_years > last + 1e-9 {
                        return Err(CohortError::InvalidEvent {
                            eye_id: ev.eye_id,
                            message: format!("event time {} after last follow-up {last}", ev.record.event_time_years),
                        });
                    }
                    events.push(ev);
                }
                None if excluded.contains(ev.eye_id.as_str()) => {}
                None => {
                    return Err(CohortError::InvalidEvent {
                        eye_id: ev.eye_id,
                        message: "eye not present in trajectory file".into(),
                    })
                }
            }
        }
    }

    Ok(LoadedCohort {
        cohort,
        events,
        exclusions,
    })
}

/// One row of a baseline summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BaselineRow {
    Continuous {
        name: String,
        n: usize,
        mean: f64,
        sd: f64,
    },
    Binary {
        name: String,
        n: usize,
        count: usize,
        percent: f64,
    },
}

impl BaselineRow {
    pub fn name(&self) -> &str {
        match self {
            BaselineRow::Continuous { name, .. } | BaselineRow::Binary { name, .. } => name,
        }
    }
}

/// Sample mean and SD (n - 1 denominator; a single value has SD 0).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Mean (SD) per continuous covariate and count (%) per binary covariate,
/// over eyes with a non-missing value.
pub fn summarize_baseline(cohort: &Cohort) -> Vec<BaselineRow> {
    cohort
        .covariate_schema
        .columns
        .iter()
        .map(|(name, kind)| {
            let values: Vec<f64> = cohort.eyes.iter().filter_map(|e| e.covariate(name)).collect();
            match kind {
                CovariateKind::Continuous => {
                    let (mean, sd) = mean_sd(&values);
                    BaselineRow::Continuous {
                        name: name.clone(),
                        n: values.len(),
                        mean,
                        sd,
                    }
                }
                CovariateKind::Binary => {
                    let count = values.iter().filter(|v| **v == 1.0).count();
                    let percent = if values.is_empty() {
                        0.0
                    } else {
                        100.0 * count as f64 / values.len() as f64
                    };
                    BaselineRow::Binary {
                        name: name.clone(),
                        n: values.len(),
                        count,
                        percent,
                    }
                }
            }
        })
        .collect()
}
