//! On-disk formats owned by the command-line tool: data directories, fit
//! files and membership tables.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use subtype_core::cohort::{load_cohort, LoadedCohort};
use subtype_core::lcmm::{FitResult, MembershipTable};
use subtype_core::synthetic::CohortFiles;

use crate::error::CliError;
use crate::manifest::{Run, TOOL_VERSION};

pub const FIT_FORMAT: &str = "subtype-fit";
pub const FIT_FILE: &str = "fit.json";
pub const MEMBERSHIPS_FILE: &str = "memberships.csv";

/// Loads the cohort in `dir`, digesting every file read. The events file is
/// optional.
pub fn load_data_dir(run: &mut Run, dir: &Path) -> Result<LoadedCohort, CliError> {
    let files = CohortFiles::in_dir(dir);
    run.input(&files.trajectories)?;
    run.input(&files.covariates)?;
    let events = run.optional_input(&files.events)?.map(|_| files.events.clone());
    let loaded = load_cohort(&files.trajectories, &files.covariates, events.as_deref(), None)
        .map_err(|e| CliError::from(e).context("loading cohort"))?;
    if loaded.cohort.is_empty() {
        return Err(CliError::data(format!(
            "no eye in {} passed validation ({} excluded)",
            dir.display(),
            loaded.exclusions.len()
        )));
    }
    Ok(loaded)
}

/// Versioned fit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub format: String,
    pub version: String,
    /// Membership table written alongside, relative to the fit file.
    pub memberships: String,
    pub mean_max_posterior: f64,
    pub fit: FitResult,
}

impl FitFile {
    pub fn new(fit: FitResult, memberships: &MembershipTable) -> Self {
        Self {
            format: FIT_FORMAT.into(),
            version: TOOL_VERSION.into(),
            memberships: MEMBERSHIPS_FILE.into(),
            mean_max_posterior: memberships.mean_max_posterior(),
            fit,
        }
    }

    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("fit file serialises");
        text.push('\n');
        text
    }
}

/// Reads a fit file, rejecting other formats and tool versions.
pub fn read_fit(run: &mut Run, path: &Path) -> Result<FitFile, CliError> {
    let bytes = run.input(path)?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| CliError::usage(format!("{} is not a fit file: {e}", path.display())))?;
    let format = value.get("format").and_then(|v| v.as_str()).unwrap_or_default();
    if format != FIT_FORMAT {
        return Err(CliError::usage(format!("{} is not a fit file", path.display())));
    }
    let version = value.get("version").and_then(|v| v.as_str()).unwrap_or_default();
    if version != TOOL_VERSION {
        return Err(CliError::usage(format!(
            "{} was written by version {version}, this is version {TOOL_VERSION}",
            path.display()
        )));
    }
    serde_json::from_value(value).map_err(|e| CliError::usage(format!("{}: malformed fit file: {e}", path.display())))
}

/// Path of the membership table referenced by a fit file.
pub fn memberships_path(fit_path: &Path, fit: &FitFile) -> PathBuf {
    fit_path.parent().unwrap_or(Path::new(".")).join(&fit.memberships)
}

/// CSV with header `eye_id,class,max_posterior,p1..pG`; classes are 1-based.
pub fn memberships_csv(table: &MembershipTable) -> String {
    let mut out = String::from("eye_id,class,max_posterior");
    for g in 1..=table.n_classes() {
        out.push_str(&format!(",p{g}"));
    }
    out.push('\n');
    for (i, id) in table.eye_ids.iter().enumerate() {
        out.push_str(&format!("{id},{},{}", table.map_class[i] + 1, table.max_posterior[i]));
        for p in &table.tau[i] {
            out.push_str(&format!(",{p}"));
        }
        out.push('\n');
    }
    out
}

pub fn parse_memberships(bytes: &[u8], source: &Path) -> Result<MembershipTable, CliError> {
    let bad = |m: String| CliError::data(format!("{}: {m}", source.display()));
    let mut reader = csv::Reader::from_reader(bytes);
    let header = reader.headers().map_err(|e| bad(e.to_string()))?.clone();
    let g = header
        .iter()
        .filter(|h| h.starts_with('p') && h[1..].parse::<usize>().is_ok())
        .count();
    if header.get(0) != Some("eye_id") || g == 0 {
        return Err(bad("expected header eye_id,class,max_posterior,p1..pG".into()));
    }
    let (mut ids, mut tau) = (Vec::new(), Vec::new());
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        let row: Result<Vec<f64>, _> = (3..3 + g).map(|k| record.get(k).unwrap_or("").parse::<f64>()).collect();
        let row = row.map_err(|e| bad(format!("line {}: {e}", line + 2)))?;
        ids.push(record.get(0).unwrap_or_default().to_string());
        tau.push(row);
    }
    Ok(MembershipTable::from_posteriors(ids, tau))
}
