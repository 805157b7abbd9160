//! One function per pipeline stage.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

use subtype_core::characterization::{
    characterize, kaplan_meier, log_rank_across_clusters, survival_csv, with_conversion_covariate, CONVERSION,
};
use subtype_core::lcmm::{class_trajectory_summary, fit, posterior_memberships, FitResult, ModelSpec};
use subtype_core::link::LinkKind;
use subtype_core::robustness::{subsample_stability, truncation_stability, RefitSettings};
use subtype_core::selection::{information_criteria, select_classes};
use subtype_core::synthetic::{generate, write_cohort, CohortFiles, GeneratorConfig};

use crate::error::CliError;
use crate::files::{
    load_data_dir, memberships_csv, memberships_path, parse_memberships, read_fit, FitFile, FIT_FILE, MEMBERSHIPS_FILE,
};
use crate::manifest::Run;
use crate::report::summary_text;

/// Flags shared by every subcommand.
#[derive(Args, Debug, Clone, Serialize)]
pub struct Common {
    /// Seed for every random stream of the command.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SimulateArgs {
    /// Generator configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override the configured number of eyes.
    #[arg(long)]
    pub n_eyes: Option<usize>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkArg {
    Identity,
    Beta,
}

impl From<LinkArg> for LinkKind {
    fn from(l: LinkArg) -> Self {
        match l {
            LinkArg::Identity => LinkKind::Identity,
            LinkArg::Beta => LinkKind::Beta,
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ModelArgs {
    /// Directory holding trajectories.csv, covariates.csv and optionally events.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = LinkArg::Identity)]
    pub link: LinkArg,
    /// Random optimisation starts per fit.
    #[arg(long, default_value_t = 20)]
    pub starts: usize,
    #[arg(long, default_value_t = 500)]
    pub max_iterations: usize,
}

impl ModelArgs {
    fn spec(&self, n_classes: usize, seed: u64) -> ModelSpec {
        let mut spec = ModelSpec::with_classes(n_classes);
        spec.link = self.link.into();
        spec.optimizer.n_starts = self.starts;
        spec.optimizer.max_iterations = self.max_iterations;
        spec.optimizer.seed = seed;
        spec
    }
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct FitArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SelectArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Candidate class counts: `1-6`, `1..=6` or `1,2,4`.
    #[arg(long, default_value = "1-6")]
    pub g_range: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Subsample,
    Truncate,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ValidateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Reference fit file.
    #[arg(long)]
    pub fit: PathBuf,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, value_delimiter = ',', default_value = "0.4,0.5,0.6,0.7,0.8,0.9")]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub drop: Vec<usize>,
    /// Fresh random starts per refit, besides the warm start.
    #[arg(long, default_value_t = 2)]
    pub starts: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct CharacterizeArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fit: PathBuf,
    /// Variables to analyse (default: every covariate, plus conversion when
    /// events are present).
    #[arg(long, value_delimiter = ',')]
    pub covariates: Option<Vec<String>>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct SurvivalArgs {
    /// Directory holding events.csv.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub fit: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct ReportArgs {
    /// Run directory holding fit.json and any stage outputs.
    #[arg(long)]
    pub run: PathBuf,
    /// Cohort directory (default: the run directory).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Time points per class trajectory.
    #[arg(long, default_value_t = 50)]
    pub grid_points: usize,
    #[command(flatten)]
    pub common: Common,
}

pub fn simulate(args: &SimulateArgs, run: &mut Run) -> Result<(), CliError> {
    let mut config = match &args.config {
        Some(path) => {
            let bytes = run.input(path)?;
            let text = String::from_utf8(bytes).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
            GeneratorConfig::from_toml_str(&text)?
        }
        None => GeneratorConfig::default(),
    };
    if let Some(seed) = args.common.seed {
        config.seed = seed;
    }
    if let Some(n) = args.n_eyes {
        config.n_eyes = n;
    }
    config.validate()?;
    run.manifest.seed = Some(config.seed);
    let synth = generate(&config)?;
    run.ensure_out_dir()?;
    let files = write_cohort(&synth.cohort, &synth.events, &synth.labels, &run.out_dir)?;
    record_files(run, &files)?;
    run.write("generator.toml", config.to_toml_string().as_bytes())?;
    println!(
        "simulated {} eyes of {} subjects into {}",
        synth.cohort.len(),
        synth.cohort.n_subjects(),
        run.out_dir.display()
    );
    Ok(())
}

fn record_files(run: &mut Run, files: &CohortFiles) -> Result<(), CliError> {
    for path in files.all() {
        let bytes = std::fs::read(path).map_err(|e| CliError::data(format!("{}: {e}", path.display())))?;
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        run.record_output(&name, &bytes);
    }
    Ok(())
}

fn write_fit(run: &mut Run, result: FitResult, cohort: &subtype_core::cohort::Cohort) -> Result<FitFile, CliError> {
    let memberships = posterior_memberships(cohort, &result)?;
    run.write(MEMBERSHIPS_FILE, memberships_csv(&memberships).as_bytes())?;
    let file = FitFile::new(result, &memberships);
    run.write(FIT_FILE, file.to_json().as_bytes())?;
    Ok(file)
}

pub fn fit_cmd(args: &FitArgs, run: &mut Run) -> Result<(), CliError> {
    if args.classes == 0 {
        return Err(CliError::usage("--classes must be at least 1"));
    }
    let loaded = load_data_dir(run, &args.model.data)?;
    let spec = args.model.spec(args.classes, args.common.seed.unwrap_or(0));
    let result = fit(&loaded.cohort, &spec).map_err(|e| CliError::from(e).context("fitting"))?;
    let converged = result.convergence.converged;
    let file = write_fit(run, result, &loaded.cohort)?;
    println!(
        "fitted {} classes to {} eyes: loglik {:.4}, converged {converged}, mean max posterior {:.4}",
        file.fit.n_classes(),
        file.fit.n_eyes,
        file.fit.loglik,
        file.mean_max_posterior
    );
    Ok(())
}

/// Parses `a-b`, `a..b`, `a..=b` or a comma list.
pub fn parse_g_range(text: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::usage(format!("cannot parse class range `{text}`"));
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad());
    let t = text.trim();
    let range = if let Some((a, b)) = t.split_once("..=") {
        Some((num(a)?, num(b)?))
    } else if let Some((a, b)) = t.split_once("..") {
        Some((num(a)?, num(b)?.checked_sub(1).ok_or_else(bad)?))
    } else if let Some((a, b)) = t.split_once('-') {
        Some((num(a)?, num(b)?))
    } else {
        None
    };
    let out: Vec<usize> = match range {
        Some((a, b)) => (a..=b).collect(),
        None => t.split(',').map(num).collect::<Result<_, _>>()?,
    };
    if out.is_empty() || out.contains(&0) {
        return Err(CliError::usage(format!(
            "class range `{text}` must list counts of at least 1"
        )));
    }
    Ok(out)
}

pub fn select(args: &SelectArgs, run: &mut Run) -> Result<(), CliError> {
    let grid = parse_g_range(&args.g_range)?;
    let loaded = load_data_dir(run, &args.model.data)?;
    let spec = args.model.spec(1, args.common.seed.unwrap_or(0));
    let selection = select_classes(&loaded.cohort, &spec, &grid)?;
    run.write("selection.csv", selection.report.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&selection.report).expect("selection report serialises");
    run.write("selection.json", json.as_bytes())?;
    println!("selected {} classes by minimum ICL", selection.report.selected_classes);
    Ok(())
}

fn load_fit_and_cohort(
    run: &mut Run,
    data: &Path,
    fit_path: &Path,
) -> Result<(FitFile, subtype_core::cohort::LoadedCohort), CliError> {
    let file = read_fit(run, fit_path)?;
    let loaded = load_data_dir(run, data)?;
    if loaded.cohort.len() != file.fit.n_eyes {
        return Err(CliError::usage(format!(
            "{} was fitted on {} eyes but {} holds {}",
            fit_path.display(),
            file.fit.n_eyes,
            data.display(),
            loaded.cohort.len()
        )));
    }
    Ok((file, loaded))
}

pub fn validate(args: &ValidateArgs, run: &mut Run) -> Result<(), CliError> {
    let (file, loaded) = load_fit_and_cohort(run, &args.data, &args.fit)?;
    let settings = RefitSettings {
        fresh_starts: args.starts,
        seed: args.common.seed.unwrap_or(0),
    };
    let report = match args.mode {
        ModeArg::Subsample => {
            if args.trials == 0 || args.fractions.is_empty() {
                return Err(CliError::usage("subsampling needs at least one fraction and one trial"));
            }
            subsample_stability(&loaded.cohort, &file.fit, &args.fractions, args.trials, &settings)?
        }
        ModeArg::Truncate => {
            if args.drop.is_empty() {
                return Err(CliError::usage("truncation needs at least one --drop value"));
            }
            truncation_stability(&loaded.cohort, &file.fit, &args.drop, &settings)?
        }
    };
    let mode = report.protocol.name();
    run.write(&format!("stability-{mode}-trials.csv"), report.trials_csv().as_bytes())?;
    run.write(&format!("stability-{mode}.csv"), report.aggregate_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&report).expect("stability report serialises");
    run.write(&format!("stability-{mode}.json"), json.as_bytes())?;
    for a in &report.aggregates {
        match a.mean_accuracy {
            Some(m) => println!(
                "{mode} {}: mean accuracy {m:.4} over {} trials",
                a.parameter,
                a.n_trials - a.n_failed
            ),
            None => println!("{mode} {}: no converged trial", a.parameter),
        }
    }
    Ok(())
}

pub fn characterize_cmd(args: &CharacterizeArgs, run: &mut Run) -> Result<(), CliError> {
    let (file, loaded) = load_fit_and_cohort(run, &args.data, &args.fit)?;
    let memberships = posterior_memberships(&loaded.cohort, &file.fit)?;
    let has_events = !loaded.events.is_empty();
    let cohort = if has_events {
        with_conversion_covariate(&loaded.cohort, &loaded.events)
    } else {
        loaded.cohort
    };
    let variables = match &args.covariates {
        Some(v) => v.clone(),
        None => cohort.covariate_schema.names().map(String::from).collect(),
    };
    if variables.is_empty() {
        return Err(CliError::usage("no variables to characterise"));
    }
    if variables.iter().any(|v| v == CONVERSION) && !has_events {
        return Err(CliError::usage(
            "`conversion` requested but the data directory has no events.csv",
        ));
    }
    let report = characterize(&memberships, &cohort, &variables)?;
    run.write("characterization.csv", report.to_csv().as_bytes())?;
    let mut odds = String::from("variable,cluster,contrast,or,or_low,or_high,p,boundary\n");
    let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in report
        .rows
        .iter()
        .filter_map(|r| r.fast_odds.as_ref())
        .chain(&report.cluster_odds)
    {
        let contrast = serde_json::to_value(r.contrast).expect("contrast serialises");
        odds.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.variable,
            r.cluster,
            contrast.as_str().unwrap_or_default(),
            num(r.odds_ratio),
            num(r.ci.map(|c| c.0)),
            num(r.ci.map(|c| c.1)),
            num(r.p_value),
            r.boundary.as_deref().unwrap_or_default().replace(',', ";")
        ));
    }
    run.write("odds_ratios.csv", odds.as_bytes())?;
    run.write(
        "chord.csv",
        subtype_core::characterization::chord_csv(&report.chord_table()).as_bytes(),
    )?;
    let json = serde_json::to_string_pretty(&report).expect("characterisation report serialises");
    run.write("characterization.json", json.as_bytes())?;
    println!(
        "characterised {} variables across {} clusters ({} rare variables excluded)",
        report.rows.len(),
        report.n_clusters,
        report.excluded_rare.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct LogRankRecord {
    statistic: Option<f64>,
    df: Option<usize>,
    p_value: Option<f64>,
    note: Option<String>,
}

pub fn survival(args: &SurvivalArgs, run: &mut Run) -> Result<(), CliError> {
    let file = read_fit(run, &args.fit)?;
    let path = memberships_path(&args.fit, &file);
    let bytes = run.input(&path)?;
    let memberships = parse_memberships(&bytes, &path)?;
    let events_path = CohortFiles::in_dir(&args.data).events;
    let bytes = run.input(&events_path)?;
    let events = parse_events(&bytes, &events_path)?;
    let curves = kaplan_meier(&memberships, &events)?;
    run.write("survival.csv", survival_csv(&curves).as_bytes())?;
    let record = match log_rank_across_clusters(&memberships, &events) {
        Ok(t) => LogRankRecord {
            statistic: Some(t.statistic),
            df: Some(t.df),
            p_value: Some(t.p_value),
            note: None,
        },
        Err(e) => LogRankRecord {
            statistic: None,
            df: None,
            p_value: None,
            note: Some(e.to_string()),
        },
    };
    let json = serde_json::to_string_pretty(&record).expect("log-rank record serialises");
    run.write("logrank.json", json.as_bytes())?;
    for c in &curves {
        println!("cluster {}: terminal survival {:.4}", c.cluster, c.terminal_survival());
    }
    Ok(())
}

fn parse_events(bytes: &[u8], path: &Path) -> Result<Vec<subtype_core::cohort::EyeEvent>, CliError> {
    #[derive(serde::Deserialize)]
    struct Row {
        eye_id: String,
        event_time_years: f64,
        event_flag: u8,
    }
    let mut reader = csv::Reader::from_reader(bytes);
    reader
        .deserialize::<Row>()
        .enumerate()
        .map(|(i, r)| {
            let r = r.map_err(|e| CliError::data(format!("{}: line {}: {e}", path.display(), i + 2)))?;
            if r.event_flag > 1 {
                return Err(CliError::data(format!(
                    "{}: line {}: event_flag must be 0 or 1",
                    path.display(),
                    i + 2
                )));
            }
            Ok(subtype_core::cohort::EyeEvent {
                eye_id: r.eye_id,
                record: subtype_core::cohort::EventRecord {
                    event_time_years: r.event_time_years,
                    event: r.event_flag == 1,
                },
            })
        })
        .collect()
}

pub fn report(args: &ReportArgs, run: &mut Run) -> Result<(), CliError> {
    let fit_path = args.run.join(FIT_FILE);
    let data = args.data.clone().unwrap_or_else(|| args.run.clone());
    let (file, loaded) = load_fit_and_cohort(run, &data, &fit_path)?;
    let memberships = posterior_memberships(&loaded.cohort, &file.fit)?;
    let criteria = information_criteria(&file.fit, &memberships);
    let summary = class_trajectory_summary(&loaded.cohort, &file.fit, args.grid_points)?;

    let mut curve = String::from("class,time,latent,observed\n");
    for c in &summary.classes {
        for p in &c.curve {
            curve.push_str(&format!("{},{},{},{}\n", c.class, p.time, p.latent, p.observed));
        }
    }
    run.write("trajectory_plot.csv", curve.as_bytes())?;

    let curves = if loaded.events.is_empty() {
        None
    } else {
        let curves = kaplan_meier(&memberships, &loaded.events)?;
        run.write("survival_plot.csv", survival_csv(&curves).as_bytes())?;
        Some(curves)
    };

    let selection = match run.optional_input(&args.run.join("selection.json"))? {
        Some(bytes) => {
            Some(serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("selection.json: {e}")))?)
        }
        None => None,
    };
    let mut stability = Vec::new();
    for mode in ["subsample", "truncate"] {
        if let Some(bytes) = run.optional_input(&args.run.join(format!("stability-{mode}.json")))? {
            stability.push(
                serde_json::from_slice(&bytes).map_err(|e| CliError::usage(format!("stability-{mode}.json: {e}")))?,
            );
        }
    }
    let text = summary_text(
        &file,
        &memberships,
        &criteria,
        &summary,
        curves.as_deref(),
        selection.as_ref(),
        &stability,
    );
    run.write("summary.txt", text.as_bytes())?;
    print!("{text}");
    Ok(())
}
