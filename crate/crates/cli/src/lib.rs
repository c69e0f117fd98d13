//! Command-line front end: argument definitions and command runners.

pub mod input;
pub mod report;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use gpcm::closed::{closed_test_from_fits, ClosedTestConfig, Method};
use gpcm::criteria::IcTable;
use gpcm::em::{fit_hierarchy, fit_multistart, FitConfig, InitMode, DEFAULT_RANDOM_STARTS};
use gpcm::model::ModelId;
use gpcm::simulation::{pvalue_sdf_experiment, ExperimentConfig, ScenarioSpec};
use serde::Serialize;

use crate::input::{misallocations, read_csv, Dataset};
use crate::report::{pvalues_csv, ClosedTestView, FitReport, FitSettings, IcView, SimulationSummary};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<gpcm::error::Error> for CliError {
    fn from(e: gpcm::error::Error) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "gpcm-lrt",
    version,
    about = "Likelihood-ratio testing for parsimonious Gaussian mixtures"
)]
pub struct Cli {
    /// Worker threads for multi-start, bootstrap and simulation work.
    #[arg(long, global = true, env = "GPCM_THREADS")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model and report its estimates.
    Fit(FitArgs),
    /// Run the closed LR testing procedure over the eight models.
    ClosedTest(ClosedTestArgs),
    /// Information criteria for all eight models.
    Ic(IcArgs),
    /// Simulate the null distribution of LR-test p-values.
    Simulate(SimulateArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum InitArg {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Args)]
pub struct EmArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random starts per model besides the hierarchical start.
    #[arg(long, default_value_t = DEFAULT_RANDOM_STARTS)]
    pub starts: usize,
    /// Aitken stopping threshold.
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    #[arg(long, value_enum, default_value_t = InitArg::Soft)]
    pub init: InitArg,
}

impl EmArgs {
    fn fit_config(&self) -> Result<FitConfig, CliError> {
        let cfg = FitConfig {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            seed: self.seed,
            init_mode: match self.init {
                InitArg::Soft => InitMode::Soft,
                InitArg::Hard => InitMode::Hard,
            },
            ..FitConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn settings(&self) -> FitSettings {
        FitSettings {
            seed: self.seed,
            starts: self.starts,
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            init: format!("{:?}", self.init).to_lowercase(),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// CSV of numeric columns; a trailing text column is read as labels.
    #[arg(long, short)]
    pub input: PathBuf,
    /// Number of mixture components.
    #[arg(short, long)]
    pub k: usize,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset, CliError> {
        if self.k == 0 {
            return Err(CliError::Validation("k must be at least 1".into()));
        }
        let ds = read_csv(&self.input)?;
        if ds.data.n() < self.k {
            return Err(CliError::Validation(format!(
                "insufficient data: {} observations for {} components",
                ds.data.n(),
                self.k
            )));
        }
        Ok(ds)
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, short)]
    pub model: ModelId,
    #[command(flatten)]
    pub em: EmArgs,
    /// Write the JSON report here instead of standard output.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct ClosedTestArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "chi2")]
    pub method: Method,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Bootstrap replicates per null model.
    #[arg(long, default_value_t = 999)]
    pub replicates: usize,
    #[command(flatten)]
    pub em: EmArgs,
    /// Write the JSON report here.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct IcArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub em: EmArgs,
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// Model generating the data (the null hypothesis under study).
    #[arg(long, short)]
    pub model: ModelId,
    #[arg(short)]
    pub n: usize,
    /// Bhattacharyya overlap between the two groups, in (0, 1).
    #[arg(long)]
    pub overlap: f64,
    #[arg(long, default_value_t = 200)]
    pub reps: usize,
    #[arg(long, default_value = "chi2")]
    pub method: Method,
    #[arg(long, default_value_t = 99)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-6)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iter: usize,
    /// Directory receiving pvalues.csv and summary.json.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Validation(format!("cannot write {}: {e}", path.display())))
}

/// Runs a command and returns what it prints on standard output.
pub fn run(command: &Command) -> Result<String, CliError> {
    match command {
        Command::Fit(a) => run_fit(a),
        Command::ClosedTest(a) => run_closed_test(a),
        Command::Ic(a) => run_ic(a),
        Command::Simulate(a) => run_simulate(a),
    }
}

fn run_fit(a: &FitArgs) -> Result<String, CliError> {
    let cfg = a.em.fit_config()?;
    let ds = a.data.load()?;
    let fit = fit_multistart(&ds.data, a.model, a.data.k, &cfg, a.em.starts)?;
    let mis = ds
        .labels
        .as_ref()
        .map(|l| misallocations(&fit.responsibilities.map_labels(), l));
    let json = to_json(&FitReport::new(&fit, mis, a.em.settings()));
    match &a.output {
        Some(path) => {
            write_file(path, &json)?;
            Ok(String::new())
        }
        None => Ok(json),
    }
}

fn emit(json: String, table: String, output: &Option<PathBuf>, as_json: bool) -> Result<String, CliError> {
    if let Some(path) = output {
        write_file(path, &json)?;
    }
    Ok(if as_json { json } else { table })
}

fn run_closed_test(a: &ClosedTestArgs) -> Result<String, CliError> {
    let cfg = a.em.fit_config()?;
    let test = ClosedTestConfig {
        method: a.method,
        alpha: a.alpha,
        replicates: a.replicates,
        seed: a.em.seed,
        random_starts: a.em.starts,
    };
    test.validate()?;
    let ds = a.data.load()?;
    let fits = fit_hierarchy(&ds.data, a.data.k, &cfg, a.em.starts)?;
    let report = closed_test_from_fits(&ds.data, a.data.k, &fits, &cfg, &test)?;
    let view = ClosedTestView::new(&report, a.em.settings());
    emit(to_json(&view), view.table(), &a.output, a.json)
}

fn run_ic(a: &IcArgs) -> Result<String, CliError> {
    let cfg = a.em.fit_config()?;
    let ds = a.data.load()?;
    let fits = fit_hierarchy(&ds.data, a.data.k, &cfg, a.em.starts)?;
    let view = IcView::new(&IcTable::from_fits(fits.values()), a.data.k, a.em.settings());
    emit(to_json(&view), view.table(), &a.output, a.json)
}

fn run_simulate(a: &SimulateArgs) -> Result<String, CliError> {
    let scenario = ScenarioSpec {
        model: a.model,
        n: a.n,
        overlap: a.overlap,
    };
    scenario.validate()?;
    let fit_cfg = FitConfig {
        epsilon: a.epsilon,
        max_iter: a.max_iter,
        seed: a.seed,
        ..FitConfig::default()
    };
    fit_cfg.validate()?;
    let cfg = ExperimentConfig {
        scenario,
        reps: a.reps,
        method: a.method,
        replicates: a.replicates,
        seed: a.seed,
    };
    let result = pvalue_sdf_experiment(&cfg, &fit_cfg)?;
    let summary = to_json(&SimulationSummary::new(&result, a.epsilon, a.max_iter));
    if let Some(dir) = &a.out_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::Validation(format!("cannot create {}: {e}", dir.display())))?;
        write_file(&dir.join("pvalues.csv"), &pvalues_csv(&result))?;
        write_file(&dir.join("summary.json"), &summary)?;
    }
    Ok(summary)
}
