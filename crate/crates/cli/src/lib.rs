//! The `vidpeak` command line: one subcommand per pipeline stage, a single
//! TOML config with flag overrides, and artifacts versioned by config hash.

pub mod artifacts;
pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use thiserror::Error;
use vidpeak_core::signals::Signal;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

macro_rules! data_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Data(e.to_string())
            }
        }
    )*};
}

data_error!(
    vidpeak_core::events::EventsError,
    vidpeak_core::signals::SignalError,
    vidpeak_core::embedstore::EmbedError,
    vidpeak_core::ctml::CtmlError,
    vidpeak_core::model::CheckpointError,
    serde_json::Error,
    csv::Error
);

impl From<vidpeak_core::model::ModelError> for CliError {
    fn from(e: vidpeak_core::model::ModelError) -> Self {
        match e {
            vidpeak_core::model::ModelError::NumericalFailure { .. } => CliError::Numeric(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<vidpeak_core::eval::EvalError> for CliError {
    fn from(e: vidpeak_core::eval::EvalError) -> Self {
        match e {
            vidpeak_core::eval::EvalError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<vidpeak_core::tcav::TcavError> for CliError {
    fn from(e: vidpeak_core::tcav::TcavError) -> Self {
        match e {
            vidpeak_core::tcav::TcavError::Model(m) => m.into(),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<vidpeak_core::synth::SynthError> for CliError {
    fn from(e: vidpeak_core::synth::SynthError) -> Self {
        match e {
            vidpeak_core::synth::SynthError::Config(m) => CliError::Config(m),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<vidpeak_coder::CoderError> for CliError {
    fn from(e: vidpeak_coder::CoderError) -> Self {
        match e {
            vidpeak_coder::CoderError::MissingToken(_) | vidpeak_coder::CoderError::Config(_) => {
                CliError::Config(e.to_string())
            }
            _ => CliError::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "vidpeak", version, about = "Interaction-peak prediction and concept explanations for lecture videos")]
pub struct Cli {
    /// TOML run configuration; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Worker threads for internal parallelism.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true)]
    pub events: Option<PathBuf>,
    #[arg(long, global = true)]
    pub metadata: Option<PathBuf>,
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    #[arg(long, global = true)]
    pub concepts: Option<PathBuf>,
    #[arg(long, global = true)]
    pub human_ratings: Option<PathBuf>,
    #[arg(long, global = true)]
    pub machine_ratings: Option<PathBuf>,
    #[arg(long, global = true)]
    pub coding_requests: Option<PathBuf>,
    /// Directory `synth` writes to and default inputs are read from.
    #[arg(long, global = true)]
    pub synth_dir: Option<PathBuf>,
    /// Signals to evaluate, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub signals: Option<Vec<Signal>>,
    /// K values to evaluate, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub ks: Option<Vec<u32>>,
    /// Embedding parts for train and evaluate, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub selection: Option<Vec<String>>,
    /// Experiment seeds, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    pub trim_seconds: Option<u32>,
    #[arg(long, global = true)]
    pub subsample_interval: Option<u32>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Parse and validate the event log; merge duplicate videos.
    Ingest,
    /// Per-second signals, ranks, labels and feature associations.
    Signals,
    /// Train the configured model on one split.
    Train,
    /// Multi-seed evaluation over signals, K, selections and variants.
    Evaluate,
    /// Concept sensitivity of the trained model.
    Tcav,
    /// Machine rubric coding through a chat endpoint.
    Code,
    /// Inter-rater agreement.
    Agreement,
    /// Write a synthetic corpus with planted ground truth.
    Synth,
    /// Merge metric, concept and association tables.
    Report,
}

impl Cli {
    /// The config file with flags applied.
    pub fn effective_config(&self) -> Result<RunConfig, CliError> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(d) = &self.out_dir {
            c.out_dir = d.clone();
        }
        let p = &mut c.paths;
        for (flag, slot) in [
            (&self.events, &mut p.events),
            (&self.metadata, &mut p.metadata),
            (&self.manifest, &mut p.manifest),
            (&self.concepts, &mut p.concepts),
            (&self.human_ratings, &mut p.human_ratings),
            (&self.machine_ratings, &mut p.machine_ratings),
            (&self.coding_requests, &mut p.coding_requests),
        ] {
            if let Some(v) = flag {
                *slot = Some(v.clone());
            }
        }
        if let Some(d) = &self.synth_dir {
            c.synth.dir = d.clone();
        }
        if let Some(s) = &self.signals {
            c.evaluate.signals = s.clone();
        }
        if let Some(k) = &self.ks {
            c.evaluate.ks = k.clone();
        }
        if let Some(s) = &self.selection {
            c.evaluate.selections = vec![s.clone()];
            c.train.selection = s.clone();
        }
        if let Some(s) = &self.seeds {
            c.evaluate.seeds = s.clone();
        }
        if let Some(t) = self.trim_seconds {
            c.signals.trim_seconds = t;
        }
        if let Some(i) = self.subsample_interval {
            c.signals.subsample_interval = i;
        }
        c.validate()?;
        Ok(c)
    }
}

/// Runs one parsed invocation.
pub fn run(cli: &Cli) -> Result<(), CliError> {
    let config = cli.effective_config()?;
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        // Fails only if a pool already exists, e.g. when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let ctx = commands::Context::new(config)?;
    match cli.command {
        Command::Ingest => commands::ingest(&ctx),
        Command::Signals => commands::signals(&ctx),
        Command::Train => commands::train(&ctx),
        Command::Evaluate => commands::evaluate(&ctx),
        Command::Tcav => commands::tcav(&ctx),
        Command::Code => commands::code(&ctx),
        Command::Agreement => commands::agreement(&ctx),
        Command::Synth => commands::synth(&ctx),
        Command::Report => commands::report(&ctx),
    }
}
