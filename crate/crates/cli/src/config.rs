//! Run configuration: one TOML file, overridable by flags, hashed to
//! version every artifact.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vidpeak_coder::{EndpointConfig, PromptOptions};
use vidpeak_core::ctml::Feature;
use vidpeak_core::eval::{LiftPooling, SplitKind, Variant};
use vidpeak_core::model::TrainConfig;
use vidpeak_core::signals::{Signal, SignalConfig};
use vidpeak_core::synth::{SynthConfig, DEFAULT_PARTS};
use vidpeak_core::tcav::TcavConfig;

use crate::CliError;

fn default_parts() -> Vec<String> {
    DEFAULT_PARTS.iter().map(|s| s.to_string()).collect()
}

/// Input locations. Unset paths default to the files `synth` writes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub events: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub concepts: Option<PathBuf>,
    pub human_ratings: Option<PathBuf>,
    pub machine_ratings: Option<PathBuf>,
    pub coding_requests: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SignalsSection {
    pub ks: Vec<u32>,
    pub trim_seconds: u32,
    pub smoothing_window: usize,
    pub subsample_interval: u32,
    /// Parallel parse shards; output does not depend on it.
    pub shards: usize,
}

impl Default for SignalsSection {
    fn default() -> Self {
        let s = SignalConfig::default();
        Self {
            ks: vec![5, 10, 20],
            trim_seconds: s.trim_seconds,
            smoothing_window: s.smoothing_window,
            subsample_interval: s.subsample_interval,
            shards: 4,
        }
    }
}

impl SignalsSection {
    pub fn signal_config(&self) -> SignalConfig {
        SignalConfig {
            trim_seconds: self.trim_seconds,
            smoothing_window: self.smoothing_window,
            subsample_interval: self.subsample_interval,
        }
    }
}

/// The single model `train` fits and `tcav` explains.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub signal: Signal,
    pub k: u32,
    pub selection: Vec<String>,
    pub variant: String,
    /// Index into `evaluate.seeds` whose split is used.
    pub seed_index: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            signal: Signal::PausedAt,
            k: 10,
            selection: default_parts(),
            variant: Variant::full().name,
            seed_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub signals: Vec<Signal>,
    pub ks: Vec<u32>,
    pub selections: Vec<Vec<String>>,
    /// Variant names out of `reference+sharing`, `no_sharing`, `no_reference`.
    pub variants: Vec<String>,
    pub split: SplitKind,
    pub seeds: Vec<u64>,
    pub pooling: LiftPooling,
    pub dump_scores: bool,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            signals: Signal::ALL.to_vec(),
            ks: vec![5, 10],
            selections: vec![default_parts()],
            variants: vec![Variant::full().name],
            split: SplitKind::default(),
            seeds: vec![0, 1, 2],
            pooling: LiftPooling::Pooled,
            dump_scores: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TcavSection {
    pub features: Vec<Feature>,
    /// Input part names, or `h1` for the first hidden layer. Empty means
    /// every part of the trained selection.
    pub layers: Vec<String>,
    pub repetitions: usize,
    pub l2_grid: Vec<f64>,
    pub alpha: f64,
    pub bonferroni_m: usize,
    pub positive_threshold: f64,
}

impl Default for TcavSection {
    fn default() -> Self {
        let c = TcavConfig::default();
        Self {
            features: Feature::ALL.to_vec(),
            layers: Vec::new(),
            repetitions: c.repetitions,
            l2_grid: c.l2_grid,
            alpha: c.alpha,
            bonferroni_m: c.bonferroni_m,
            positive_threshold: c.positive_threshold,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoderSection {
    pub endpoint: EndpointConfig,
    pub prompt: PromptOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    /// Where `synth` writes the corpus.
    pub dir: PathBuf,
    pub corpus: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("corpus"),
            corpus: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root seed; every random stream is derived from it.
    pub seed: u64,
    /// Artifacts go to `out_dir/<config hash>/`.
    pub out_dir: PathBuf,
    pub paths: Paths,
    pub signals: SignalsSection,
    pub model: TrainConfig,
    pub train: TrainSection,
    pub evaluate: EvaluateSection,
    pub tcav: TcavSection,
    pub coder: CoderSection,
    pub synth: SynthSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            paths: Paths::default(),
            signals: SignalsSection::default(),
            model: TrainConfig::default(),
            train: TrainSection::default(),
            evaluate: EvaluateSection::default(),
            tcav: TcavSection::default(),
            coder: CoderSection::default(),
            synth: SynthSection::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        for &k in self.signals.ks.iter().chain(&self.evaluate.ks).chain([&self.train.k]) {
            if ![5, 10, 20].contains(&k) {
                return bad(format!("K must be one of 5, 10, 20 (got {k})"));
            }
        }
        for k in self.evaluate.ks.iter().chain([&self.train.k]) {
            if !self.signals.ks.contains(k) {
                return bad(format!("K = {k} is not labeled; add it to signals.ks"));
            }
        }
        if self.evaluate.seeds.is_empty() {
            return bad("evaluate.seeds is empty".into());
        }
        if self.train.seed_index >= self.evaluate.seeds.len() {
            return bad(format!("train.seed_index {} is out of range", self.train.seed_index));
        }
        if self.evaluate.selections.iter().any(Vec::is_empty) || self.train.selection.is_empty() {
            return bad("embedding selections must name at least one part".into());
        }
        for v in self.evaluate.variants.iter().chain([&self.train.variant]) {
            variant(v)?;
        }
        if let SplitKind::CourseGrouped { test_fraction } = self.evaluate.split {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return bad(format!("split test_fraction {test_fraction} must lie in (0, 1)"));
            }
        }
        if self.signals.subsample_interval == 0 || self.signals.smoothing_window == 0 {
            return bad("subsample_interval and smoothing_window must be positive".into());
        }
        if self.tcav.repetitions < 2 {
            return bad("tcav.repetitions must be at least 2".into());
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.coder.endpoint.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.synth.corpus.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    /// SHA-256 over the canonical JSON of everything but `out_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))[..16].to_string()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(self.hash())
    }

    fn corpus(&self, file: &str) -> PathBuf {
        self.synth.dir.join(file)
    }

    pub fn events_path(&self) -> PathBuf {
        self.paths.events.clone().unwrap_or_else(|| self.corpus("events.jsonl"))
    }

    pub fn metadata_path(&self) -> PathBuf {
        self.paths.metadata.clone().unwrap_or_else(|| self.corpus("videos.jsonl"))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths
            .manifest
            .clone()
            .unwrap_or_else(|| self.synth.dir.join("embeddings").join("manifest.json"))
    }

    pub fn concepts_path(&self) -> PathBuf {
        self.paths.concepts.clone().unwrap_or_else(|| self.corpus("concepts.jsonl"))
    }

    pub fn human_ratings_path(&self) -> PathBuf {
        self.paths.human_ratings.clone().unwrap_or_else(|| self.corpus("human_ratings.jsonl"))
    }

    /// Corpus config with the root seed applied.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.corpus.clone()
        }
    }

    pub fn tcav_config(&self) -> TcavConfig {
        TcavConfig {
            repetitions: self.tcav.repetitions,
            l2_grid: self.tcav.l2_grid.clone(),
            alpha: self.tcav.alpha,
            bonferroni_m: self.tcav.bonferroni_m,
            positive_threshold: self.tcav.positive_threshold,
            seed: vidpeak_core::rng::derive_seed(self.seed, "tcav", &[]),
        }
    }

    /// Experiment seeds derived from the root seed.
    pub fn experiment_seeds(&self) -> Vec<u64> {
        self.evaluate
            .seeds
            .iter()
            .map(|&s| vidpeak_core::rng::derive_seed(self.seed, "experiment", &[s]))
            .collect()
    }
}

pub fn variant(name: &str) -> Result<Variant, CliError> {
    Variant::ablation_grid()
        .into_iter()
        .find(|v| v.name == name)
        .ok_or_else(|| CliError::Config(format!("unknown variant {name:?}")))
}
