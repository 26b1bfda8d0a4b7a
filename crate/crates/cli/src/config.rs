//! Run configuration: one JSON file, with command-line flags layered on top.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ovhar_core::clients::ClientConfig;
use ovhar_core::decode::Aggregation;
use ovhar_core::eval::CandidateMode;
use ovhar_core::nn::ModelConfig;
use ovhar_core::trainer::TrainConfig;
use ovhar_core::windowing::WindowConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const RUN_DIR_ENV: &str = "OVHAR_RUN_DIR";

/// Files the subcommands read and write. Relative paths resolve against
/// the working directory. Outputs without an explicit path land in
/// `run_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub table: Option<PathBuf>,
    /// Externally produced OVHT table used by `--embedder file`.
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub split: Option<PathBuf>,
    pub synth_spec: Option<PathBuf>,
    pub run_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            manifest: None,
            lexicon: None,
            table: None,
            embeddings: None,
            checkpoint: None,
            split: None,
            synth_spec: None,
            run_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderChoice {
    #[default]
    Test,
    File,
}

/// Architecture overrides on top of the default regressor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub filters: Option<usize>,
    pub kernel: Option<usize>,
    pub pool_size: Option<usize>,
    pub hidden: Option<usize>,
}

impl ModelOverrides {
    pub fn apply(&self, in_channels: usize) -> ModelConfig {
        let base = ModelConfig::new(in_channels);
        ModelConfig {
            filters: self.filters.unwrap_or(base.filters),
            kernel: self.kernel.unwrap_or(base.kernel),
            pool_size: self.pool_size.unwrap_or(base.pool_size),
            hidden: self.hidden.unwrap_or(base.hidden),
            ..base
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    /// Held-out classes in the generated split.
    pub m_test: usize,
}

impl Default for SynthSettings {
    fn default() -> Self {
        Self { m_test: 3 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Clients {
    pub inversion: ClientConfig,
    pub mapping: ClientConfig,
    /// Extra phrases per class for the stub mapper.
    pub aliases: BTreeMap<String, Vec<String>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    /// Drives every random choice of a run. It replaces `train.seed`.
    pub seed: u64,
    pub window: WindowConfig,
    pub train: TrainConfig,
    pub model: ModelOverrides,
    pub embedder: EmbedderChoice,
    pub candidates: CandidateMode,
    pub aggregation: Aggregation,
    /// Fit per-channel z-scores on the training records and apply them
    /// everywhere (stored as `normalization.json` in the run directory).
    pub normalize: bool,
    pub synth: SynthSettings,
    pub clients: Clients,
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_epochs: Option<usize>,
    pub candidates: Option<CandidateMode>,
    pub stride_seconds: Option<f64>,
    pub embedder: Option<EmbedderChoice>,
    pub run_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    /// Precedence, lowest first: file, `OVHAR_RUN_DIR`, flags.
    pub fn resolve(file: Option<&Path>, flags: &Overrides, env_run_dir: Option<PathBuf>) -> Result<Self, CliError> {
        let mut cfg = match file {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(dir) = env_run_dir {
            cfg.paths.run_dir = dir;
        }
        if let Some(dir) = &flags.run_dir {
            cfg.paths.run_dir = dir.clone();
        }
        if let Some(seed) = flags.seed {
            cfg.seed = seed;
        }
        if let Some(n) = flags.max_epochs {
            cfg.train.max_epochs = n;
        }
        if let Some(mode) = flags.candidates {
            cfg.candidates = mode;
        }
        if let Some(s) = flags.stride_seconds {
            cfg.window.stride_seconds = s;
        }
        if let Some(e) = flags.embedder {
            cfg.embedder = e;
        }
        cfg.train.seed = cfg.seed;
        cfg.window
            .validate()
            .map_err(|e| CliError::Usage(format!("window config: {e}")))?;
        cfg.train
            .validate()
            .map_err(|e| CliError::Usage(format!("train config: {e}")))?;
        Ok(cfg)
    }

    pub fn run_path(&self, name: &str) -> PathBuf {
        self.paths.run_dir.join(name)
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.run_path("model.ovhr"))
    }

    pub fn table_path(&self) -> PathBuf {
        self.paths.table.clone().unwrap_or_else(|| self.run_path("table.ovht"))
    }

    /// The configured path for `what`, or a usage error naming the key.
    pub fn require<'a>(&self, value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
        value
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("paths.{key} is not set")))
    }
}
