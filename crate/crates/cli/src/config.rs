//! Run configuration: a JSON file with the exact keys of [`RunConfig`],
//! overridden field by field by command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use priming_core::attune::{AlphaMode, AlphaSchedule};
use priming_core::pool::DEFAULT_CAP;
use priming_core::synthbench::SynthConfig;
use priming_core::transduct::DEFAULT_K;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown key: {0}")]
    UnknownKey(String),
    #[error("type error: {0}")]
    TypeError(String),
    #[error("missing required setting: {0}")]
    MissingRequired(String),
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn kind(&self) -> &'static str {
        match self {
            ConfigError::UnknownKey(_) => "UnknownKey",
            ConfigError::TypeError(_) => "TypeError",
            ConfigError::MissingRequired(_) => "MissingRequired",
            ConfigError::Syntax(_) => "Syntax",
            ConfigError::Io { .. } => "Io",
        }
    }
}

fn default_cap() -> usize {
    DEFAULT_CAP
}

fn default_k() -> usize {
    DEFAULT_K
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Corpus manifest.
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// Class spec file.
    #[serde(default)]
    pub classes: Option<PathBuf>,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub alpha: AlphaSchedule,
    /// File of record ids (one per line) to drop from the pool.
    #[serde(default)]
    pub exclude: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub out: Option<PathBuf>,

    #[serde(default)]
    pub index: Option<PathBuf>,
    #[serde(default)]
    pub pool: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub test_labels: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    /// Labeled shots per class mixed into the clusters.
    #[serde(default)]
    pub shots: usize,
    #[serde(default)]
    pub head: Option<PathBuf>,
    #[serde(default)]
    pub head_b: Option<PathBuf>,
    /// Phrase file (one per line) for `index-stats`.
    #[serde(default)]
    pub phrases: Option<PathBuf>,
    #[serde(default = "default_true")]
    pub transduct: bool,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

/// Command-line overrides; every flag is optional.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Corpus manifest
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    /// Class spec file
    #[arg(long, global = true)]
    pub classes: Option<PathBuf>,
    /// Per-class pool cap
    #[arg(long, global = true)]
    pub cap: Option<usize>,
    /// Neighbors per test query for transduction
    #[arg(long, global = true)]
    pub k: Option<usize>,
    #[arg(long = "alpha-n0", global = true)]
    pub alpha_n0: Option<f64>,
    #[arg(long = "alpha-p", global = true)]
    pub alpha_p: Option<f64>,
    /// global | per_class
    #[arg(long = "alpha-mode", global = true, value_parser = parse_mode)]
    pub alpha_mode: Option<AlphaMode>,
    /// Fixed alpha in [0, 1], bypassing the schedule
    #[arg(long = "alpha-fixed", global = true)]
    pub alpha_fixed: Option<f64>,
    /// Record ids to exclude from the pool, one per line
    #[arg(long, global = true)]
    pub exclude: Option<PathBuf>,
    #[arg(long, global = true, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seed list
    #[arg(long, global = true, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads (falls back to NP_WORKERS)
    #[arg(long, global = true, env = "NP_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[arg(long, global = true)]
    pub index: Option<PathBuf>,
    #[arg(long, global = true)]
    pub pool: Option<PathBuf>,
    /// Test embedding shard
    #[arg(long, global = true)]
    pub test: Option<PathBuf>,
    #[arg(long = "test-labels", global = true)]
    pub test_labels: Option<PathBuf>,
    /// Labeled training embedding shard for shots
    #[arg(long, global = true)]
    pub train: Option<PathBuf>,
    #[arg(long = "train-labels", global = true)]
    pub train_labels: Option<PathBuf>,
    #[arg(long, global = true)]
    pub shots: Option<usize>,
    #[arg(long, global = true)]
    pub head: Option<PathBuf>,
    #[arg(long = "head-b", global = true)]
    pub head_b: Option<PathBuf>,
    #[arg(long, global = true)]
    pub phrases: Option<PathBuf>,
    /// Skip the transductive stage of `run`
    #[arg(long = "no-transduct", global = true)]
    pub no_transduct: bool,
}

fn parse_mode(s: &str) -> Result<AlphaMode, String> {
    match s {
        "global" => Ok(AlphaMode::Global),
        "per_class" | "per-class" => Ok(AlphaMode::PerClass),
        other => Err(format!("unknown alpha mode {other:?} (global | per_class)")),
    }
}

fn classify(e: serde_json::Error) -> ConfigError {
    use serde_json::error::Category;
    let msg = e.to_string();
    match e.classify() {
        Category::Data if msg.starts_with("unknown field") => ConfigError::UnknownKey(msg),
        Category::Data if msg.starts_with("missing field") => ConfigError::MissingRequired(msg),
        Category::Data => ConfigError::TypeError(msg),
        _ => ConfigError::Syntax(msg),
    }
}

pub fn parse_config_text(text: &str) -> Result<RunConfig, ConfigError> {
    serde_json::from_str(text).map_err(classify)
}

pub fn read_config_file(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_owned(),
        source,
    })?;
    parse_config_text(&text)
}

impl RunConfig {
    /// Applies flag overrides on top of `self`.
    pub fn apply(&mut self, f: &ConfigFlags) {
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = &f.$field { self.$field = Some(v.clone()); })*
            };
        }
        set!(
            corpus,
            classes,
            exclude,
            workers,
            out,
            index,
            pool,
            test,
            test_labels,
            train,
            train_labels,
            head,
            head_b,
            phrases
        );
        if let Some(v) = f.cap {
            self.cap = v;
        }
        if let Some(v) = f.k {
            self.k = v;
        }
        if let Some(v) = f.shots {
            self.shots = v;
        }
        if let Some(v) = f.alpha_n0 {
            self.alpha.n0 = v;
        }
        if let Some(v) = f.alpha_p {
            self.alpha.p = v;
        }
        if let Some(v) = f.alpha_mode {
            self.alpha.mode = v;
        }
        if let Some(v) = f.alpha_fixed {
            self.alpha.fixed = Some(v);
        }
        if let Some(s) = f.seed {
            self.seeds = vec![s];
        }
        if let Some(s) = &f.seeds {
            self.seeds = s.clone();
        }
        if f.no_transduct {
            self.transduct = false;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.alpha
            .validate()
            .map_err(|e| ConfigError::TypeError(e.to_string()))?;
        if self.k == 0 {
            return Err(ConfigError::TypeError("k must be positive".into()));
        }
        if self.workers == Some(0) {
            return Err(ConfigError::TypeError("workers must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::MissingRequired("seeds".into()));
        }
        if let Some(s) = &self.synth {
            s.validate()
                .map_err(|e| ConfigError::TypeError(e.to_string()))?;
        }
        Ok(())
    }

    /// Hash of the settings that influence results (excludes `out` and `workers`).
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        c.workers = None;
        let text = serde_json::to_string(&c).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

/// Reads the config file (if any), applies flags and validates.
pub fn parse_config(flags: &ConfigFlags) -> Result<RunConfig, ConfigError> {
    let mut cfg = match &flags.config {
        Some(path) => read_config_file(path)?,
        None => RunConfig::default(),
    };
    cfg.apply(flags);
    cfg.validate()?;
    Ok(cfg)
}

macro_rules! require_fn {
    ($($name:ident => $field:ident),* $(,)?) => {
        impl RunConfig {
            $(
                pub fn $name(&self) -> Result<&Path, ConfigError> {
                    self.$field
                        .as_deref()
                        .ok_or_else(|| ConfigError::MissingRequired(stringify!($field).into()))
                }
            )*
        }
    };
}

require_fn! {
    require_corpus => corpus,
    require_classes => classes,
    require_out => out,
    require_pool => pool,
    require_test => test,
    require_test_labels => test_labels,
    require_head => head,
    require_exclude => exclude,
}
