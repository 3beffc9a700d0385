//! Experiment configuration: a TOML file with one table per concern.
//!
//! ```toml
//! [dataset]
//! kind = "blobs"
//! n = 1000
//!
//! [train]
//! rounds = 10
//!
//! [experiment]
//! strategies = ["aqpl", "random"]
//! seeds = [0, 1, 2]
//! ```
//!
//! Every key is optional except where a dataset kind needs paths.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use aqpl_core::dataset::{BlobsSpec, MarginProfile};
use aqpl_core::model::Architecture;
use aqpl_core::oracle::{DEFAULT_ORACLE_SAMPLES, DEFAULT_TAU};
use aqpl_core::perturb::{Ladder, NoiseFamily};
use aqpl_core::select::Strategy;
use aqpl_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const OUTPUT_DIR_ENV: &str = "AQPL_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{what} not found: {path}")]
    MissingPath { what: &'static str, path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    #[default]
    Blobs,
    Idx,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MarginKind {
    #[default]
    Uniform,
    Symmetric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    // blobs
    pub n: usize,
    pub test_n: usize,
    pub classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub margin: MarginKind,
    pub margin_min: f64,
    pub margin_max: f64,
    // idx
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub train_limit: usize,
    pub test_limit: usize,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Blobs,
            n: 1000,
            test_n: 3000,
            classes: 2,
            dim: 50,
            spread: 3.0,
            margin: MarginKind::Uniform,
            margin_min: 0.0,
            margin_max: 2.5,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
            train_limit: 5000,
            test_limit: 1000,
        }
    }
}

impl DatasetSection {
    pub fn blobs(&self, n: usize) -> BlobsSpec {
        let (min, max) = (self.margin_min, self.margin_max);
        BlobsSpec {
            n,
            classes: self.classes,
            dim: self.dim,
            spread: self.spread,
            margin: match self.margin {
                MarginKind::Uniform => MarginProfile::Uniform { min, max },
                MarginKind::Symmetric => MarginProfile::Symmetric { min, max },
            },
        }
    }

    fn idx_paths(&self) -> [(&'static str, &Option<PathBuf>); 4] {
        [
            ("train_images", &self.train_images),
            ("train_labels", &self.train_labels),
            ("test_images", &self.test_images),
            ("test_labels", &self.test_labels),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    #[default]
    Linear,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub arch: ArchKind,
    pub hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: ArchKind::Linear,
            hidden: 32,
        }
    }
}

impl ModelSection {
    pub fn architecture(&self) -> Architecture {
        match self.arch {
            ArchKind::Linear => Architecture::Linear,
            ArchKind::Mlp => Architecture::Mlp { hidden: self.hidden },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub pretrain_epochs: usize,
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub perturbed_fraction: f64,
    /// Monte-Carlo samples per example for the entropy estimate (M).
    pub samples: usize,
    /// Examples queried per side each round (B).
    pub batch_queries: usize,
    pub rounds: u32,
    pub sigma_init: f64,
    /// Level of the fixed-level pretraining; defaults to `sigma_init`.
    pub gnt_sigma: Option<f64>,
    pub family: NoiseFamily,
    pub retrain_from_scratch: bool,
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            pretrain_epochs: t.pretrain_epochs,
            epochs_per_round: t.epochs_per_round,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            perturbed_fraction: t.perturbed_fraction,
            samples: t.samples,
            batch_queries: t.batch_queries,
            rounds: t.rounds,
            sigma_init: t.sigma_init,
            gnt_sigma: None,
            family: t.family,
            retrain_from_scratch: t.retrain_from_scratch,
            stop_at_accuracy: t.stop_at_accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKindSetting {
    /// Closed form for two-class blobs, bisection against the generating
    /// rule otherwise, and a clean reference model for IDX data.
    #[default]
    Auto,
    Analytic,
    Concept,
    ReferenceModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub kind: OracleKindSetting,
    pub tau: f64,
    /// Monte-Carlo samples per bisection probe.
    pub samples: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub alpha: f64,
    /// Epochs of clean training for the reference-model oracle.
    pub reference_epochs: usize,
    pub reference_hidden: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            kind: OracleKindSetting::Auto,
            tau: DEFAULT_TAU,
            samples: DEFAULT_ORACLE_SAMPLES,
            sigma_min: 0.0,
            sigma_max: 0.9,
            alpha: 0.01,
            reference_epochs: 30,
            reference_hidden: 64,
        }
    }
}

impl OracleSection {
    pub fn ladder(&self) -> Result<Ladder, ConfigError> {
        Ladder::new(self.sigma_min, self.sigma_max, self.alpha)
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HumanSection {
    pub serve_addr: String,
    pub timeout_secs: u64,
    /// Answer unanswered tasks with the simulated oracle instead of failing.
    pub fallback_to_simulated: bool,
}

impl Default for HumanSection {
    fn default() -> Self {
        Self {
            serve_addr: "127.0.0.1:8080".into(),
            timeout_secs: 600,
            fallback_to_simulated: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub strategies: Vec<String>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub severities: Vec<f64>,
    pub corruption_family: NoiseFamily,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            strategies: vec!["aqpl".into()],
            seeds: vec![0],
            output_dir: PathBuf::from("aqpl-out"),
            severities: vec![0.1, 0.23, 0.4],
            corruption_family: NoiseFamily::Gaussian,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub oracle: OracleSection,
    pub human: HumanSection,
    pub experiment: ExperimentSection,
}

/// Values given on the command line; they win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub seeds: Option<Vec<u64>>,
    pub strategies: Option<Vec<String>>,
    pub rounds: Option<u32>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Reads, applies the environment and command-line overrides (in that
    /// order), and validates.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::from_toml(&text, path)?;
        cfg.resolve_relative_paths(path.parent().unwrap_or(Path::new(".")));
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            cfg.experiment.output_dir = PathBuf::from(dir);
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_relative_paths(&mut self, base: &Path) {
        let d = &mut self.dataset;
        for p in [
            &mut d.train_images,
            &mut d.train_labels,
            &mut d.test_images,
            &mut d.test_labels,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(dir) = &o.output_dir {
            self.experiment.output_dir = dir.clone();
        }
        if let Some(seeds) = &o.seeds {
            self.experiment.seeds = seeds.clone();
        }
        if let Some(s) = &o.strategies {
            self.experiment.strategies = s.clone();
        }
        if let Some(r) = o.rounds {
            self.train.rounds = r;
        }
    }

    pub fn strategies(&self) -> Result<Vec<Strategy>, ConfigError> {
        self.experiment
            .strategies
            .iter()
            .map(|s| Strategy::from_str(s).map_err(|e| ConfigError::Invalid(e.to_string())))
            .collect()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            arch: self.model.architecture(),
            pretrain_epochs: t.pretrain_epochs,
            epochs_per_round: t.epochs_per_round,
            batch_size: t.batch_size,
            lr: t.lr,
            momentum: t.momentum,
            perturbed_fraction: t.perturbed_fraction,
            samples: t.samples,
            batch_queries: t.batch_queries,
            rounds: t.rounds,
            seed,
            sigma_init: t.sigma_init,
            gnt_sigma: t.gnt_sigma.unwrap_or(t.sigma_init),
            family: t.family,
            retrain_from_scratch: t.retrain_from_scratch,
            stop_at_accuracy: t.stop_at_accuracy,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if self.experiment.seeds.is_empty() {
            return invalid("experiment.seeds must not be empty".into());
        }
        if self.experiment.strategies.is_empty() {
            return invalid("experiment.strategies must not be empty".into());
        }
        self.strategies()?;
        if self.experiment.severities.is_empty()
            || self.experiment.severities.iter().any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return invalid("experiment.severities must be non-empty and non-negative".into());
        }
        self.oracle.ladder()?;
        if !(self.oracle.tau > 0.0 && self.oracle.tau < 1.0) {
            return invalid(format!("oracle.tau {} outside (0, 1)", self.oracle.tau));
        }
        self.train_config(0)
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        match self.dataset.kind {
            DatasetKind::Blobs => {
                let d = &self.dataset;
                if d.classes < 2 || d.dim < 2 || d.n < d.classes || d.test_n < d.classes {
                    return invalid(format!(
                        "blobs need n, test_n >= classes >= 2 and dim >= 2 (n={}, test_n={}, classes={}, dim={})",
                        d.n, d.test_n, d.classes, d.dim
                    ));
                }
                if self.oracle.kind == OracleKindSetting::Analytic && d.classes != 2 {
                    return invalid("the analytic oracle needs a two-class task".into());
                }
                if self.oracle.kind == OracleKindSetting::ReferenceModel {
                    return invalid("the reference-model oracle is for IDX data".into());
                }
            }
            DatasetKind::Idx => {
                for (what, path) in self.dataset.idx_paths() {
                    let Some(path) = path else {
                        return invalid(format!("dataset.{what} is required for kind = \"idx\""));
                    };
                    if !path.is_file() {
                        return Err(ConfigError::MissingPath {
                            what,
                            path: path.clone(),
                        });
                    }
                }
                if matches!(self.oracle.kind, OracleKindSetting::Analytic | OracleKindSetting::Concept) {
                    return invalid("IDX data has no known concept; use the reference-model oracle".into());
                }
            }
        }
        Ok(())
    }
}
