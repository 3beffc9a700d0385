//! Experiment orchestration: data, pretraining, query rounds, artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use aqpl_annotate::{HumanOracle, HumanOracleConfig, TaskStore, TimeoutPolicy};
use aqpl_core::dataset::{load_idx_images, save_state, Checkpoint, DatasetError};
use aqpl_core::model::Predictor;
use aqpl_core::numerics::{mean_std, stream, Rng};
use aqpl_core::oracle::{OracleError, OracleKind, OracleSpec, PerturbationOracle, SimulatedOracle};
use aqpl_core::perturb::{corrupt_eval_set, PerturbError};
use aqpl_core::select::{QueryRecord, Strategy};
use aqpl_core::trainer::{
    metrics_csv, run_aqpl, train_noise_fixed, RoundMetrics, RoundSnapshot, TrainConfig, TrainError,
};
use aqpl_core::{gen_blobs, init_triplets, Architecture, Classifier, CorruptedEvalSet, Dataset};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, DatasetKind, ExperimentConfig, OracleKindSetting};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error("{context}: {source}")]
    Train {
        context: String,
        #[source]
        source: TrainError,
    },
    #[error("oracle setup: {0}")]
    Oracle(#[from] OracleError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RunError {
    /// 2 for configuration and I/O problems, 1 for failures during a run.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Data(_) | RunError::Oracle(_) | RunError::Io { .. } => 2,
            RunError::Perturb(_) | RunError::Train { .. } => 1,
        }
    }
}

/// Train/test data and the ground truth for one seed.
pub struct Prepared {
    pub seed: u64,
    pub train: Dataset,
    pub test: Dataset,
    pub corrupted: CorruptedEvalSet,
    pub oracle: OracleSpec,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<(), RunError> {
    fs::write(path, contents).map_err(|source| RunError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads IDX data once; blobs are generated per seed.
pub fn load_shared_data(cfg: &ExperimentConfig) -> Result<Option<(Dataset, Dataset)>, RunError> {
    if cfg.dataset.kind != DatasetKind::Idx {
        return Ok(None);
    }
    let d = &cfg.dataset;
    let path = |p: &Option<PathBuf>| p.clone().unwrap_or_default();
    let train = load_idx_images(&path(&d.train_images), &path(&d.train_labels), d.train_limit)?;
    let test = load_idx_images(&path(&d.test_images), &path(&d.test_labels), d.test_limit)?;
    Ok(Some((train, test)))
}

pub fn prepare(
    cfg: &ExperimentConfig,
    seed: u64,
    shared: Option<&(Dataset, Dataset)>,
) -> Result<Prepared, RunError> {
    let (train, test) = match shared {
        Some((train, test)) => (train.clone(), test.clone()),
        None => {
            let d = &cfg.dataset;
            let train = gen_blobs(&mut Rng::substream(seed, &[stream::DATA, 0]), &d.blobs(d.n))?;
            let test = gen_blobs(&mut Rng::substream(seed, &[stream::DATA, 1]), &d.blobs(d.test_n))?;
            (train, test)
        }
    };
    let corrupted = corrupt_eval_set(
        &test,
        cfg.experiment.corruption_family,
        &cfg.experiment.severities,
        seed,
    )?;
    let kind = oracle_kind(cfg, seed, &train)?;
    let oracle = OracleSpec {
        kind,
        tau: cfg.oracle.tau,
        samples: cfg.oracle.samples,
        ladder: cfg.oracle.ladder()?,
        family: cfg.train.family,
        clip: train.is_image(),
        seed,
    };
    oracle.validate()?;
    Ok(Prepared {
        seed,
        train,
        test,
        corrupted,
        oracle,
    })
}

fn oracle_kind(cfg: &ExperimentConfig, seed: u64, train: &Dataset) -> Result<OracleKind, RunError> {
    let setting = cfg.oracle.kind;
    match cfg.dataset.kind {
        DatasetKind::Blobs => {
            let concept = cfg.dataset.blobs(cfg.dataset.n).concept();
            let analytic = match setting {
                OracleKindSetting::Analytic => true,
                OracleKindSetting::Auto => {
                    cfg.dataset.classes == 2 && cfg.train.family == aqpl_core::NoiseFamily::Gaussian
                }
                _ => false,
            };
            if analytic {
                let (w, b) = concept
                    .linear()
                    .ok_or_else(|| ConfigError::Invalid("the analytic oracle needs a two-class task".into()))?;
                Ok(OracleKind::AnalyticLinear { w, b })
            } else {
                Ok(OracleKind::Concept(Arc::new(concept)))
            }
        }
        DatasetKind::Idx => {
            // A clean model stands in for the human: its confidence under
            // noise defines the tolerable level.
            let reference_cfg = TrainConfig {
                arch: Architecture::Mlp {
                    hidden: cfg.oracle.reference_hidden,
                },
                pretrain_epochs: cfg.oracle.reference_epochs,
                perturbed_fraction: 0.0,
                seed: seed ^ 0x5245_4645_5245_4e43,
                ..cfg.train_config(seed)
            };
            let reference = train_noise_fixed(train, 0.0, &reference_cfg).map_err(|source| RunError::Train {
                context: format!("seed {seed}: reference model"),
                source,
            })?;
            Ok(OracleKind::Concept(Arc::new(reference) as Arc<dyn Predictor>))
        }
    }
}

pub fn pretrain(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Classifier, RunError> {
    let tc = cfg.train_config(prepared.seed);
    train_noise_fixed(&prepared.train, tc.gnt_sigma, &tc).map_err(|source| RunError::Train {
        context: format!("seed {}: pretraining", prepared.seed),
        source,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JobPaths {
    pub metrics: PathBuf,
    pub queries: PathBuf,
    pub checkpoint: PathBuf,
}

impl JobPaths {
    pub fn new(dir: &Path, strategy: Strategy, seed: u64) -> Self {
        let stem = format!("{}_seed{seed}", strategy.name());
        Self {
            metrics: dir.join(format!("metrics_{stem}.csv")),
            queries: dir.join(format!("queries_{stem}.csv")),
            checkpoint: dir.join(format!("checkpoint_{stem}.json")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct JobResult {
    pub strategy: Strategy,
    pub seed: u64,
    pub metrics: Vec<RoundMetrics>,
    pub query_log: Vec<QueryRecord>,
}

pub fn queries_csv(log: &[QueryRecord]) -> String {
    let mut out = String::from(QueryRecord::CSV_HEADER);
    out.push('\n');
    for r in log {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// Settings for answering queries through the annotation service.
#[derive(Clone)]
pub struct HumanMode {
    pub store: Arc<TaskStore>,
    pub timeout: Duration,
    pub fallback: bool,
}

/// One (strategy, seed) run from a shared pretrained model. A checkpoint
/// is written atomically after every round.
pub fn run_job(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    pretrained: &Classifier,
    strategy: Strategy,
    out_dir: &Path,
    human: Option<&HumanMode>,
) -> Result<JobResult, RunError> {
    let tc = cfg.train_config(prepared.seed);
    let paths = JobPaths::new(out_dir, strategy, prepared.seed);
    let mut triplets = init_triplets(&prepared.train, tc.sigma_init)?;
    let include_features = !prepared.train.is_image();

    let mut simulated = SimulatedOracle::new(prepared.oracle.clone())?;
    let mut human_oracle = human.map(|h| {
        let on_timeout = if h.fallback {
            TimeoutPolicy::Simulate(simulated.clone())
        } else {
            TimeoutPolicy::Fail
        };
        HumanOracle::new(
            Arc::clone(&h.store),
            HumanOracleConfig {
                ladder: prepared.oracle.ladder.clone(),
                family: tc.family,
                image_shape: prepared.train.image_shape(),
                seed: prepared.seed,
                timeout: h.timeout,
                on_timeout,
                task_prefix: format!("{}-s{}-", strategy.name(), prepared.seed),
            },
        )
    });
    let oracle: &mut dyn PerturbationOracle = match human_oracle.as_mut() {
        Some(h) => h,
        None => &mut simulated,
    };

    let checkpoint_path = paths.checkpoint.clone();
    let mut observer = |snap: &RoundSnapshot<'_>| -> Result<(), TrainError> {
        let cp = Checkpoint::capture(
            snap.round,
            snap.triplets,
            snap.classifier,
            snap.query_log,
            include_features,
        );
        save_state(&checkpoint_path, &cp).map_err(|e| TrainError::Observer(e.to_string()))?;
        log::info!(
            "{} seed {} round {}: clean {:.4}, corrupted {:.4}, mean sigma {:.4}",
            strategy.name(),
            prepared.seed,
            snap.round,
            snap.metrics.clean_accuracy,
            snap.metrics.corrupted_mean,
            snap.metrics.mean_sigma
        );
        Ok(())
    };
    let outcome = run_aqpl(
        &mut triplets,
        pretrained.clone(),
        oracle,
        strategy,
        &tc,
        &prepared.test,
        &prepared.corrupted,
        &mut observer,
    )
    .map_err(|source| RunError::Train {
        context: format!("{} seed {}", strategy.name(), prepared.seed),
        source,
    })?;

    write_file(
        &paths.metrics,
        metrics_csv(&cfg.experiment.severities, &outcome.metrics).as_bytes(),
    )?;
    write_file(&paths.queries, queries_csv(&outcome.query_log).as_bytes())?;
    Ok(JobResult {
        strategy,
        seed: prepared.seed,
        metrics: outcome.metrics,
        query_log: outcome.query_log,
    })
}

/// Runs every (strategy, seed) pair. Strategies for one seed share the data
/// and the pretrained model, so comparisons are paired.
pub fn run_all(
    cfg: &ExperimentConfig,
    strategies: &[Strategy],
    human: Option<&HumanMode>,
) -> Result<Vec<JobResult>, RunError> {
    let shared = load_shared_data(cfg)?;
    let out_dir = &cfg.experiment.output_dir;
    fs::create_dir_all(out_dir).map_err(|source| RunError::Io {
        path: out_dir.clone(),
        source,
    })?;

    let per_seed = |seed: u64| -> Result<Vec<JobResult>, RunError> {
        let prepared = prepare(cfg, seed, shared.as_ref())?;
        let pretrained = pretrain(cfg, &prepared)?;
        if human.is_some() {
            strategies
                .iter()
                .map(|&s| run_job(cfg, &prepared, &pretrained, s, out_dir, human))
                .collect()
        } else {
            strategies
                .par_iter()
                .map(|&s| run_job(cfg, &prepared, &pretrained, s, out_dir, None))
                .collect()
        }
    };
    let nested: Vec<Vec<JobResult>> = if human.is_some() {
        cfg.experiment.seeds.iter().map(|&s| per_seed(s)).collect::<Result<_, _>>()?
    } else {
        cfg.experiment.seeds.par_iter().map(|&s| per_seed(s)).collect::<Result<_, _>>()?
    };
    // Strategy-major order for stable summaries.
    let mut results: Vec<JobResult> = nested.into_iter().flatten().collect();
    results.sort_by_key(|r| {
        let pos = strategies.iter().position(|&s| s == r.strategy).unwrap_or(usize::MAX);
        let seed_pos = cfg.experiment.seeds.iter().position(|&s| s == r.seed).unwrap_or(usize::MAX);
        (pos, seed_pos)
    });
    Ok(results)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFinal {
    pub seed: u64,
    pub round: u32,
    pub queries: usize,
    pub clean_accuracy: f64,
    pub corrupted_accuracy_mean: f64,
    pub corrupted_accuracy: Vec<f64>,
    pub mean_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeverityStat {
    pub sigma: f64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub clean_accuracy: MeanStd,
    pub corrupted_accuracy_mean: MeanStd,
    pub corrupted_accuracy: Vec<SeverityStat>,
    pub queries: MeanStd,
    pub per_seed: Vec<SeedFinal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub severities: Vec<f64>,
    pub strategies: Vec<StrategySummary>,
}

/// Final-round statistics per strategy, mean ± sample standard deviation
/// over seeds.
pub fn summarize(severities: &[f64], strategies: &[Strategy], results: &[JobResult]) -> Summary {
    let strategies = strategies
        .iter()
        .map(|&s| {
            let per_seed: Vec<SeedFinal> = results
                .iter()
                .filter(|r| r.strategy == s)
                .filter_map(|r| {
                    let last = r.metrics.last()?;
                    Some(SeedFinal {
                        seed: r.seed,
                        round: last.round,
                        queries: last.queries,
                        clean_accuracy: last.clean_accuracy,
                        corrupted_accuracy_mean: last.corrupted_mean,
                        corrupted_accuracy: last.corrupted.iter().map(|c| c.accuracy).collect(),
                        mean_sigma: last.mean_sigma,
                    })
                })
                .collect();
            let col = |f: &dyn Fn(&SeedFinal) -> f64| per_seed.iter().map(f).collect::<Vec<_>>();
            let corrupted_accuracy = severities
                .iter()
                .enumerate()
                .map(|(k, &sigma)| {
                    let m = MeanStd::of(&col(&|p| p.corrupted_accuracy[k]));
                    SeverityStat {
                        sigma,
                        mean: m.mean,
                        std: m.std,
                    }
                })
                .collect();
            StrategySummary {
                strategy: s.name().to_string(),
                seeds: per_seed.iter().map(|p| p.seed).collect(),
                clean_accuracy: MeanStd::of(&col(&|p| p.clean_accuracy)),
                corrupted_accuracy_mean: MeanStd::of(&col(&|p| p.corrupted_accuracy_mean)),
                corrupted_accuracy,
                queries: MeanStd::of(&col(&|p| p.queries as f64)),
                per_seed,
            }
        })
        .collect();
    Summary {
        severities: severities.to_vec(),
        strategies,
    }
}

pub const CURVES_HEADER: &str = "strategy,round,queries,corrupted_acc_mean,corrupted_acc_std";

/// Per-round mean and standard deviation across seeds of the mean
/// corrupted accuracy.
pub fn curves_csv(strategies: &[Strategy], results: &[JobResult]) -> String {
    let mut out = String::from(CURVES_HEADER);
    out.push('\n');
    for &s in strategies {
        let runs: Vec<&JobResult> = results.iter().filter(|r| r.strategy == s).collect();
        let rounds = runs.iter().map(|r| r.metrics.len()).max().unwrap_or(0);
        for k in 0..rounds {
            let rows: Vec<&RoundMetrics> = runs.iter().filter_map(|r| r.metrics.get(k)).collect();
            let acc = MeanStd::of(&rows.iter().map(|m| m.corrupted_mean).collect::<Vec<_>>());
            let queries = rows.iter().map(|m| m.queries).sum::<usize>() as f64 / rows.len() as f64;
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.name(),
                rows[0].round,
                queries,
                acc.mean,
                acc.std
            ));
        }
    }
    out
}

pub fn write_summary(dir: &Path, summary: &Summary) -> Result<PathBuf, RunError> {
    let path = dir.join("summary.json");
    let mut json = serde_json::to_string_pretty(summary).expect("summary serializes");
    json.push('\n');
    write_file(&path, json.as_bytes())?;
    Ok(path)
}

pub fn write_curves(dir: &Path, strategies: &[Strategy], results: &[JobResult]) -> Result<PathBuf, RunError> {
    let path = dir.join("curves.csv");
    write_file(&path, curves_csv(strategies, results).as_bytes())?;
    Ok(path)
}
