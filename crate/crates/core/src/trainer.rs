//! Noise-injection training (one level for all examples, or one level per
//! example), the active query loop, and evaluation.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformity::conformity_reports;
use crate::dataset::{CorruptedEvalSet, Dataset, TripletDataset};
use crate::model::{Architecture, Classifier, ModelError, Predictor, Sgd};
use crate::numerics::{stream, Rng};
use crate::oracle::{OracleError, OracleQuery, PerturbationOracle};
use crate::perturb::{perturb_into, NoiseFamily, NoiseSpec};
use crate::select::{QueryRecord, SelectionContext, Strategy};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged in {phase} round {round}, epoch {epoch}: {source}")]
    Diverged {
        phase: &'static str,
        round: u32,
        epoch: usize,
        #[source]
        source: ModelError,
    },
    #[error("model error: {0}")]
    Model(#[from] ModelError),
    #[error("oracle failed in round {round}: {source}")]
    Oracle {
        round: u32,
        #[source]
        source: OracleError,
    },
    #[error("round observer failed: {0}")]
    Observer(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub arch: Architecture,
    /// Epochs of the initial fixed-level (GNT) training.
    pub pretrain_epochs: usize,
    /// Fine-tuning epochs after each query round.
    pub epochs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Share of each mini-batch that receives noise.
    pub perturbed_fraction: f64,
    /// Monte-Carlo samples per example for the conformity estimate.
    pub samples: usize,
    /// Examples per side queried each round.
    pub batch_queries: usize,
    pub rounds: u32,
    pub seed: u64,
    pub sigma_init: f64,
    /// Level used for the fixed-level pretraining.
    pub gnt_sigma: f64,
    pub family: NoiseFamily,
    /// Re-initialize and retrain after every round instead of fine-tuning.
    pub retrain_from_scratch: bool,
    /// Stop once the mean corrupted accuracy reaches this value.
    pub stop_at_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::Linear,
            pretrain_epochs: 20,
            epochs_per_round: 5,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            perturbed_fraction: 0.5,
            samples: 50,
            batch_queries: 10,
            rounds: 10,
            seed: 0,
            sigma_init: 0.23,
            gnt_sigma: 0.23,
            family: NoiseFamily::Gaussian,
            retrain_from_scratch: false,
            stop_at_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(0.0..=1.0).contains(&self.perturbed_fraction) {
            return bad(format!("perturbed_fraction {} outside [0, 1]", self.perturbed_fraction));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.samples == 0 {
            return bad("samples (M) must be at least 1".into());
        }
        if self.batch_queries == 0 {
            return bad("batch_queries (B) must be at least 1".into());
        }
        if !(self.sigma_init >= 0.0) || !(self.gnt_sigma >= 0.0) {
            return bad("perturbation levels must be non-negative".into());
        }
        if let Architecture::Mlp { hidden: 0 } = self.arch {
            return bad("hidden width must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Pretrain,
    FineTune,
}

impl Phase {
    fn key(self) -> u64 {
        match self {
            Phase::Pretrain => 0,
            Phase::FineTune => 1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretraining",
            Phase::FineTune => "fine-tuning",
        }
    }
}

/// Runs `epochs` passes of mini-batch SGD. `example(i)` yields the clean
/// input, label and noise level of example `i`.
///
/// Randomness is keyed so that trajectories depend only on the seed and the
/// levels: batch order comes from `(SHUFFLE, phase, round, epoch)` and the
/// perturbation mask and noise of example `i` from
/// `(TRAIN_NOISE, phase, round, epoch, i)`.
#[allow(clippy::too_many_arguments)]
fn fit<'a, F>(
    clf: &mut Classifier,
    n: usize,
    example: F,
    cfg: &TrainConfig,
    clip: bool,
    phase: Phase,
    round: u32,
    epochs: usize,
) -> Result<(), TrainError>
where
    F: Fn(usize) -> (&'a [f64], usize, f64),
{
    let mut opt = Sgd::new(cfg.lr, cfg.momentum, clf.params.len())?;
    let mut order: Vec<usize> = (0..n).collect();
    let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..epochs {
        let keys = [stream::SHUFFLE, phase.key(), u64::from(round), epoch as u64];
        order.sort_unstable();
        Rng::substream(cfg.seed, &keys).shuffle(&mut order);

        for chunk in order.chunks(cfg.batch_size) {
            inputs.clear();
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (x, y, sigma) = example(i);
                let mut rng = Rng::substream(
                    cfg.seed,
                    &[stream::TRAIN_NOISE, phase.key(), u64::from(round), epoch as u64, i as u64],
                );
                let perturbed = rng.uniform() < cfg.perturbed_fraction;
                let mut buf = Vec::with_capacity(x.len());
                if perturbed {
                    perturb_into(x, NoiseSpec { family: cfg.family, sigma }, &mut rng, clip, &mut buf);
                } else {
                    buf.extend_from_slice(x);
                }
                inputs.push(buf);
                labels.push(y);
            }
            let batch: Vec<(&[f64], usize)> =
                inputs.iter().map(Vec::as_slice).zip(labels.iter().copied()).collect();
            let diverged = |source| TrainError::Diverged {
                phase: phase.name(),
                round,
                epoch,
                source,
            };
            let (loss, grad) = clf.loss_and_grad(&batch)?;
            if !loss.is_finite() {
                return Err(diverged(ModelError::NonFiniteGradient));
            }
            opt.step(clf, &grad).map_err(diverged)?;
        }
    }
    Ok(())
}

fn fresh_classifier(cfg: &TrainConfig, dim: usize, classes: usize) -> Classifier {
    Classifier::init(cfg.arch, dim, classes, cfg.seed)
}

/// Clean training: no example is perturbed.
pub fn train_clean(data: &Dataset, cfg: &TrainConfig) -> Result<Classifier, TrainError> {
    let cfg = TrainConfig {
        perturbed_fraction: 0.0,
        ..cfg.clone()
    };
    train_noise_fixed(data, 0.0, &cfg)
}

/// Fixed-level noise training from a fresh initialization, for
/// `pretrain_epochs` epochs. With the default fraction this is the GNT
/// baseline.
pub fn train_noise_fixed(data: &Dataset, sigma: f64, cfg: &TrainConfig) -> Result<Classifier, TrainError> {
    cfg.validate()?;
    let mut clf = fresh_classifier(cfg, data.dim(), data.num_classes());
    fine_tune_fixed(&mut clf, data, sigma, cfg, Phase::Pretrain.key() as u32, cfg.pretrain_epochs, true)?;
    Ok(clf)
}

/// Instance-wise noise training from a fresh initialization.
pub fn train_noise_instancewise(triplets: &TripletDataset, cfg: &TrainConfig) -> Result<Classifier, TrainError> {
    cfg.validate()?;
    let mut clf = fresh_classifier(cfg, triplets.dim, triplets.num_classes);
    fit_triplets(&mut clf, triplets, cfg, Phase::Pretrain, 0, cfg.pretrain_epochs)?;
    Ok(clf)
}

fn fine_tune_fixed(
    clf: &mut Classifier,
    data: &Dataset,
    sigma: f64,
    cfg: &TrainConfig,
    round: u32,
    epochs: usize,
    pretrain: bool,
) -> Result<(), TrainError> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(TrainError::Config(format!("noise level {sigma}")));
    }
    let phase = if pretrain { Phase::Pretrain } else { Phase::FineTune };
    let round = if pretrain { 0 } else { round };
    fit(
        clf,
        data.len(),
        |i| (data.instance(i), data.label(i), sigma),
        cfg,
        data.is_image(),
        phase,
        round,
        epochs,
    )
}

fn fit_triplets(
    clf: &mut Classifier,
    triplets: &TripletDataset,
    cfg: &TrainConfig,
    phase: Phase,
    round: u32,
    epochs: usize,
) -> Result<(), TrainError> {
    fit(
        clf,
        triplets.len(),
        |i| {
            let t = &triplets.triplets[i];
            (t.x.as_slice(), t.y, t.sigma)
        },
        cfg,
        triplets.is_image(),
        phase,
        round,
        epochs,
    )
}

/// One round of continued training at a single level for every example.
pub fn fine_tune_noise_fixed(
    clf: &mut Classifier,
    data: &Dataset,
    sigma: f64,
    cfg: &TrainConfig,
    round: u32,
) -> Result<(), TrainError> {
    fine_tune_fixed(clf, data, sigma, cfg, round, cfg.epochs_per_round, false)
}

/// One round of continued training with each example at its own level.
pub fn fine_tune_instancewise(
    clf: &mut Classifier,
    triplets: &TripletDataset,
    cfg: &TrainConfig,
    round: u32,
) -> Result<(), TrainError> {
    fit_triplets(clf, triplets, cfg, Phase::FineTune, round, cfg.epochs_per_round)
}

pub fn accuracy<P: Predictor + ?Sized>(clf: &P, data: &Dataset) -> f64 {
    let correct: usize = (0..data.len())
        .into_par_iter()
        .filter(|&i| clf.predict(data.instance(i)) == data.label(i))
        .count();
    correct as f64 / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityAccuracy {
    pub sigma: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub clean_accuracy: f64,
    pub corrupted: Vec<SeverityAccuracy>,
    pub corrupted_mean: f64,
}

pub fn evaluate<P: Predictor + ?Sized>(clf: &P, clean: &Dataset, corrupted: &CorruptedEvalSet) -> Evaluation {
    let per: Vec<SeverityAccuracy> = corrupted
        .iter()
        .map(|(sigma, data)| SeverityAccuracy {
            sigma,
            accuracy: accuracy(clf, data),
        })
        .collect();
    let corrupted_mean = per.iter().map(|s| s.accuracy).sum::<f64>() / per.len() as f64;
    Evaluation {
        clean_accuracy: accuracy(clf, clean),
        corrupted: per,
        corrupted_mean,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub queries: usize,
    pub clean_accuracy: f64,
    pub corrupted: Vec<SeverityAccuracy>,
    pub corrupted_mean: f64,
    pub mean_sigma: f64,
}

impl RoundMetrics {
    pub fn new(round: u32, queries: usize, eval: Evaluation, mean_sigma: f64) -> Self {
        Self {
            round,
            queries,
            clean_accuracy: eval.clean_accuracy,
            corrupted: eval.corrupted,
            corrupted_mean: eval.corrupted_mean,
            mean_sigma,
        }
    }

    pub fn csv_header(severities: &[f64]) -> String {
        let mut h = String::from("round,queries,clean_acc,corrupted_acc_mean");
        for s in severities {
            h.push_str(&format!(",corrupted_acc@{s}"));
        }
        h.push_str(",mean_sigma");
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{}",
            self.round, self.queries, self.clean_accuracy, self.corrupted_mean
        );
        for s in &self.corrupted {
            row.push_str(&format!(",{}", s.accuracy));
        }
        row.push_str(&format!(",{}", self.mean_sigma));
        row
    }
}

/// Metrics CSV (header plus one row per round).
pub fn metrics_csv(severities: &[f64], rows: &[RoundMetrics]) -> String {
    let mut out = RoundMetrics::csv_header(severities);
    out.push('\n');
    for r in rows {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

/// State handed to the per-round observer (checkpointing, progress output).
pub struct RoundSnapshot<'a> {
    pub round: u32,
    pub triplets: &'a TripletDataset,
    pub classifier: &'a Classifier,
    pub metrics: &'a RoundMetrics,
    pub query_log: &'a [QueryRecord],
}

#[derive(Debug, Clone)]
pub struct AqplOutcome {
    pub classifier: Classifier,
    pub metrics: Vec<RoundMetrics>,
    pub query_log: Vec<QueryRecord>,
    pub stopped_early: bool,
}

pub type RoundObserver<'a> = dyn FnMut(&RoundSnapshot<'_>) -> Result<(), TrainError> + 'a;

/// The query loop. Starting from a pretrained model, every round estimates
/// conformity, lets `strategy` pick up to `2B` examples, asks the oracle for
/// their levels, and continues training with per-example levels.
///
/// Row 0 of the returned metrics is the pretrained model. Examples the
/// oracle reports as unidentifiable are set to the ladder minimum and
/// leave the pool like any other annotated example.
#[allow(clippy::too_many_arguments)]
pub fn run_aqpl(
    triplets: &mut TripletDataset,
    pretrained: Classifier,
    oracle: &mut dyn PerturbationOracle,
    strategy: Strategy,
    cfg: &TrainConfig,
    clean_eval: &Dataset,
    corrupted_eval: &CorruptedEvalSet,
    observer: &mut RoundObserver<'_>,
) -> Result<AqplOutcome, TrainError> {
    cfg.validate()?;
    let mut clf = pretrained;
    let mut log: Vec<QueryRecord> = Vec::new();
    let mut queries = 0usize;
    let first = RoundMetrics::new(0, 0, evaluate(&clf, clean_eval, corrupted_eval), triplets.mean_sigma());
    observer(&RoundSnapshot {
        round: 0,
        triplets,
        classifier: &clf,
        metrics: &first,
        query_log: &log,
    })?;
    let mut metrics = vec![first];
    let mut stopped_early = false;
    let floor = oracle.ladder().levels()[0];

    for round in 1..=cfg.rounds {
        if let Some(target) = cfg.stop_at_accuracy {
            if metrics.last().is_some_and(|m| m.corrupted_mean >= target) {
                stopped_early = true;
                break;
            }
        }
        let reports = conformity_reports(&clf, triplets, cfg.family, cfg.samples, cfg.seed, round);
        let selection = strategy.select(
            &SelectionContext {
                clf: &clf,
                triplets,
                reports: &reports,
                family: cfg.family,
                samples: cfg.samples,
                seed: cfg.seed,
                round,
            },
            cfg.batch_queries,
        );
        if selection.is_empty() {
            log::info!("round {round}: no eligible examples left");
            stopped_early = true;
            break;
        }

        let picked: Vec<_> = selection.pairs().collect();
        let batch: Vec<OracleQuery> = picked
            .iter()
            .map(|&(i, _)| {
                let t = &triplets.triplets[i];
                OracleQuery {
                    index: i,
                    x: t.x.clone(),
                    y: t.y,
                    current_sigma: t.sigma,
                    round,
                }
            })
            .collect();
        let answers = oracle.query(&batch);
        if answers.len() != batch.len() {
            return Err(TrainError::Oracle {
                round,
                source: OracleError::Unavailable(format!(
                    "{} answers for {} queries",
                    answers.len(),
                    batch.len()
                )),
            });
        }

        for ((index, side), answer) in picked.into_iter().zip(answers) {
            debug_assert_eq!(index, answer.index);
            let before = triplets.triplets[index].sigma;
            let (after, note) = match answer.result {
                Ok(sigma) => (sigma, answer.note),
                Err(OracleError::Unidentifiable { .. }) => {
                    log::warn!("round {round}: example {index} unidentifiable, level set to {floor}");
                    (floor, Some("unidentifiable".to_string()))
                }
                Err(source) => return Err(TrainError::Oracle { round, source }),
            };
            triplets.annotate(index, round, after);
            log.push(QueryRecord {
                round,
                strategy: strategy.name().to_string(),
                index,
                side,
                entropy: reports[index].entropy,
                sigma_before: before,
                sigma_after: after,
                note,
            });
            queries += 1;
        }

        if cfg.retrain_from_scratch {
            clf = fresh_classifier(cfg, triplets.dim, triplets.num_classes);
            fit_triplets(&mut clf, triplets, cfg, Phase::FineTune, round, cfg.pretrain_epochs)?;
        } else {
            fine_tune_instancewise(&mut clf, triplets, cfg, round)?;
        }

        let m = RoundMetrics::new(
            round,
            queries,
            evaluate(&clf, clean_eval, corrupted_eval),
            triplets.mean_sigma(),
        );
        observer(&RoundSnapshot {
            round,
            triplets,
            classifier: &clf,
            metrics: &m,
            query_log: &log,
        })?;
        metrics.push(m);
    }

    Ok(AqplOutcome {
        classifier: clf,
        metrics,
        query_log: log,
        stopped_early,
    })
}
