//! Query selection strategies.

use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::conformity::{entropy_unchecked, ConformityReport};
use crate::dataset::TripletDataset;
use crate::model::Classifier;
use crate::numerics::{stream, Rng};
use crate::perturb::{perturb_into, NoiseFamily, NoiseSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectError {
    #[error("pool exhausted: {available} eligible examples, {needed} needed")]
    PoolExhausted { available: usize, needed: usize },
    #[error("unknown strategy `{0}`")]
    UnknownStrategy(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Aqpl,
    Random,
    CleanUncertainty,
    NoiseUncertainty,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Aqpl,
        Strategy::Random,
        Strategy::CleanUncertainty,
        Strategy::NoiseUncertainty,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Aqpl => "aqpl",
            Strategy::Random => "random",
            Strategy::CleanUncertainty => "clean-uncertainty",
            Strategy::NoiseUncertainty => "noise-uncertainty",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = SelectError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| SelectError::UnknownStrategy(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Excessive,
    Deficient,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Side::Excessive => "excessive",
            Side::Deficient => "deficient",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub excessive: Vec<usize>,
    pub deficient: Vec<usize>,
    pub strategy: Strategy,
    pub round: u32,
}

impl SelectionResult {
    pub fn len(&self) -> usize {
        self.excessive.len() + self.deficient.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(index, side)` pairs, excessive batch first.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, Side)> + '_ {
        self.excessive
            .iter()
            .map(|&i| (i, Side::Excessive))
            .chain(self.deficient.iter().map(|&i| (i, Side::Deficient)))
    }
}

/// Row of the query log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub round: u32,
    pub strategy: String,
    pub index: usize,
    pub side: Side,
    pub entropy: f64,
    pub sigma_before: f64,
    pub sigma_after: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl QueryRecord {
    pub const CSV_HEADER: &'static str = "round,strategy,index,side,entropy,sigma_before,sigma_after,note";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.round,
            self.strategy,
            self.index,
            self.side,
            self.entropy,
            self.sigma_before,
            self.sigma_after,
            self.note.as_deref().unwrap_or("")
        )
    }
}

fn require(eligible: usize, needed: usize) -> Result<(), SelectError> {
    if eligible < needed {
        return Err(SelectError::PoolExhausted {
            available: eligible,
            needed,
        });
    }
    Ok(())
}

/// Eligible indices sorted by score descending, ties by ascending index.
fn rank_descending(scores: &[(usize, f64)]) -> Vec<usize> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().map(|(i, _)| i).collect()
}

/// Excessive batch: the `n_top` highest entropies. Deficient batch: the
/// `n_bottom` lowest, taken from the remainder so both stay disjoint. Both
/// orders break ties by index.
fn split_by_entropy(
    reports: &[ConformityReport],
    eligible: &[usize],
    n_top: usize,
    n_bottom: usize,
    round: u32,
) -> SelectionResult {
    let allowed: HashSet<usize> = eligible.iter().copied().collect();
    let mut pool: Vec<(usize, f64)> = reports
        .iter()
        .filter(|r| allowed.contains(&r.index))
        .map(|r| (r.index, r.entropy))
        .collect();
    pool.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let excessive: Vec<usize> = pool.iter().take(n_top).map(|p| p.0).collect();
    let mut rest: Vec<(usize, f64)> = pool[excessive.len()..].to_vec();
    rest.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let deficient = rest.iter().take(n_bottom).map(|p| p.0).collect();
    SelectionResult {
        excessive,
        deficient,
        strategy: Strategy::Aqpl,
        round,
    }
}

/// Top-`b` entropies form the excessive batch, bottom-`b` the deficient one.
pub fn select_aqpl(
    reports: &[ConformityReport],
    b: usize,
    eligible: &[usize],
    round: u32,
) -> Result<SelectionResult, SelectError> {
    require(eligible.len(), 2 * b)?;
    Ok(split_by_entropy(reports, eligible, b, b, round))
}

fn split_ranked(ranked: Vec<usize>, b: usize, total: usize, strategy: Strategy, round: u32) -> SelectionResult {
    let mut picked = ranked.into_iter().take(total);
    let excessive = picked.by_ref().take(b.min(total)).collect();
    let deficient = picked.collect();
    SelectionResult {
        excessive,
        deficient,
        strategy,
        round,
    }
}

/// `2b` eligible examples uniformly without replacement.
pub fn select_random(
    eligible: &[usize],
    b: usize,
    rng: &mut Rng,
    round: u32,
) -> Result<SelectionResult, SelectError> {
    require(eligible.len(), 2 * b)?;
    Ok(random_pick(eligible, b, 2 * b, rng, round))
}

fn random_pick(eligible: &[usize], b: usize, total: usize, rng: &mut Rng, round: u32) -> SelectionResult {
    let mut pool = eligible.to_vec();
    // Partial Fisher–Yates: the first `total` slots become the sample.
    for i in 0..total.min(pool.len()) {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(total);
    split_ranked(pool, b, total, Strategy::Random, round)
}

/// Softmax entropy of the clean prediction.
pub fn clean_uncertainty(clf: &Classifier, x: &[f64]) -> f64 {
    entropy_unchecked(&clf.forward(x).expect("dimension checked by caller"))
}

fn clean_scores(clf: &Classifier, triplets: &TripletDataset, eligible: &[usize]) -> Vec<(usize, f64)> {
    eligible
        .par_iter()
        .map(|&i| (i, clean_uncertainty(clf, &triplets.triplets[i].x)))
        .collect()
}

/// Highest clean-prediction entropy first; the level plays no role.
pub fn select_clean_uncertainty(
    clf: &Classifier,
    triplets: &TripletDataset,
    eligible: &[usize],
    b: usize,
    round: u32,
) -> Result<SelectionResult, SelectError> {
    require(eligible.len(), 2 * b)?;
    let ranked = rank_descending(&clean_scores(clf, triplets, eligible));
    Ok(split_ranked(ranked, b, 2 * b, Strategy::CleanUncertainty, round))
}

/// Mean softmax entropy over `samples` noisy copies at the current level.
pub fn noise_uncertainty(
    clf: &Classifier,
    x: &[f64],
    noise: NoiseSpec,
    samples: usize,
    clip: bool,
    rng: &mut Rng,
) -> f64 {
    if noise.sigma == 0.0 {
        return clean_uncertainty(clf, x);
    }
    let mut buf = Vec::with_capacity(x.len());
    let mut total = 0.0;
    for _ in 0..samples {
        perturb_into(x, noise, rng, clip, &mut buf);
        total += clean_uncertainty(clf, &buf);
    }
    total / samples as f64
}

fn noise_scores(
    clf: &Classifier,
    triplets: &TripletDataset,
    eligible: &[usize],
    family: NoiseFamily,
    samples: usize,
    seed: u64,
    round: u32,
) -> Vec<(usize, f64)> {
    let clip = triplets.is_image();
    eligible
        .par_iter()
        .map(|&i| {
            let t = &triplets.triplets[i];
            let mut rng = Rng::substream(seed, &[stream::UNCERTAINTY, u64::from(round), i as u64]);
            let spec = NoiseSpec {
                family,
                sigma: t.sigma,
            };
            (i, noise_uncertainty(clf, &t.x, spec, samples, clip, &mut rng))
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn select_noise_uncertainty(
    clf: &Classifier,
    triplets: &TripletDataset,
    eligible: &[usize],
    b: usize,
    family: NoiseFamily,
    samples: usize,
    seed: u64,
    round: u32,
) -> Result<SelectionResult, SelectError> {
    require(eligible.len(), 2 * b)?;
    let scores = noise_scores(clf, triplets, eligible, family, samples, seed, round);
    Ok(split_ranked(rank_descending(&scores), b, 2 * b, Strategy::NoiseUncertainty, round))
}

/// Everything a strategy may look at in one round.
pub struct SelectionContext<'a> {
    pub clf: &'a Classifier,
    pub triplets: &'a TripletDataset,
    pub reports: &'a [ConformityReport],
    pub family: NoiseFamily,
    pub samples: usize,
    pub seed: u64,
    pub round: u32,
}

impl Strategy {
    /// Selects `min(2b, |eligible|)` examples. When the pool is smaller than
    /// `2b` the excessive side gets the extra example.
    pub fn select(&self, ctx: &SelectionContext<'_>, b: usize) -> SelectionResult {
        let eligible = ctx.triplets.eligible();
        let total = (2 * b).min(eligible.len());
        let top = total.div_ceil(2);
        match self {
            Strategy::Aqpl => split_by_entropy(ctx.reports, &eligible, top, total - top, ctx.round),
            Strategy::Random => {
                let mut rng = Rng::substream(ctx.seed, &[stream::SELECT, u64::from(ctx.round)]);
                random_pick(&eligible, top, total, &mut rng, ctx.round)
            }
            Strategy::CleanUncertainty => {
                let ranked = rank_descending(&clean_scores(ctx.clf, ctx.triplets, &eligible));
                split_ranked(ranked, top, total, *self, ctx.round)
            }
            Strategy::NoiseUncertainty => {
                let scores = noise_scores(
                    ctx.clf,
                    ctx.triplets,
                    &eligible,
                    ctx.family,
                    ctx.samples,
                    ctx.seed,
                    ctx.round,
                );
                split_ranked(rank_descending(&scores), top, total, *self, ctx.round)
            }
        }
    }
}
