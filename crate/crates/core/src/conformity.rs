//! Classification entropy of hard predictions under noise, estimated by
//! Monte-Carlo sampling, plus its closed form for a linear binary model.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::TripletDataset;
use crate::model::{LinearBinary, Predictor};
use crate::numerics::{std_normal_cdf, stream, Rng};
use crate::perturb::{perturb_into, NoiseFamily, NoiseSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConformityError {
    #[error("probability vector has a negative entry {0}")]
    NegativeProbability(f64),
    #[error("probabilities sum to {0}, not 1")]
    NotNormalized(f64),
    #[error("score is exactly zero: the point lies on the decision boundary")]
    OnBoundary,
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn entropy_of(p: &[f64]) -> Result<f64, ConformityError> {
    if let Some(&neg) = p.iter().find(|&&v| v < 0.0) {
        return Err(ConformityError::NegativeProbability(neg));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(ConformityError::NotNormalized(total));
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    h.max(0.0)
}

/// Binary entropy evaluated from the smaller tail `q = 1 - p` so that
/// nearly-certain predictions keep their (tiny) positive entropy.
pub fn binary_entropy_from_tail(q: f64) -> f64 {
    if q <= 0.0 {
        return 0.0;
    }
    let p = 1.0 - q;
    -q * q.ln() - p * (-q).ln_1p()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformityReport {
    pub index: usize,
    pub counts: Vec<u32>,
    pub p_hat: Vec<f64>,
    pub entropy: f64,
    pub sigma_used: f64,
}

impl ConformityReport {
    pub fn samples(&self) -> u32 {
        self.counts.iter().sum()
    }

    pub fn csv_header(num_classes: usize) -> String {
        let mut h = String::from("index,sigma,entropy");
        for k in 0..num_classes {
            h.push_str(&format!(",count_{k}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{},{}", self.index, self.sigma_used, self.entropy);
        for c in &self.counts {
            row.push_str(&format!(",{c}"));
        }
        row
    }
}

/// Counts the predicted class of `samples` noisy copies of `x` and returns
/// the entropy of the empirical class distribution.
pub fn mc_conformity<P: Predictor + ?Sized>(
    predictor: &P,
    index: usize,
    x: &[f64],
    noise: NoiseSpec,
    samples: usize,
    clip: bool,
    rng: &mut Rng,
) -> ConformityReport {
    assert!(samples >= 1, "at least one Monte-Carlo sample is needed");
    let k = predictor.num_classes();
    let mut counts = vec![0u32; k];
    if noise.sigma == 0.0 {
        counts[predictor.predict(x)] = samples as u32;
    } else {
        let mut buf = Vec::with_capacity(x.len());
        for _ in 0..samples {
            perturb_into(x, noise, rng, clip, &mut buf);
            counts[predictor.predict(&buf)] += 1;
        }
    }
    let p_hat: Vec<f64> = counts.iter().map(|&c| f64::from(c) / samples as f64).collect();
    let entropy = entropy_unchecked(&p_hat);
    ConformityReport {
        index,
        counts,
        p_hat,
        entropy,
        sigma_used: noise.sigma,
    }
}

/// Reports for every triplet at its current level. Example `i` in `round`
/// always draws from the stream `(seed, CONFORMITY, round, i)`, so the
/// result does not depend on scheduling.
pub fn conformity_reports<P: Predictor + ?Sized>(
    predictor: &P,
    triplets: &TripletDataset,
    family: NoiseFamily,
    samples: usize,
    seed: u64,
    round: u32,
) -> Vec<ConformityReport> {
    let clip = triplets.is_image();
    triplets
        .triplets
        .par_iter()
        .map(|t| {
            let mut rng =
                Rng::substream(seed, &[stream::CONFORMITY, u64::from(round), t.index as u64]);
            let spec = NoiseSpec {
                family,
                sigma: t.sigma,
            };
            mc_conformity(predictor, t.index, &t.x, spec, samples, clip, &mut rng)
        })
        .collect()
}

/// Probability that Gaussian noise of level `sigma` leaves the decision of
/// `clf` at `x` unchanged: `Φ(|f(x)| / (σ‖w‖))`, returned as the flip
/// probability `1 - Φ(...)` for precision.
pub fn linear_flip_probability(
    clf: &LinearBinary,
    x: &[f64],
    sigma: f64,
) -> Result<f64, ConformityError> {
    let norm = clf.weight_norm();
    if !(norm > 0.0) {
        return Err(ConformityError::Degenerate("zero weight vector".into()));
    }
    if !(sigma > 0.0) {
        return Err(ConformityError::Degenerate(format!("level {sigma} must be positive")));
    }
    let f = clf.score(x);
    if f == 0.0 {
        return Err(ConformityError::OnBoundary);
    }
    Ok(std_normal_cdf(-f.abs() / (sigma * norm)))
}

/// Exact classification entropy of a linear binary model under isotropic
/// Gaussian noise.
pub fn closed_form_entropy_linear(
    clf: &LinearBinary,
    x: &[f64],
    sigma: f64,
) -> Result<f64, ConformityError> {
    linear_flip_probability(clf, x, sigma).map(binary_entropy_from_tail)
}
