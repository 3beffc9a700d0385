//! Noise families, the annotation ladder of candidate levels, and
//! materialization of corrupted evaluation sets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CorruptedEvalSet, Dataset};
use crate::numerics::{stream, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerturbError {
    #[error("invalid ladder: {0}")]
    Ladder(String),
    #[error("invalid noise level {0}")]
    Level(f64),
    #[error("no corruption severities given")]
    NoSeverities,
}

/// Noise family. Both are parameterized by their per-coordinate standard
/// deviation, so a level means the same thing for either family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    /// i.i.d. U(-σ√3, σ√3) per coordinate.
    Uniform,
}

impl std::fmt::Display for NoiseFamily {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NoiseFamily::Gaussian => "gaussian",
            NoiseFamily::Uniform => "uniform",
        })
    }
}

impl std::str::FromStr for NoiseFamily {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "uniform" => Ok(Self::Uniform),
            other => Err(format!("unknown noise family `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub family: NoiseFamily,
    pub sigma: f64,
}

impl NoiseSpec {
    pub fn new(family: NoiseFamily, sigma: f64) -> Result<Self, PerturbError> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(PerturbError::Level(sigma));
        }
        Ok(Self { family, sigma })
    }

    pub fn gaussian(sigma: f64) -> Self {
        Self::new(NoiseFamily::Gaussian, sigma).expect("valid gaussian level")
    }
}

/// Writes one noise vector into `out`. Level zero writes exact zeros and
/// consumes nothing from the stream.
pub fn sample_noise(spec: NoiseSpec, rng: &mut Rng, out: &mut [f64]) {
    if spec.sigma == 0.0 {
        out.fill(0.0);
        return;
    }
    match spec.family {
        NoiseFamily::Gaussian => {
            rng.fill_std_normal(out);
            for v in out.iter_mut() {
                *v *= spec.sigma;
            }
        }
        NoiseFamily::Uniform => {
            let half_width = spec.sigma * 3f64.sqrt();
            for v in out.iter_mut() {
                *v = (2.0 * rng.uniform() - 1.0) * half_width;
            }
        }
    }
}

/// `x + ε` with `ε ~ P(σ)`, written into `out`. With `clip` set the result
/// is clamped to the pixel range [0, 1].
pub fn perturb_into(x: &[f64], spec: NoiseSpec, rng: &mut Rng, clip: bool, out: &mut Vec<f64>) {
    out.clear();
    out.extend_from_slice(x);
    if spec.sigma == 0.0 {
        return;
    }
    let mut noise = vec![0.0; x.len()];
    sample_noise(spec, rng, &mut noise);
    for (o, e) in out.iter_mut().zip(&noise) {
        *o += e;
        if clip {
            *o = o.clamp(0.0, 1.0);
        }
    }
}

pub fn perturb(x: &[f64], spec: NoiseSpec, rng: &mut Rng, clip: bool) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    perturb_into(x, spec, rng, clip, &mut out);
    out
}

/// Evenly spaced candidate levels `σ_min, σ_min+α, …` up to and including
/// `σ_max` when it falls on the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ladder {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub alpha: f64,
    levels: Vec<f64>,
}

/// Levels are rounded to 12 decimals so that `0.01 * 23` is stored as the
/// double nearest to 0.23, the value a client parses from "0.23".
fn tidy(v: f64) -> f64 {
    format!("{v:.12}").parse().expect("formatted float parses")
}

impl Ladder {
    pub fn new(sigma_min: f64, sigma_max: f64, alpha: f64) -> Result<Self, PerturbError> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(PerturbError::Ladder(format!("step must be positive, got {alpha}")));
        }
        if !(sigma_min >= 0.0 && sigma_min.is_finite()) {
            return Err(PerturbError::Ladder(format!(
                "minimum level must be non-negative, got {sigma_min}"
            )));
        }
        if !(sigma_max > sigma_min && sigma_max.is_finite()) {
            return Err(PerturbError::Ladder(format!(
                "maximum {sigma_max} must exceed minimum {sigma_min}"
            )));
        }
        let steps = ((sigma_max - sigma_min) / alpha + 1e-9).floor() as usize;
        let levels = (0..=steps)
            .map(|i| tidy(sigma_min + i as f64 * alpha))
            .collect();
        Ok(Self {
            sigma_min,
            sigma_max,
            alpha,
            levels,
        })
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn top(&self) -> f64 {
        *self.levels.last().expect("ladder is never empty")
    }

    /// Index of the largest level not above `sigma`; `None` below the grid.
    pub fn floor_index(&self, sigma: f64) -> Option<usize> {
        self.levels.iter().rposition(|&l| l <= sigma + 1e-12)
    }

    /// Largest level not above `sigma`, or `None` below the grid.
    pub fn snap_down(&self, sigma: f64) -> Option<f64> {
        self.floor_index(sigma).map(|i| self.levels[i])
    }

    /// Exact (bit-equal) membership test.
    pub fn position(&self, sigma: f64) -> Option<usize> {
        self.levels.iter().position(|&l| l == sigma)
    }
}

/// Materializes `data` corrupted at every severity. Each severity is a pure
/// function of `(data, family, σ, seed)`: noise for example `i` at level σ
/// comes from the stream keyed by `(σ bits, i)`. Severity zero reproduces the
/// clean features exactly.
pub fn corrupt_eval_set(
    data: &Dataset,
    family: NoiseFamily,
    severities: &[f64],
    seed: u64,
) -> Result<CorruptedEvalSet, PerturbError> {
    if severities.is_empty() {
        return Err(PerturbError::NoSeverities);
    }
    let clip = data.is_image();
    let mut sets = Vec::with_capacity(severities.len());
    for &sigma in severities {
        let spec = NoiseSpec::new(family, sigma)?;
        let mut features = Vec::with_capacity(data.len() * data.dim());
        let mut buf = Vec::with_capacity(data.dim());
        for i in 0..data.len() {
            let mut rng = Rng::substream(seed, &[stream::CORRUPT, sigma.to_bits(), i as u64]);
            perturb_into(data.instance(i), spec, &mut rng, clip, &mut buf);
            features.extend_from_slice(&buf);
        }
        sets.push(features);
    }
    Ok(CorruptedEvalSet::new(
        data.clone(),
        family,
        severities.to_vec(),
        seed,
        sets,
    ))
}
