//! Sources of the optimal perturbation level σ_o: the largest level at which
//! the ground truth still recognizes a noisy copy with probability τ.
//!
//! Three routes exist. A known linear ground truth admits a closed form; an
//! arbitrary labelling function is probed by bisection over the annotation
//! ladder; a human answers through the annotation service (implemented in a
//! separate crate against [`PerturbationOracle`]).

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{LinearBinary, Predictor};
use crate::numerics::{std_normal_quantile, stream, Rng};
use crate::perturb::{perturb_into, Ladder, NoiseFamily, NoiseSpec};

pub const DEFAULT_TAU: f64 = 0.9973;
pub const DEFAULT_ORACLE_SAMPLES: usize = 200_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("point lies on the oracle's decision boundary; optimal level undefined")]
    OnBoundary,
    #[error("example {index} is not recognized even at the lowest level (agreement {agreement})")]
    Unidentifiable { index: usize, agreement: f64 },
    #[error("invalid oracle configuration: {0}")]
    Config(String),
    #[error("oracle unavailable: {0}")]
    Unavailable(String),
}

/// `s = σ - σ_o`. Positive means the current level is excessive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Conformity {
    pub sigma: f64,
    pub sigma_o: f64,
    pub s: f64,
}

pub fn conformity_of(sigma: f64, sigma_o: f64) -> Conformity {
    Conformity {
        sigma,
        sigma_o,
        s: sigma - sigma_o,
    }
}

fn check_tau(tau: f64) -> Result<(), OracleError> {
    if !(tau > 0.5 && tau < 1.0) {
        return Err(OracleError::Config(format!("tau must lie in (0.5, 1), got {tau}")));
    }
    Ok(())
}

/// Closed form for a linear ground truth under Gaussian noise:
/// `σ_o = |w·x + b| / (‖w‖ Φ⁻¹(τ))`.
pub fn sigma_o_linear(w: &[f64], b: f64, x: &[f64], tau: f64) -> Result<f64, OracleError> {
    check_tau(tau)?;
    let truth = LinearBinary::new(w.to_vec(), b);
    let norm = truth.weight_norm();
    if !(norm > 0.0) {
        return Err(OracleError::Config("zero oracle weight vector".into()));
    }
    let f = truth.score(x);
    if f == 0.0 {
        return Err(OracleError::OnBoundary);
    }
    let z = std_normal_quantile(tau).map_err(|e| OracleError::Config(e.to_string()))?;
    Ok(f.abs() / (norm * z))
}

/// Fraction of `samples` noisy copies at `sigma` that `concept` labels `y`.
/// The copies come from a stream keyed only by `stream_seed`, so every level
/// probed for one example reuses the same underlying draws.
pub fn agreement_rate<P: Predictor + ?Sized>(
    concept: &P,
    x: &[f64],
    y: usize,
    noise: NoiseSpec,
    samples: usize,
    clip: bool,
    stream_seed: (u64, u64),
) -> f64 {
    if noise.sigma == 0.0 {
        return if concept.predict(x) == y { 1.0 } else { 0.0 };
    }
    let mut rng = Rng::substream(stream_seed.0, &[stream::ORACLE, stream_seed.1]);
    let mut buf = Vec::with_capacity(x.len());
    let mut agree = 0usize;
    for _ in 0..samples {
        perturb_into(x, noise, &mut rng, clip, &mut buf);
        if concept.predict(&buf) == y {
            agree += 1;
        }
    }
    agree as f64 / samples as f64
}

/// Settings shared by the simulated bisection oracle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BisectSettings {
    pub tau: f64,
    pub samples: usize,
    pub family: NoiseFamily,
    pub clip: bool,
}

/// Largest ladder level whose estimated agreement is at least τ, assuming
/// agreement does not increase with the level. Always returns a grid point.
pub fn sigma_o_bisect<P: Predictor + ?Sized>(
    concept: &P,
    index: usize,
    x: &[f64],
    y: usize,
    ladder: &Ladder,
    settings: &BisectSettings,
    seed: u64,
) -> Result<f64, OracleError> {
    check_tau(settings.tau)?;
    if settings.samples == 0 {
        return Err(OracleError::Config("oracle needs at least one sample per probe".into()));
    }
    let levels = ladder.levels();
    let probe = |i: usize| {
        agreement_rate(
            concept,
            x,
            y,
            NoiseSpec {
                family: settings.family,
                sigma: levels[i],
            },
            settings.samples,
            settings.clip,
            (seed, index as u64),
        )
    };

    let bottom = probe(0);
    if bottom < settings.tau {
        return Err(OracleError::Unidentifiable {
            index,
            agreement: bottom,
        });
    }
    let top = levels.len() - 1;
    if probe(top) >= settings.tau {
        return Ok(levels[top]);
    }
    // Invariant: levels[lo] passes, levels[hi] fails.
    let (mut lo, mut hi) = (0, top);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if probe(mid) >= settings.tau {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(levels[lo])
}

/// One pending question for an oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleQuery {
    pub index: usize,
    pub x: Vec<f64>,
    pub y: usize,
    pub current_sigma: f64,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleAnswer {
    pub index: usize,
    pub result: Result<f64, OracleError>,
    /// Free-form provenance, e.g. a fallback notice.
    pub note: Option<String>,
}

/// Anything that can answer a batch of level queries.
pub trait PerturbationOracle {
    fn ladder(&self) -> &Ladder;
    fn query(&mut self, queries: &[OracleQuery]) -> Vec<OracleAnswer>;
}

/// Ground truth used by the simulated oracle.
#[derive(Clone)]
pub enum OracleKind {
    /// `sign(w·x + b)`; answered in closed form.
    AnalyticLinear { w: Vec<f64>, b: f64 },
    /// Black-box labelling function; answered by bisection.
    Concept(Arc<dyn Predictor>),
}

impl std::fmt::Debug for OracleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OracleKind::AnalyticLinear { w, b } => {
                f.debug_struct("AnalyticLinear").field("w", w).field("b", b).finish()
            }
            OracleKind::Concept(c) => write!(f, "Concept({} classes)", c.num_classes()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSpec {
    pub kind: OracleKind,
    pub tau: f64,
    pub samples: usize,
    pub ladder: Ladder,
    pub family: NoiseFamily,
    pub clip: bool,
    pub seed: u64,
}

impl OracleSpec {
    pub fn validate(&self) -> Result<(), OracleError> {
        check_tau(self.tau)?;
        if let OracleKind::Concept(_) = self.kind {
            if self.samples < 1000 {
                return Err(OracleError::Config(format!(
                    "a concept oracle needs at least 1000 samples per probe, got {}",
                    self.samples
                )));
            }
        }
        if let OracleKind::AnalyticLinear { .. } = self.kind {
            if self.family != NoiseFamily::Gaussian {
                return Err(OracleError::Config(
                    "the closed-form oracle is only valid for gaussian noise".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Simulated annotator: answers are snapped down to the ladder the way a
/// human picks one rung.
#[derive(Debug, Clone)]
pub struct SimulatedOracle {
    spec: OracleSpec,
}

impl SimulatedOracle {
    pub fn new(spec: OracleSpec) -> Result<Self, OracleError> {
        spec.validate()?;
        Ok(Self { spec })
    }

    pub fn spec(&self) -> &OracleSpec {
        &self.spec
    }

    pub fn answer(&self, q: &OracleQuery) -> Result<f64, OracleError> {
        let ladder = &self.spec.ladder;
        match &self.spec.kind {
            OracleKind::AnalyticLinear { w, b } => {
                let truth = LinearBinary::new(w.clone(), *b);
                if truth.predict(&q.x) != q.y {
                    return Err(OracleError::Unidentifiable {
                        index: q.index,
                        agreement: 0.0,
                    });
                }
                let sigma_o = sigma_o_linear(w, *b, &q.x, self.spec.tau)?;
                ladder.snap_down(sigma_o).ok_or(OracleError::Unidentifiable {
                    index: q.index,
                    agreement: 0.0,
                })
            }
            OracleKind::Concept(concept) => sigma_o_bisect(
                concept.as_ref(),
                q.index,
                &q.x,
                q.y,
                ladder,
                &BisectSettings {
                    tau: self.spec.tau,
                    samples: self.spec.samples,
                    family: self.spec.family,
                    clip: self.spec.clip,
                },
                self.spec.seed,
            ),
        }
    }
}

impl PerturbationOracle for SimulatedOracle {
    fn ladder(&self) -> &Ladder {
        &self.spec.ladder
    }

    fn query(&mut self, queries: &[OracleQuery]) -> Vec<OracleAnswer> {
        queries
            .par_iter()
            .map(|q| OracleAnswer {
                index: q.index,
                result: self.answer(q),
                note: None,
            })
            .collect()
    }
}
