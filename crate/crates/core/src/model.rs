//! Small classifiers with hand-written backpropagation.
//!
//! Parameters live in one flat vector so the optimizer, the checkpoint
//! format and the finite-difference checks all see the same layout:
//!
//! * linear: `W (K×d)` row-major, then `b (K)`
//! * mlp:    `W1 (h×d)`, `b1 (h)`, `W2 (K×h)`, `b2 (K)`

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{dot, norm, stream, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("input has dimension {got}, classifier expects {expected}")]
    Shape { expected: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite gradient, step refused")]
    NonFiniteGradient,
    #[error("parameter vector has {got} entries, architecture needs {expected}")]
    ParamCount { expected: usize, got: usize },
    #[error("invalid optimizer setting: {0}")]
    Optimizer(String),
}

/// Anything that maps an input to a hard class decision.
pub trait Predictor: Send + Sync {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> usize;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Classifier {
    pub arch: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    pub params: Vec<f64>,
}

pub fn param_count(arch: Architecture, d: usize, k: usize) -> usize {
    match arch {
        Architecture::Linear => k * d + k,
        Architecture::Mlp { hidden } => hidden * d + hidden + k * hidden + k,
    }
}

/// Numerically stable softmax, in place.
pub fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in logits.iter_mut() {
        *l /= sum;
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Classifier {
    pub fn zeros(arch: Architecture, input_dim: usize, num_classes: usize) -> Self {
        Self {
            arch,
            input_dim,
            num_classes,
            params: vec![0.0; param_count(arch, input_dim, num_classes)],
        }
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(arch: Architecture, input_dim: usize, num_classes: usize, seed: u64) -> Self {
        let mut clf = Self::zeros(arch, input_dim, num_classes);
        let mut rng = Rng::substream(seed, &[stream::INIT]);
        let mut fill = |slice: &mut [f64], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in slice {
                *w = (2.0 * rng.uniform() - 1.0) * bound;
            }
        };
        match arch {
            Architecture::Linear => {
                let (w, _) = clf.params.split_at_mut(num_classes * input_dim);
                fill(w, input_dim);
            }
            Architecture::Mlp { hidden } => {
                let (w1, rest) = clf.params.split_at_mut(hidden * input_dim);
                let (_, rest) = rest.split_at_mut(hidden);
                let (w2, _) = rest.split_at_mut(num_classes * hidden);
                fill(w1, input_dim);
                fill(w2, hidden);
            }
        }
        clf
    }

    pub fn from_params(
        arch: Architecture,
        input_dim: usize,
        num_classes: usize,
        params: Vec<f64>,
    ) -> Result<Self, ModelError> {
        let expected = param_count(arch, input_dim, num_classes);
        if params.len() != expected {
            return Err(ModelError::ParamCount {
                expected,
                got: params.len(),
            });
        }
        Ok(Self {
            arch,
            input_dim,
            num_classes,
            params,
        })
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), ModelError> {
        if x.len() != self.input_dim {
            return Err(ModelError::Shape {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Raw logits; writes the hidden activations into `hidden` for the MLP.
    fn logits_into(&self, x: &[f64], hidden: &mut Vec<f64>, out: &mut [f64]) {
        let (d, k) = (self.input_dim, self.num_classes);
        match self.arch {
            Architecture::Linear => {
                let (w, b) = self.params.split_at(k * d);
                for c in 0..k {
                    out[c] = dot(&w[c * d..(c + 1) * d], x) + b[c];
                }
            }
            Architecture::Mlp { hidden: h } => {
                let (w1, rest) = self.params.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(k * h);
                hidden.clear();
                hidden.extend((0..h).map(|j| (dot(&w1[j * d..(j + 1) * d], x) + b1[j]).max(0.0)));
                for c in 0..k {
                    out[c] = dot(&w2[c * h..(c + 1) * h], hidden) + b2[c];
                }
            }
        }
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.check_dim(x)?;
        let mut out = vec![0.0; self.num_classes];
        self.logits_into(x, &mut Vec::new(), &mut out);
        Ok(out)
    }

    /// Class probabilities (softmax over logits).
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut p = self.logits(x)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Mean cross-entropy over the batch and its gradient with respect to
    /// the flat parameter vector.
    pub fn loss_and_grad(&self, batch: &[(&[f64], usize)]) -> Result<(f64, Vec<f64>), ModelError> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        let (d, k) = (self.input_dim, self.num_classes);
        let mut grad = vec![0.0; self.params.len()];
        let mut loss = 0.0;
        let mut hidden = Vec::new();
        let mut probs = vec![0.0; k];
        let mut dhidden = Vec::new();

        for &(x, y) in batch {
            self.check_dim(x)?;
            if y >= k {
                return Err(ModelError::Label {
                    label: y,
                    classes: k,
                });
            }
            self.logits_into(x, &mut hidden, &mut probs);
            let max = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + probs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += lse - probs[y];
            for p in probs.iter_mut() {
                *p = (*p - lse).exp();
            }
            probs[y] -= 1.0;
            let dlogits = &probs;

            match self.arch {
                Architecture::Linear => {
                    let (gw, gb) = grad.split_at_mut(k * d);
                    for c in 0..k {
                        let g = dlogits[c];
                        for (gwi, xi) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                            *gwi += g * xi;
                        }
                        gb[c] += g;
                    }
                }
                Architecture::Mlp { hidden: h } => {
                    let w2 = &self.params[h * d + h..h * d + h + k * h];
                    let (gw1, rest) = grad.split_at_mut(h * d);
                    let (gb1, rest) = rest.split_at_mut(h);
                    let (gw2, gb2) = rest.split_at_mut(k * h);
                    dhidden.clear();
                    dhidden.resize(h, 0.0);
                    for c in 0..k {
                        let g = dlogits[c];
                        gb2[c] += g;
                        for j in 0..h {
                            gw2[c * h + j] += g * hidden[j];
                            dhidden[j] += g * w2[c * h + j];
                        }
                    }
                    for j in 0..h {
                        // ReLU gate: hidden[j] > 0 iff the pre-activation was positive.
                        if hidden[j] <= 0.0 {
                            continue;
                        }
                        let g = dhidden[j];
                        gb1[j] += g;
                        for (gw, xi) in gw1[j * d..(j + 1) * d].iter_mut().zip(x) {
                            *gw += g * xi;
                        }
                    }
                }
            }
        }
        let n = batch.len() as f64;
        for g in &mut grad {
            *g /= n;
        }
        Ok((loss / n, grad))
    }
}

impl Predictor for Classifier {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Argmax of the logits; ties go to the lowest class index.
    ///
    /// Panics on a dimension mismatch; use [`Classifier::forward`] for a
    /// checked call.
    fn predict(&self, x: &[f64]) -> usize {
        assert_eq!(x.len(), self.input_dim, "input dimension mismatch");
        let mut out = vec![0.0; self.num_classes];
        self.logits_into(x, &mut Vec::new(), &mut out);
        argmax(&out)
    }
}

/// SGD with heavy-ball momentum.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, num_params: usize) -> Result<Self, ModelError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(ModelError::Optimizer(format!("lr must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(ModelError::Optimizer(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(Self {
            lr,
            momentum,
            velocity: vec![0.0; num_params],
        })
    }

    /// `v <- momentum*v + grad; theta <- theta - lr*v`. A non-finite gradient
    /// leaves both the classifier and the velocity untouched.
    pub fn step(&mut self, clf: &mut Classifier, grad: &[f64]) -> Result<(), ModelError> {
        if grad.len() != clf.params.len() {
            return Err(ModelError::ParamCount {
                expected: clf.params.len(),
                got: grad.len(),
            });
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(ModelError::NonFiniteGradient);
        }
        for ((theta, v), g) in clf.params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *theta -= self.lr * *v;
        }
        Ok(())
    }
}

/// `F(x) = sign(w·x + b)` as a two-class predictor: class 1 when the score
/// is positive, class 0 otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBinary {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LinearBinary {
    pub fn new(w: Vec<f64>, b: f64) -> Self {
        Self { w, b }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        dot(&self.w, x) + self.b
    }

    pub fn weight_norm(&self) -> f64 {
        norm(&self.w)
    }

    /// Signed distance of `x` to the decision hyperplane.
    pub fn signed_distance(&self, x: &[f64]) -> f64 {
        self.score(x) / self.weight_norm()
    }

    /// The equivalent two-class softmax classifier (logits `(0, f(x))`).
    pub fn to_classifier(&self) -> Classifier {
        let d = self.w.len();
        let mut params = vec![0.0; 2 * d + 2];
        params[d..2 * d].copy_from_slice(&self.w);
        params[2 * d + 1] = self.b;
        Classifier {
            arch: Architecture::Linear,
            input_dim: d,
            num_classes: 2,
            params,
        }
    }
}

impl Predictor for LinearBinary {
    fn num_classes(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        self.w.len()
    }

    fn predict(&self, x: &[f64]) -> usize {
        usize::from(self.score(x) > 0.0)
    }
}
