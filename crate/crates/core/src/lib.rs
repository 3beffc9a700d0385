//! Noise-robust training with per-example perturbation levels chosen by an
//! oracle.
//!
//! Every training example carries its own noise level. Each query round
//! estimates, for every example, how consistent the current model's
//! predictions are under noise at that level (the classification entropy),
//! sends the examples with the highest and lowest entropy to an oracle, and
//! continues training with the corrected levels.
//!
//! Module map:
//! - [`numerics`]: seeded streams, normal CDF/quantile, small vector helpers
//! - [`dataset`]: datasets, triplet state, IDX ingestion, checkpoints
//! - [`model`]: linear and one-hidden-layer classifiers, SGD
//! - [`perturb`]: noise families, annotation ladder, corrupted eval sets
//! - [`conformity`]: Monte-Carlo and closed-form classification entropy
//! - [`oracle`]: optimal level by closed form or bisection
//! - [`select`]: query strategies
//! - [`trainer`]: noise training, the query loop, evaluation

// Negated comparisons such as `!(x > 0.0)` are used on purpose: they also
// reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod conformity;
pub mod dataset;
pub mod model;
pub mod numerics;
pub mod oracle;
pub mod perturb;
pub mod select;
pub mod trainer;

pub use conformity::{closed_form_entropy_linear, entropy_of, mc_conformity, ConformityReport};
pub use dataset::{
    gen_blobs, init_triplets, load_idx_images, load_state, save_state, BlobConcept, BlobsSpec,
    Checkpoint, CorruptedEvalSet, Dataset, MarginProfile, Triplet, TripletDataset,
};
pub use model::{Architecture, Classifier, LinearBinary, Predictor, Sgd};
pub use numerics::Rng;
pub use oracle::{
    conformity_of, sigma_o_bisect, sigma_o_linear, OracleKind, OracleSpec, PerturbationOracle,
    SimulatedOracle,
};
pub use perturb::{corrupt_eval_set, perturb, Ladder, NoiseFamily, NoiseSpec};
pub use select::{QueryRecord, SelectionResult, Side, Strategy};
pub use trainer::{evaluate, run_aqpl, train_noise_fixed, train_noise_instancewise, RoundMetrics, TrainConfig};
