//! Annotation service for choosing per-example perturbation levels by hand.
//!
//! The trainer turns each query into an [`AnnotationTask`]: the example's
//! noise ladder rendered as previews. An annotator fetches pending tasks
//! over HTTP, picks the last rung at which the content is still
//! recognisable, and posts it back. [`HumanOracle`] plugs the store into the
//! training loop as a [`PerturbationOracle`](aqpl_core::PerturbationOracle).

pub mod human;
pub mod preview;
pub mod server;
pub mod store;

pub use human::{HumanOracle, HumanOracleConfig, TimeoutPolicy};
pub use preview::{encode_gray_png, render_ladder_previews, Preview, PreviewError};
pub use server::{router, serve, ServerHandle};
pub use store::{Annotation, AnnotationTask, StoreError, StoreStatus, TaskStatus, TaskStore};
