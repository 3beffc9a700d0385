//! Oracle backed by a human annotator through the task store.

use std::sync::Arc;
use std::time::Duration;

use aqpl_core::dataset::ImageShape;
use aqpl_core::numerics::{stream, Rng};
use aqpl_core::oracle::{OracleAnswer, OracleError, OracleQuery, PerturbationOracle, SimulatedOracle};
use aqpl_core::perturb::{Ladder, NoiseFamily};

use crate::preview::render_ladder_previews;
use crate::store::{AnnotationTask, TaskStatus, TaskStore};

/// What to do with questions nobody answered in time.
#[derive(Debug, Clone)]
pub enum TimeoutPolicy {
    /// Report the example as unavailable; the trainer stops with an error.
    Fail,
    /// Answer with the simulated oracle and flag the answer.
    Simulate(SimulatedOracle),
}

#[derive(Debug, Clone)]
pub struct HumanOracleConfig {
    pub ladder: Ladder,
    pub family: NoiseFamily,
    pub image_shape: Option<ImageShape>,
    pub seed: u64,
    pub timeout: Duration,
    pub on_timeout: TimeoutPolicy,
    /// Prepended to task ids so several runs can share one store.
    pub task_prefix: String,
}

pub struct HumanOracle {
    store: Arc<TaskStore>,
    config: HumanOracleConfig,
}

pub const FALLBACK_NOTE: &str = "simulated-fallback";

impl HumanOracle {
    pub fn new(store: Arc<TaskStore>, config: HumanOracleConfig) -> Self {
        Self { store, config }
    }

    pub fn store(&self) -> &Arc<TaskStore> {
        &self.store
    }

    pub fn task_id(&self, round: u32, index: usize) -> String {
        format!("{}r{round}-i{index}", self.config.task_prefix)
    }

    fn task_for(&self, q: &OracleQuery) -> Result<AnnotationTask, OracleError> {
        let seed = Rng::substream(
            self.config.seed,
            &[stream::PREVIEW, u64::from(q.round), q.index as u64],
        )
        .next_u64();
        let ladder = self.config.ladder.levels().to_vec();
        let previews =
            render_ladder_previews(&q.x, &ladder, seed, self.config.family, self.config.image_shape)
                .map_err(|e| OracleError::Unavailable(format!("example {}: {e}", q.index)))?;
        Ok(AnnotationTask {
            task_id: self.task_id(q.round, q.index),
            index: q.index,
            round: q.round,
            ladder,
            previews,
            current_sigma: q.current_sigma,
            seed,
            status: TaskStatus::Pending,
        })
    }

    fn unanswered(&self, q: &OracleQuery) -> OracleAnswer {
        match &self.config.on_timeout {
            TimeoutPolicy::Fail => OracleAnswer {
                index: q.index,
                result: Err(OracleError::Unavailable(format!(
                    "no annotation for example {} within {:?}",
                    q.index, self.config.timeout
                ))),
                note: None,
            },
            TimeoutPolicy::Simulate(sim) => {
                log::warn!(
                    "round {}: example {} not annotated in time, using the simulated oracle",
                    q.round,
                    q.index
                );
                OracleAnswer {
                    index: q.index,
                    result: sim.answer(q),
                    note: Some(FALLBACK_NOTE.to_string()),
                }
            }
        }
    }
}

impl PerturbationOracle for HumanOracle {
    fn ladder(&self) -> &Ladder {
        &self.config.ladder
    }

    /// Publishes one task per query, blocks until all are answered or the
    /// timeout passes, then withdraws whatever is still pending.
    fn query(&mut self, queries: &[OracleQuery]) -> Vec<OracleAnswer> {
        if let Some(q) = queries.first() {
            self.store.set_round(q.round);
        }
        let mut ids = Vec::with_capacity(queries.len());
        let mut failed: Vec<Option<OracleError>> = Vec::with_capacity(queries.len());
        for q in queries {
            let outcome = self
                .task_for(q)
                .and_then(|t| self.store.enqueue(t).map_err(|e| OracleError::Unavailable(e.to_string())));
            ids.push(self.task_id(q.round, q.index));
            failed.push(outcome.err());
        }
        let answers = self.store.await_answers(&ids, self.config.timeout);
        self.store.cancel_pending(&ids);

        queries
            .iter()
            .zip(answers)
            .zip(failed)
            .map(|((q, answer), failure)| {
                if let Some(e) = failure {
                    return OracleAnswer {
                        index: q.index,
                        result: Err(e),
                        note: None,
                    };
                }
                match answer {
                    Some(a) => OracleAnswer {
                        index: q.index,
                        result: Ok(a.sigma_star),
                        note: a.note,
                    },
                    None => self.unanswered(q),
                }
            })
            .collect()
    }
}
