//! Task store shared by the HTTP handlers and the waiting trainer.

use std::collections::HashMap;
use std::sync::{Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::preview::Preview;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Validation(String),
}

impl StoreError {
    /// HTTP status the service answers with.
    pub fn status_code(&self) -> u16 {
        match self {
            StoreError::Conflict(_) => 409,
            StoreError::NotFound(_) => 404,
            StoreError::Validation(_) => 422,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskStatus {
    Pending,
    Answered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTask {
    pub task_id: String,
    pub index: usize,
    pub round: u32,
    pub ladder: Vec<f64>,
    pub previews: Vec<Preview>,
    pub current_sigma: f64,
    /// Seed of the preview noise, kept for audit.
    pub seed: u64,
    pub status: TaskStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub task_id: String,
    pub sigma_star: f64,
    #[serde(default)]
    pub note: Option<String>,
    /// Seconds since the Unix epoch; filled in on submission when zero.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStatus {
    pub round: u32,
    pub pending: usize,
    pub answered: usize,
    pub queries_total: usize,
}

struct Entry {
    task: AnnotationTask,
    answer: Option<Annotation>,
    delivered: bool,
}

#[derive(Default)]
struct Inner {
    entries: HashMap<String, Entry>,
    order: Vec<String>,
    round: u32,
    queries_total: usize,
}

/// All operations take one lock, so concurrent requests see a serial
/// history. Answers are handed to the trainer at most once.
#[derive(Default)]
pub struct TaskStore {
    inner: Mutex<Inner>,
    answered: Condvar,
}

impl TaskStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        // A panicking handler must not wedge the trainer; the data is still
        // consistent because every mutation is a single step.
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn set_round(&self, round: u32) {
        self.lock().round = round;
    }

    pub fn enqueue(&self, mut task: AnnotationTask) -> Result<String, StoreError> {
        if task.ladder.is_empty() {
            return Err(StoreError::Validation("task ladder is empty".into()));
        }
        if task.previews.len() != task.ladder.len() {
            return Err(StoreError::Validation(format!(
                "{} previews for {} ladder rungs",
                task.previews.len(),
                task.ladder.len()
            )));
        }
        if task.ladder.iter().any(|s| !s.is_finite()) || !task.current_sigma.is_finite() {
            return Err(StoreError::Validation("ladder levels must be finite".into()));
        }
        let mut inner = self.lock();
        if inner.entries.contains_key(&task.task_id) {
            return Err(StoreError::Conflict(format!("task {} already exists", task.task_id)));
        }
        task.status = TaskStatus::Pending;
        let id = task.task_id.clone();
        inner.order.push(id.clone());
        inner.entries.insert(
            id.clone(),
            Entry {
                task,
                answer: None,
                delivered: false,
            },
        );
        inner.queries_total += 1;
        Ok(id)
    }

    /// Pending tasks in enqueue order.
    pub fn pending(&self) -> Vec<AnnotationTask> {
        let inner = self.lock();
        inner
            .order
            .iter()
            .filter_map(|id| inner.entries.get(id))
            .filter(|e| e.task.status == TaskStatus::Pending)
            .map(|e| e.task.clone())
            .collect()
    }

    pub fn get(&self, task_id: &str) -> Option<AnnotationTask> {
        self.lock().entries.get(task_id).map(|e| e.task.clone())
    }

    pub fn submit(&self, mut annotation: Annotation) -> Result<(), StoreError> {
        let mut inner = self.lock();
        let entry = inner
            .entries
            .get_mut(&annotation.task_id)
            .ok_or_else(|| StoreError::NotFound(format!("no task {}", annotation.task_id)))?;
        if entry.task.status == TaskStatus::Answered {
            return Err(StoreError::Conflict(format!(
                "task {} is already answered",
                annotation.task_id
            )));
        }
        // Exact membership: the client must send back one of the served values.
        if !entry.task.ladder.contains(&annotation.sigma_star) {
            return Err(StoreError::Validation(format!(
                "sigma_star {} is not a rung of the task ladder",
                annotation.sigma_star
            )));
        }
        if annotation.timestamp == 0 {
            annotation.timestamp = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs());
        }
        entry.task.status = TaskStatus::Answered;
        entry.answer = Some(annotation);
        drop(inner);
        self.answered.notify_all();
        Ok(())
    }

    pub fn status(&self) -> StoreStatus {
        let inner = self.lock();
        let answered = inner
            .entries
            .values()
            .filter(|e| e.task.status == TaskStatus::Answered)
            .count();
        StoreStatus {
            round: inner.round,
            pending: inner.entries.len() - answered,
            answered,
            queries_total: inner.queries_total,
        }
    }

    /// Blocks until every listed task is answered or `timeout` elapses and
    /// returns the answers not yet delivered. A second call never returns
    /// the same answer again.
    pub fn await_answers(&self, ids: &[String], timeout: Duration) -> Vec<Option<Annotation>> {
        let deadline = Instant::now() + timeout;
        let mut inner = self.lock();
        loop {
            let done = ids.iter().all(|id| {
                inner
                    .entries
                    .get(id)
                    .is_none_or(|e| e.task.status == TaskStatus::Answered)
            });
            let now = Instant::now();
            if done || now >= deadline {
                break;
            }
            inner = self
                .answered
                .wait_timeout(inner, deadline - now)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
        ids.iter()
            .map(|id| {
                let entry = inner.entries.get_mut(id)?;
                if entry.delivered {
                    return None;
                }
                let answer = entry.answer.clone()?;
                entry.delivered = true;
                Some(answer)
            })
            .collect()
    }

    /// Withdraws still-pending tasks (e.g. after a timeout); answered ones
    /// are kept for the record.
    pub fn cancel_pending(&self, ids: &[String]) -> usize {
        let mut inner = self.lock();
        let mut removed = 0;
        for id in ids {
            if inner
                .entries
                .get(id)
                .is_some_and(|e| e.task.status == TaskStatus::Pending)
            {
                inner.entries.remove(id);
                removed += 1;
            }
        }
        let Inner { order, entries, .. } = &mut *inner;
        order.retain(|id| entries.contains_key(id));
        removed
    }
}
