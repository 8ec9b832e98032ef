//! Dynamic batching. [`Batcher`] is the single state machine behind both
//! the pure [`form_batches`] and the live per-model scheduler.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchPolicy {
    /// B, at least 1.
    pub max_batch: usize,
    /// W in milliseconds.
    pub window_ms: u64,
}

impl Default for BatchPolicy {
    fn default() -> Self {
        Self {
            max_batch: 8,
            window_ms: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch<T> {
    pub first_arrival_ms: u64,
    pub dispatch_ms: u64,
    pub jobs: Vec<T>,
}

/// Open batch accumulator. A batch opens with its first job and closes when
/// it holds `max_batch` jobs or `window_ms` after that first arrival.
#[derive(Debug)]
pub struct Batcher<T> {
    policy: BatchPolicy,
    first_arrival_ms: Option<u64>,
    pending: VecDeque<T>,
}

impl<T> Batcher<T> {
    pub fn new(policy: BatchPolicy) -> Self {
        Self {
            policy: BatchPolicy {
                max_batch: policy.max_batch.max(1),
                ..policy
            },
            first_arrival_ms: None,
            pending: VecDeque::new(),
        }
    }

    pub fn policy(&self) -> BatchPolicy {
        self.policy
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    /// When the open batch must be dispatched at the latest.
    pub fn deadline_ms(&self) -> Option<u64> {
        self.first_arrival_ms.map(|t| t + self.policy.window_ms)
    }

    /// Adds a job. Returns the batch if this arrival fills it; call
    /// [`Batcher::poll`] first so an expired window closes before the job
    /// is admitted.
    pub fn push(&mut self, arrival_ms: u64, job: T) -> Option<Batch<T>> {
        if self.first_arrival_ms.is_none() {
            self.first_arrival_ms = Some(arrival_ms);
        }
        self.pending.push_back(job);
        if self.pending.len() >= self.policy.max_batch {
            Some(self.take(arrival_ms))
        } else {
            None
        }
    }

    /// Closes the open batch if its window has expired by `now_ms`. The
    /// batch is stamped with its deadline, not `now_ms`.
    pub fn poll(&mut self, now_ms: u64) -> Option<Batch<T>> {
        let deadline = self.deadline_ms()?;
        (now_ms >= deadline).then(|| self.take(deadline))
    }

    /// Closes the open batch unconditionally, stamped with `now_ms`.
    pub fn flush(&mut self, now_ms: u64) -> Option<Batch<T>> {
        (!self.pending.is_empty()).then(|| self.take(now_ms))
    }

    fn take(&mut self, dispatch_ms: u64) -> Batch<T> {
        Batch {
            first_arrival_ms: self.first_arrival_ms.take().unwrap_or(dispatch_ms),
            dispatch_ms,
            jobs: self.pending.drain(..).collect(),
        }
    }
}

/// Groups time-ordered arrivals into batches. A job arriving exactly at the
/// window deadline still joins the open batch.
pub fn form_batches<T: Clone>(queue: &[(u64, T)], policy: &BatchPolicy) -> Vec<Batch<T>> {
    let mut batcher = Batcher::new(*policy);
    let mut out = Vec::new();
    for (arrival, job) in queue {
        if batcher.deadline_ms().is_some_and(|d| *arrival > d) {
            out.extend(batcher.poll(*arrival));
        }
        out.extend(batcher.push(*arrival, job.clone()));
    }
    if let Some(deadline) = batcher.deadline_ms() {
        out.extend(batcher.poll(deadline));
    }
    out
}
