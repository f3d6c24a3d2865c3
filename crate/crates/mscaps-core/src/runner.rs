//! Batch execution strategy for independent per-patch jobs.
//!
//! Training and inference fan out over patches whose graphs are independent.
//! Results come back in job order, and every consumer folds them
//! sequentially, so any runner that preserves order yields bit-identical
//! numbers to [`SequentialRunner`].

use alloc::vec::Vec;

/// Runs `count` independent jobs and returns their outputs in job order.
pub trait BatchRunner {
    fn run<T: Send>(&self, count: usize, job: &(dyn Fn(usize) -> T + Sync)) -> Vec<T>;
}

/// In-order single-threaded runner; the deterministic-mode reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialRunner;

impl BatchRunner for SequentialRunner {
    fn run<T: Send>(&self, count: usize, job: &(dyn Fn(usize) -> T + Sync)) -> Vec<T> {
        (0..count).map(job).collect()
    }
}
