//! Process-wide cap on sample-level worker threads. Results never depend
//! on the cap — parallel reductions in this crate are integer merges or
//! independent per-file writes — so it only tunes resource use.

use std::sync::atomic::{AtomicUsize, Ordering};

static WORKER_CAP: AtomicUsize = AtomicUsize::new(0);

/// Caps sample-level parallelism in dataset generation and evaluation.
/// 0 restores the automatic choice (available cores, at most 8).
pub fn set_worker_cap(n: usize) {
    WORKER_CAP.store(n, Ordering::Relaxed);
}

/// Worker count for a loop over `items` independent units.
pub(crate) fn workers_for(items: usize) -> usize {
    let cap = WORKER_CAP.load(Ordering::Relaxed);
    let limit = if cap == 0 {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(8)
    } else {
        cap
    };
    limit.min(items.max(1)).max(1)
}
