//! Counts full parameter-set materializations.
//!
//! The process-wide total is atomic. Each thread also keeps its own tally so
//! that a single-threaded training run can be measured while other threads
//! (for example parallel tests) materialize models of their own.

use std::cell::Cell;
use std::sync::atomic::{AtomicUsize, Ordering};

static TOTAL: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static LOCAL: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn record_materialization() {
    TOTAL.fetch_add(1, Ordering::SeqCst);
    LOCAL.with(|c| c.set(c.get() + 1));
}

/// Process-wide number of full parameter sets materialized so far.
pub fn allocation_counter() -> usize {
    TOTAL.load(Ordering::SeqCst)
}

/// Runs `f` and returns how many parameter sets this thread materialized meanwhile.
pub fn count_materializations<R>(f: impl FnOnce() -> R) -> (R, usize) {
    let before = LOCAL.with(Cell::get);
    let out = f();
    let after = LOCAL.with(Cell::get);
    (out, after - before)
}
