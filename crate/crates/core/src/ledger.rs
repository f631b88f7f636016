//! Byte accounting for tensor payloads.
//!
//! Every tensor buffer reports its size here when it is created and again
//! when it is dropped. Counters are thread-local so concurrently running
//! computations (e.g. parallel test threads) do not see each other.

use std::cell::Cell;

use serde::Serialize;

thread_local! {
    static CURRENT: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
}

pub(crate) fn acquire(bytes: usize) {
    CURRENT.with(|c| {
        let now = c.get() + bytes;
        c.set(now);
        PEAK.with(|p| {
            if now > p.get() {
                p.set(now);
            }
        });
    });
}

pub(crate) fn release(bytes: usize) {
    CURRENT.with(|c| c.set(c.get().saturating_sub(bytes)));
}

/// Snapshot of the calling thread's tensor-payload accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AllocationLedger {
    pub current: usize,
    pub peak: usize,
}

impl AllocationLedger {
    pub fn snapshot() -> Self {
        AllocationLedger {
            current: CURRENT.with(Cell::get),
            peak: PEAK.with(Cell::get),
        }
    }

    /// Starts a new phase: the peak collapses to the bytes currently live.
    pub fn reset_peak() {
        let now = CURRENT.with(Cell::get);
        PEAK.with(|p| p.set(now));
    }
}

/// Measures the transient peak of one phase: the highest live byte count
/// reached above the bytes that were already live when the phase began.
#[derive(Debug)]
pub struct PhaseMeter {
    baseline: usize,
}

impl PhaseMeter {
    pub fn start() -> Self {
        AllocationLedger::reset_peak();
        PhaseMeter {
            baseline: CURRENT.with(Cell::get),
        }
    }

    pub fn transient_peak(&self) -> usize {
        PEAK.with(Cell::get).saturating_sub(self.baseline)
    }
}
