//! Allocation-counting instrumentation for matrix buffers.
//!
//! Every `Matrix` buffer reports its size here on creation and drop, giving a
//! deterministic, machine-independent view of working memory. The benchmark
//! harness reads these counters instead of OS RSS.
//!
//! Counters are per-thread. `reset` starts a measurement scope; frees of
//! matrices born before the scope saturate at zero rather than underflow.

use std::cell::Cell;

thread_local! {
    static LIVE: Cell<u64> = const { Cell::new(0) };
    static PEAK: Cell<u64> = const { Cell::new(0) };
    static TOTAL: Cell<u64> = const { Cell::new(0) };
    static MAX_SINGLE: Cell<u64> = const { Cell::new(0) };
}

pub(crate) fn on_alloc(bytes: u64) {
    LIVE.with(|l| {
        let live = l.get() + bytes;
        l.set(live);
        PEAK.with(|p| {
            if live > p.get() {
                p.set(live);
            }
        });
    });
    TOTAL.with(|t| t.set(t.get() + bytes));
    MAX_SINGLE.with(|m| {
        if bytes > m.get() {
            m.set(bytes);
        }
    });
}

pub(crate) fn on_free(bytes: u64) {
    LIVE.with(|l| l.set(l.get().saturating_sub(bytes)));
}

/// Zeroes all counters for the current thread.
pub fn reset() {
    LIVE.with(|c| c.set(0));
    PEAK.with(|c| c.set(0));
    TOTAL.with(|c| c.set(0));
    MAX_SINGLE.with(|c| c.set(0));
}

/// Bytes currently held by live matrices allocated since the last reset.
pub fn live_bytes() -> u64 {
    LIVE.with(|c| c.get())
}

/// High-water mark of live bytes since the last reset.
pub fn peak_bytes() -> u64 {
    PEAK.with(|c| c.get())
}

/// Cumulative bytes allocated since the last reset.
pub fn total_allocated_bytes() -> u64 {
    TOTAL.with(|c| c.get())
}

/// Largest single matrix allocation since the last reset.
pub fn max_single_alloc_bytes() -> u64 {
    MAX_SINGLE.with(|c| c.get())
}
