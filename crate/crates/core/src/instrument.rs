//! Per-thread counters for tensor memory and arithmetic work.
//!
//! Every [`Tensor`](crate::Tensor) registers its element count on creation and
//! releases it on drop, so the peak number of live elements over a region of
//! code can be measured. Forward operators also add their nominal FLOP count.
//! Counters are thread-local; worker threads inside an operator never create
//! tensors, so a measurement taken on the calling thread is complete.

use std::cell::Cell;
use std::sync::atomic::{AtomicBool, Ordering};

thread_local! {
    static LIVE: Cell<usize> = const { Cell::new(0) };
    static PEAK: Cell<usize> = const { Cell::new(0) };
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

static STRICT: AtomicBool = AtomicBool::new(false);

/// Serializes all internal loops. Results are already independent of thread
/// count; strict mode additionally pins execution to the calling thread.
pub fn set_strict(on: bool) {
    STRICT.store(on, Ordering::SeqCst);
}

pub fn is_strict() -> bool {
    STRICT.load(Ordering::Relaxed)
}

pub(crate) fn alloc(elems: usize) {
    LIVE.with(|live| {
        let now = live.get() + elems;
        live.set(now);
        PEAK.with(|peak| {
            if now > peak.get() {
                peak.set(now)
            }
        });
    });
}

pub(crate) fn free(elems: usize) {
    LIVE.with(|live| live.set(live.get().saturating_sub(elems)));
}

pub(crate) fn add_flops(n: u64) {
    FLOPS.with(|f| f.set(f.get() + n));
}

/// Elements currently held by live tensors on this thread.
pub fn live_elements() -> usize {
    LIVE.with(Cell::get)
}

/// Resets the peak to the current live count.
pub fn reset_peak() {
    let live = live_elements();
    PEAK.with(|p| p.set(live));
}

pub fn peak_elements() -> usize {
    PEAK.with(Cell::get)
}

pub fn reset_flops() {
    FLOPS.with(|f| f.set(0));
}

pub fn flops() -> u64 {
    FLOPS.with(Cell::get)
}
