//! Instrumentation counters threaded through every estimator.
//!
//! Operation counts use a fixed convention, stated here once and relied on by
//! the benchmark records:
//!
//! * multiply-accumulate: 2 flops, no fused discount
//! * standalone add / sub / mul / div: 1 flop
//! * `exp`, `log`, `sqrt`: 1 flop
//! * comparisons, copies, index arithmetic: not counted
//!
//! Memory is an analytic model, not allocator telemetry: each stage reports
//! the bytes of its live numeric buffers via [`CostMeter::alloc`] /
//! [`CostMeter::free`], and `peak_bytes` keeps the high-water mark. Inputs
//! are registered once by the caller so stage peaks are comparable across
//! estimators.

use std::sync::atomic::{AtomicI64, AtomicU64, Ordering};

/// Flop counter plus live/peak byte accounting. Cheap enough to thread
/// everywhere; uses relaxed atomics so shared references suffice.
#[derive(Debug, Default)]
pub struct CostMeter {
    flops: AtomicU64,
    live_bytes: AtomicI64,
    peak_bytes: AtomicU64,
}

impl CostMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_flops(&self, n: u64) {
        self.flops.fetch_add(n, Ordering::Relaxed);
    }

    /// Register `bytes` of buffer as live and bump the peak if needed.
    pub fn alloc(&self, bytes: u64) {
        let live = self.live_bytes.fetch_add(bytes as i64, Ordering::Relaxed) + bytes as i64;
        let live = live.max(0) as u64;
        self.peak_bytes.fetch_max(live, Ordering::Relaxed);
    }

    /// Release buffer bytes registered earlier with [`CostMeter::alloc`].
    pub fn free(&self, bytes: u64) {
        self.live_bytes.fetch_sub(bytes as i64, Ordering::Relaxed);
    }

    pub fn flops(&self) -> u64 {
        self.flops.load(Ordering::Relaxed)
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes.load(Ordering::Relaxed).max(0) as u64
    }

    pub fn peak_bytes(&self) -> u64 {
        self.peak_bytes.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peak_tracks_high_water_mark() {
        let m = CostMeter::new();
        m.alloc(100);
        m.alloc(50);
        m.free(120);
        m.alloc(10);
        assert_eq!(m.peak_bytes(), 150);
        assert_eq!(m.live_bytes(), 40);
    }

    #[test]
    fn flops_accumulate() {
        let m = CostMeter::new();
        m.add_flops(3);
        m.add_flops(4);
        assert_eq!(m.flops(), 7);
    }
}
