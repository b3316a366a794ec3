use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// Shared counter of floats retained by live tapes.
///
/// Several tapes may report into one meter; the meter keeps the running
/// total and its high-water mark. Tapes add on record and subtract on drop.
#[derive(Clone, Debug, Default)]
pub struct MemoryMeter {
    inner: Arc<Counters>,
}

#[derive(Debug, Default)]
struct Counters {
    live: AtomicUsize,
    peak: AtomicUsize,
}

impl MemoryMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn live(&self) -> usize {
        self.inner.live.load(Ordering::Relaxed)
    }

    pub fn peak(&self) -> usize {
        self.inner.peak.load(Ordering::Relaxed)
    }

    /// Restarts the high-water mark at the current live value.
    pub fn reset_peak(&self) {
        self.inner.peak.store(self.live(), Ordering::Relaxed);
    }

    pub(crate) fn acquire(&self, n: usize) {
        let now = self.inner.live.fetch_add(n, Ordering::Relaxed) + n;
        self.inner.peak.fetch_max(now, Ordering::Relaxed);
    }

    pub(crate) fn release(&self, n: usize) {
        self.inner.live.fetch_sub(n, Ordering::Relaxed);
    }
}
