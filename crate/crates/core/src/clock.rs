//! Time sources. Daemons run on the wall clock; tests drive a logical
//! clock so cache ttls, job lifetimes and scheduler deadlines are
//! deterministic.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{SystemTime, UNIX_EPOCH};

pub trait Clock: Send + Sync {
    /// Milliseconds since the epoch of the clock (UNIX epoch for the
    /// system clock, construction time for a logical clock).
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .unwrap_or_default()
            .as_millis() as u64
    }
}

/// Manually advanced clock shared by a whole test fleet.
#[derive(Default)]
pub struct LogicalClock(AtomicU64);

impl LogicalClock {
    pub fn new(start_ms: u64) -> Self {
        LogicalClock(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }

    pub fn set(&self, ms: u64) {
        self.0.store(ms, Ordering::SeqCst);
    }
}

impl Clock for LogicalClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}
