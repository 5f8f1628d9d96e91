//! Wait-loop backoff shared by attach, barrier, descriptor, and lock spins.
//!
//! The runtime's PEs are full processes that may outnumber cores, so a wait
//! loop that only spins can starve the very peer it waits for. Escalate:
//! a short busy phase for the uncontended case, then yields, then sleeps
//! with exponential growth capped low enough to keep barrier latency flat.

use std::time::{Duration, Instant};

use crate::error::PoshError;

const SPIN_ITERS: u32 = 64;
const YIELD_ITERS: u32 = 192;
const SLEEP_BASE_US: u64 = 50;
const SLEEP_CAP_US: u64 = 1_000;

/// Escalating backoff. One instance per logical wait.
pub(crate) struct Backoff {
    iters: u32,
    started: Instant,
    deadline: Option<Duration>,
}

impl Backoff {
    /// Unbounded wait (production default: a lost peer means a hang, which
    /// the launcher-level watchdog or the user handles).
    pub(crate) fn new() -> Self {
        Backoff { iters: 0, started: Instant::now(), deadline: None }
    }

    /// Wait bounded by `limit`; [`Backoff::step`] reports expiry.
    pub(crate) fn with_deadline(limit: Duration) -> Self {
        Backoff { iters: 0, started: Instant::now(), deadline: Some(limit) }
    }

    /// Wait bounded by the debug-mode watchdog, if one is configured.
    /// `POSH_WATCHDOG_MS` overrides the 60 s default; without the
    /// `debug-mode` feature waits are unbounded.
    pub(crate) fn for_collective() -> Self {
        if cfg!(feature = "debug-mode") {
            let ms = std::env::var("POSH_WATCHDOG_MS")
                .ok()
                .and_then(|v| v.parse::<u64>().ok())
                .unwrap_or(60_000);
            Backoff::with_deadline(Duration::from_millis(ms))
        } else {
            Backoff::new()
        }
    }

    /// Performs one backoff step. Returns an error only when a deadline is
    /// set and has passed; `what` names the condition for the message.
    pub(crate) fn step(&mut self, what: &str) -> Result<(), PoshError> {
        if let Some(limit) = self.deadline {
            if self.started.elapsed() >= limit {
                return Err(PoshError::Watchdog {
                    waited_ms: self.started.elapsed().as_millis() as u64,
                    what: what.to_string(),
                });
            }
        }
        if self.iters < SPIN_ITERS {
            std::hint::spin_loop();
        } else if self.iters < SPIN_ITERS + YIELD_ITERS {
            std::thread::yield_now();
        } else {
            let shift = ((self.iters - SPIN_ITERS - YIELD_ITERS) / 64).min(8);
            let us = (SLEEP_BASE_US << shift).min(SLEEP_CAP_US);
            std::thread::sleep(Duration::from_micros(us));
        }
        self.iters = self.iters.saturating_add(1);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deadline_fires() {
        let mut b = Backoff::with_deadline(Duration::from_millis(20));
        let mut fired = false;
        for _ in 0..1_000_000 {
            if b.step("never-true condition").is_err() {
                fired = true;
                break;
            }
        }
        assert!(fired, "bounded wait must expire");
    }

    #[test]
    fn unbounded_never_errors_quickly() {
        let mut b = Backoff::new();
        for _ in 0..500 {
            b.step("condition").unwrap();
        }
    }
}
