//! Per-endpoint concurrency and request-rate budgets.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

/// Counting semaphore bounding in-flight requests.
pub(super) struct ConcurrencyBudget {
    available: Mutex<usize>,
    freed: Condvar,
}

pub(super) struct Permit<'a> {
    budget: &'a ConcurrencyBudget,
}

impl ConcurrencyBudget {
    pub(super) fn new(limit: usize) -> Self {
        Self {
            available: Mutex::new(limit),
            freed: Condvar::new(),
        }
    }

    pub(super) fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().expect("budget poisoned");
        while *n == 0 {
            n = self.freed.wait(n).expect("budget poisoned");
        }
        *n -= 1;
        Permit { budget: self }
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.budget.available.lock().expect("budget poisoned") += 1;
        self.budget.freed.notify_one();
    }
}

/// Spaces request starts at least `1 / rps` apart.
pub(super) struct RateLimiter {
    interval: Duration,
    next_slot: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub(super) fn new(requests_per_second: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / requests_per_second),
            next_slot: Mutex::new(None),
        }
    }

    pub(super) fn wait_turn(&self) {
        let now = Instant::now();
        let slot = {
            let mut next = self.next_slot.lock().expect("rate limiter poisoned");
            let slot = next.map_or(now, |n| n.max(now));
            *next = Some(slot + self.interval);
            slot
        };
        if slot > now {
            std::thread::sleep(slot - now);
        }
    }
}
