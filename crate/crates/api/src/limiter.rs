use std::time::Duration;

use tokio::sync::Mutex;
use tokio::time::Instant;

/// Spaces request starts at least `1 / rate` seconds apart across every
/// task sharing the limiter.
#[derive(Debug)]
pub struct RateLimiter {
    interval: Duration,
    next: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(per_second: f64) -> Self {
        Self {
            interval: Duration::from_secs_f64(1.0 / per_second),
            next: Mutex::new(None),
        }
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    /// Waits for the next free slot and claims it.
    pub async fn acquire(&self) {
        // Holding the lock while sleeping hands out slots in arrival order.
        let mut next = self.next.lock().await;
        let now = Instant::now();
        let slot = match *next {
            Some(t) if t > now => {
                tokio::time::sleep_until(t).await;
                t
            }
            _ => now,
        };
        *next = Some(slot + self.interval);
    }
}
