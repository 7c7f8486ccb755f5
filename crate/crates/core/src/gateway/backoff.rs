use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Exponential backoff with jitter.
///
/// Jitter is drawn between the previous delay and the current ceiling, so the
/// sequence of delays for one request never decreases. The jitter stream is
/// seeded from the request's idempotency key.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: f64,
    pub cap: Duration,
    pub jitter: bool,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            base: Duration::from_millis(500),
            factor: 2.0,
            cap: Duration::from_secs(30),
            jitter: true,
        }
    }
}

impl Backoff {
    pub fn none() -> Self {
        Self { base: Duration::ZERO, factor: 1.0, cap: Duration::ZERO, jitter: false }
    }

    /// Upper bound of the delay before retry number `retry` (1-based).
    pub fn ceiling(&self, retry: u32) -> Duration {
        let exp = self.factor.powi(retry.saturating_sub(1) as i32);
        let secs = (self.base.as_secs_f64() * exp).min(self.cap.as_secs_f64());
        Duration::from_secs_f64(secs.max(0.0))
    }

    pub fn schedule(&self, key: &str) -> BackoffSchedule {
        let seed: [u8; 32] = Sha256::digest(key.as_bytes()).into();
        BackoffSchedule {
            policy: *self,
            rng: ChaCha8Rng::from_seed(seed),
            retry: 0,
            previous: Duration::ZERO,
        }
    }
}

pub struct BackoffSchedule {
    policy: Backoff,
    rng: ChaCha8Rng,
    retry: u32,
    previous: Duration,
}

impl BackoffSchedule {
    /// Delay before the next retry, at least `floor` (e.g. a Retry-After hint).
    pub fn next_delay(&mut self, floor: Option<Duration>) -> Duration {
        self.retry += 1;
        let ceiling = self.policy.ceiling(self.retry).max(self.previous);
        let mut delay = if self.policy.jitter {
            let span = ceiling.saturating_sub(self.previous).as_secs_f64();
            self.previous + Duration::from_secs_f64(span * self.rng.gen::<f64>())
        } else {
            ceiling
        };
        if let Some(floor) = floor {
            delay = delay.max(floor.min(self.policy.cap));
        }
        self.previous = delay;
        delay
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ceilings_double_until_cap() {
        let b = Backoff::default();
        assert_eq!(b.ceiling(1), Duration::from_millis(500));
        assert_eq!(b.ceiling(2), Duration::from_millis(1000));
        assert_eq!(b.ceiling(3), Duration::from_millis(2000));
        assert_eq!(b.ceiling(20), Duration::from_secs(30));
    }

    #[test]
    fn jittered_delays_never_decrease_and_respect_cap() {
        let b = Backoff::default();
        for key in ["a", "b", "some longer key"] {
            let mut s = b.schedule(key);
            let mut prev = Duration::ZERO;
            for retry in 1..=12 {
                let d = s.next_delay(None);
                assert!(d >= prev, "retry {retry}: {d:?} < {prev:?}");
                assert!(d <= b.ceiling(retry).max(prev));
                assert!(d <= b.cap);
                prev = d;
            }
        }
    }

    #[test]
    fn same_key_same_delays() {
        let b = Backoff::default();
        let a: Vec<_> = {
            let mut s = b.schedule("k");
            (0..5).map(|_| s.next_delay(None)).collect()
        };
        let c: Vec<_> = {
            let mut s = b.schedule("k");
            (0..5).map(|_| s.next_delay(None)).collect()
        };
        assert_eq!(a, c);
    }

    #[test]
    fn retry_after_raises_floor() {
        let b = Backoff { jitter: false, ..Backoff::default() };
        let mut s = b.schedule("k");
        assert_eq!(s.next_delay(Some(Duration::from_secs(3))), Duration::from_secs(3));
        // next ceiling (1 s) is below the previous delay, so it is held
        assert_eq!(s.next_delay(None), Duration::from_secs(3));
    }
}
