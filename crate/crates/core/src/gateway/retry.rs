use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use rand::Rng;

/// Exponential backoff with jitter, capped at three retries.
///
/// The delay before retry `n` (0-based) is `base * 2^n` plus a jitter below
/// `base * 2^(n-1)`, which keeps successive delays strictly increasing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    max_retries: u32,
    base: Duration,
}

pub const MAX_RETRIES: u32 = 3;

impl Default for RetryPolicy {
    fn default() -> Self {
        Self::new(MAX_RETRIES, Duration::from_millis(500))
    }
}

impl RetryPolicy {
    pub fn new(max_retries: u32, base: Duration) -> Self {
        Self {
            max_retries: max_retries.min(MAX_RETRIES),
            base,
        }
    }

    pub fn max_retries(&self) -> u32 {
        self.max_retries
    }

    pub fn delay<R: Rng>(&self, attempt: u32, rng: &mut R) -> Duration {
        let nominal = self.base.saturating_mul(1 << attempt.min(16));
        let jitter_cap = nominal.as_nanos() as u64 / 2;
        let jitter = if jitter_cap == 0 {
            0
        } else {
            rng.gen_range(0..jitter_cap)
        };
        nominal + Duration::from_nanos(jitter)
    }
}

#[derive(Debug)]
struct Bucket {
    tokens: f64,
    last: Instant,
}

/// Token bucket shared by every caller of one provider.
#[derive(Debug, Clone)]
pub struct RateLimiter {
    rate: f64,
    capacity: f64,
    bucket: Arc<Mutex<Bucket>>,
}

impl RateLimiter {
    pub fn per_second(rate: f64, burst: u32) -> Self {
        let capacity = burst.max(1) as f64;
        Self {
            rate: rate.max(f64::MIN_POSITIVE),
            capacity,
            bucket: Arc::new(Mutex::new(Bucket {
                tokens: capacity,
                last: Instant::now(),
            })),
        }
    }

    /// Blocks until a token is available.
    pub fn acquire(&self) {
        loop {
            let wait = {
                let mut b = self.bucket.lock().expect("rate limiter lock");
                let now = Instant::now();
                let refill = now.duration_since(b.last).as_secs_f64() * self.rate;
                b.tokens = (b.tokens + refill).min(self.capacity);
                b.last = now;
                if b.tokens >= 1.0 {
                    b.tokens -= 1.0;
                    return;
                }
                Duration::from_secs_f64((1.0 - b.tokens) / self.rate)
            };
            std::thread::sleep(wait);
        }
    }
}
