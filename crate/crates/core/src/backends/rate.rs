use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::Rng;

use super::BackendError;

/// Exponential backoff: attempt `k` (1-based) waits
/// `base * 2^(k-1)`, stretched by up to 25% of jitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff: Duration,
    pub jitter: bool,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_backoff: Duration::from_secs(1), jitter: true }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; for tests.
    pub fn immediate(max_attempts: u32) -> Self {
        Self { max_attempts, base_backoff: Duration::ZERO, jitter: false }
    }

    pub fn backoff(&self, failed_attempt: u32) -> Duration {
        let exp = failed_attempt.saturating_sub(1).min(16);
        let base = self.base_backoff.saturating_mul(1u32 << exp);
        if self.jitter && !base.is_zero() {
            base.mul_f64(1.0 + rand::rng().random_range(0.0..0.25))
        } else {
            base
        }
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or the
    /// attempt budget is spent. Returns the value and the number of retries
    /// that were needed.
    pub fn run<T>(&self, mut op: impl FnMut(u32) -> Result<T, BackendError>) -> Result<(T, u32), BackendError> {
        let attempts = self.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok((v, attempt - 1)),
                Err(e) if attempt < attempts && e.is_retryable() => {
                    let wait = self.backoff(attempt);
                    tracing::warn!(attempt, ?wait, error = %e, "retrying backend call");
                    if !wait.is_zero() {
                        std::thread::sleep(wait);
                    }
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

#[derive(Debug)]
struct BucketState {
    tokens: f64,
    last_s: f64,
}

/// Token bucket limiter: capacity `burst` tokens refilled at `rate` per
/// second. Time is measured in seconds since the bucket's origin so the
/// arithmetic can be driven by a simulated clock.
#[derive(Debug)]
pub struct TokenBucket {
    rate: f64,
    burst: f64,
    origin: Instant,
    state: Mutex<BucketState>,
}

impl TokenBucket {
    pub fn new(rate_per_s: f64, burst: f64) -> Self {
        let burst = burst.max(1.0);
        Self {
            rate: rate_per_s,
            burst,
            origin: Instant::now(),
            state: Mutex::new(BucketState { tokens: burst, last_s: 0.0 }),
        }
    }

    /// Bucket sized to one second of traffic.
    pub fn per_second(rate_per_s: f64) -> Self {
        Self::new(rate_per_s, rate_per_s.ceil())
    }

    pub fn burst(&self) -> f64 {
        self.burst
    }

    /// Takes a token at simulated time `now_s` or reports how long to wait.
    pub fn try_take_at(&self, now_s: f64) -> Result<(), Duration> {
        let mut st = self.state.lock().expect("bucket poisoned");
        if now_s > st.last_s {
            st.tokens = (st.tokens + (now_s - st.last_s) * self.rate).min(self.burst);
            st.last_s = now_s;
        }
        // the tolerance keeps float residue from producing zero-length waits
        if st.tokens >= 1.0 - 1e-9 {
            st.tokens = (st.tokens - 1.0).max(0.0);
            Ok(())
        } else {
            Err(Duration::from_secs_f64((1.0 - st.tokens) / self.rate).max(Duration::from_nanos(1)))
        }
    }

    /// Blocks until a token is available, giving up after `deadline`.
    pub fn acquire(&self, deadline: Duration) -> Result<(), BackendError> {
        let start = Instant::now();
        loop {
            match self.try_take_at(self.origin.elapsed().as_secs_f64()) {
                Ok(()) => return Ok(()),
                Err(wait) => {
                    if start.elapsed() + wait > deadline {
                        return Err(BackendError::RateLimitExceeded { waited_ms: start.elapsed().as_millis() as u64 });
                    }
                    std::thread::sleep(wait);
                }
            }
        }
    }
}
