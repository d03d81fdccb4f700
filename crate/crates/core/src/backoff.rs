//! Retry schedule for commits that lose a sequencing race.

use core::time::Duration;

use rand_core::RngCore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Backoff {
    pub base: Duration,
    pub factor: u32,
    /// Symmetric jitter as a fraction of the nominal delay.
    pub jitter: f64,
    /// Total attempts, counting the first send.
    pub max_attempts: u32,
}

impl Default for Backoff {
    fn default() -> Self {
        Self { base: Duration::from_millis(100), factor: 2, jitter: 0.2, max_attempts: 8 }
    }
}

impl Backoff {
    /// Delay before retry number `retry` (1-based), without jitter.
    pub fn nominal(&self, retry: u32) -> Duration {
        let exp = retry.saturating_sub(1).min(20);
        self.base.saturating_mul(self.factor.saturating_pow(exp))
    }

    /// Nominal delay scaled by a uniform factor in `[1 - jitter, 1 + jitter]`.
    pub fn delay(&self, retry: u32, rng: &mut impl RngCore) -> Duration {
        let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let scale = 1.0 + self.jitter * (2.0 * unit - 1.0);
        self.nominal(retry).mul_f64(scale)
    }

    pub fn exhausted(&self, attempts: u32) -> bool {
        attempts >= self.max_attempts
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn nominal_doubles_from_base() {
        let b = Backoff::default();
        assert_eq!(b.nominal(1), Duration::from_millis(100));
        assert_eq!(b.nominal(2), Duration::from_millis(200));
        assert_eq!(b.nominal(7), Duration::from_millis(6400));
    }

    #[test]
    fn jitter_stays_within_twenty_percent() {
        let b = Backoff::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for retry in 1..8 {
            for _ in 0..200 {
                let d = b.delay(retry, &mut rng).as_secs_f64();
                let n = b.nominal(retry).as_secs_f64();
                assert!(d >= n * 0.8 - 1e-9 && d <= n * 1.2 + 1e-9);
            }
        }
    }

    #[test]
    fn eight_attempts_max() {
        let b = Backoff::default();
        assert!(!b.exhausted(7));
        assert!(b.exhausted(8));
    }
}
