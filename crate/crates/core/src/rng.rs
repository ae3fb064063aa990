//! Seed derivation.
//!
//! All randomness flows from one master seed. Named components get their own
//! seed through [`derive_seed`] (SHA-256 over the label), and simulations split
//! each period into independent ChaCha streams keyed by `(t, lane)` so that a
//! policy drawing more or fewer numbers never shifts the churn or spread draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Sub-step lanes of one simulated period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lane {
    Churn = 0,
    Seed = 1,
    Spread = 2,
    Policy = 3,
}

const LANES: u64 = 4;

/// Seed for a labeled component, e.g. `derive_seed(master, "panel")`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seed for the `index`-th member of a labeled family (runs, draws, agents).
pub fn derive_indexed(master: u64, label: &str, index: u64) -> u64 {
    derive_seed(master, &format!("{label}/{index}"))
}

pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Per-period random streams of one trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodRng {
    pub seed: u64,
    pub t: u64,
}

impl PeriodRng {
    pub fn new(seed: u64, t: u64) -> Self {
        Self { seed, t }
    }

    pub fn lane(&self, lane: Lane) -> Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.t.wrapping_mul(LANES).wrapping_add(lane as u64));
        rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn labeled_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "panel"), derive_seed(7, "panel"));
        assert_ne!(derive_seed(7, "panel"), derive_seed(7, "eval"));
        assert_ne!(derive_seed(7, "panel"), derive_seed(8, "panel"));
    }

    #[test]
    fn lanes_are_independent_streams() {
        let p = PeriodRng::new(3, 10);
        let a: u64 = p.lane(Lane::Churn).random();
        let b: u64 = p.lane(Lane::Spread).random();
        let a2: u64 = p.lane(Lane::Churn).random();
        assert_eq!(a, a2);
        assert_ne!(a, b);
        let next: u64 = PeriodRng::new(3, 11).lane(Lane::Churn).random();
        assert_ne!(a, next);
    }
}
