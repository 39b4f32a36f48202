//! Seed derivation and sampling helpers.
//!
//! One 64-bit master seed drives a run; every component derives its own
//! sub-seed as a stable hash of the master seed and the component name, so
//! components never perturb each other's random streams.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive the sub-seed for a named component from a master seed.
pub fn sub_seed(master: u64, component: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(component.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

/// RNG for a named component of a run.
pub fn component_rng(master: u64, component: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(master, component))
}

/// One standard-normal draw (Box-Muller, cosine branch).
pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    // gen::<f64>() lies in [0, 1); flip so the log argument stays positive.
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
