//! Multi-stream generative policy learning.
//!
//! Trains conditional flow matching policies per object-centric coordinate
//! frame and composes them at inference time, either by ensembling the fully
//! integrated streams, by combining their velocity fields at every flow step,
//! or by flow composition with annealed MCMC correctors. Stream weights come
//! from progress schedules, predicted log variances, or parallel-sampling
//! variance estimates.
//!
//! The crate is `no_std` (with `alloc`); everything here is pure computation
//! on value types. File formats, plotting and the benchmark CLI live in the
//! companion `msg-cli` crate.

#![no_std]

extern crate alloc;

pub mod compose;
mod error;
pub mod flowmatch;
pub mod gaussref;
pub mod manifold;
pub mod nn;
pub mod streams;
pub mod tasks;

pub use error::{Error, Result};

/// Deterministic, portable RNG used wherever this crate seeds randomness.
pub fn seeded_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
pub(crate) mod testutil {
    use crate::manifold::{Pose, Quat};
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        Quat::exp([
            (rng.random::<f64>() * 2.0 - 1.0) * 2.5,
            (rng.random::<f64>() * 2.0 - 1.0) * 2.5,
            (rng.random::<f64>() * 2.0 - 1.0) * 2.5,
        ])
    }

    pub fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        Pose {
            position: [
                rng.random::<f64>() * 4.0 - 2.0,
                rng.random::<f64>() * 4.0 - 2.0,
                rng.random::<f64>() * 4.0 - 2.0,
            ],
            orientation: random_quat(rng),
        }
    }
}
