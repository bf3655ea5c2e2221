//! Fixtures shared by the benchmarks.

use lace_core::eval::random_spd;
use lace_core::learn::{InitialCondition, Mode, Objective, PreparedSession};
use lace_core::world::{gen_session, WorldConfig};
use lace_core::{EigenSet, SpdMatrix, SpectralConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `t` random SPD matrices of size `n`.
pub fn qd_sequence(n: usize, t: usize, seed: u64) -> Vec<SpdMatrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..t).map(|_| random_spd(&mut rng, n, 1.0).unwrap()).collect()
}

/// Eigenvalues spread over `[-1, -0.1]`.
pub fn eigen(n: usize) -> EigenSet {
    let lambdas: Vec<f64> = (0..n).map(|i| -0.1 - 0.9 * i as f64 / n.max(2) as f64).collect();
    EigenSet::from_lambdas(&lambdas, 0.05).unwrap()
}

/// One lap of the default world.
pub fn session(seed: u64) -> PreparedSession {
    let world = WorldConfig::default();
    let track = world.track.build().unwrap();
    PreparedSession::new(&gen_session(&world, 1, seed).unwrap(), &track).unwrap()
}

pub fn objective(mode: Mode) -> Objective {
    Objective {
        mode,
        spectral: SpectralConfig::default(),
        lambda_weight: mode.default_lambda_weight(),
        init: InitialCondition::Stationary,
        scale: 0.04,
    }
}
