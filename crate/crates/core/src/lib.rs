//! Learned covariance dynamics for GNSS measurement noise.
//!
//! A small network maps arc-length position, speed and receiver quality
//! indicators to an SPD driving term `Q_k`; a diagonal, spectrally constrained
//! Lyapunov recursion turns the `Q_k` sequence into a smooth measurement
//! covariance `R_k`.

pub mod dynamics;
pub mod error;
pub mod eval;
pub mod features;
pub mod learn;
pub mod net;
pub mod spd;
pub mod world;

pub use dynamics::{CovTrajectory, EigenSet, SpectralConfig};
pub use error::{Error, Result};
pub use features::{FeatureVector, GnssQuality, ReferenceTrack, SessionRecord};
pub use net::{CoreModelParams, ModelConfig};
pub use spd::{LdlParams, SpdMatrix};
