//! Numerical core for concept-based crystal generation: crystal geometry,
//! lattice reparameterization, local environments, vector quantization,
//! noise schedules, validity, structure matching and metrics.
//!
//! Routines are generic over [`Real`] (`f32` or `f64`); the aliases below
//! name the concrete instantiations used across the workspace.

pub mod crystal;
pub mod elements;
pub mod error;
pub mod io;
pub mod linalg;
pub mod matcher;
pub mod metrics;
pub mod oracle;
pub mod quantize;
pub mod scalar;
pub mod schedule;
pub mod synthetic;
pub mod taxonomy;
pub mod validity;

pub use crystal::{Crystal, LocalEnvironment, ReparamLattice};
pub use error::{Error, Result};
pub use linalg::Mat3;
pub use quantize::Codebook;
pub use scalar::Real;
pub use schedule::NoiseSchedule;
pub use taxonomy::CrystalFamily;

pub type Crystal64 = Crystal<f64>;
pub type Crystal32 = Crystal<f32>;
pub type Mat3f64 = Mat3<f64>;
pub type Codebook32 = Codebook<f32>;
pub type NoiseSchedule64 = NoiseSchedule<f64>;
pub type NoiseSchedule32 = NoiseSchedule<f32>;
