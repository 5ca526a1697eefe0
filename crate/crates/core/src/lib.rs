//! Rotation-covariant actor-critic for sequential 3D molecular design.
//!
//! A molecule is built one atom at a time on a canvas. The [`env`] module
//! holds the decision process, [`agent`] the covariant policy and critic,
//! [`ppo`] the trainer, [`opt`] a classical baseline and [`bench`] the
//! experiment driver and structure metrics. Energies come from the
//! surrogate oracles in [`oracle`].

pub mod autodiff;
pub mod bench;
pub mod agent;
pub mod covariant;
pub mod env;
pub mod error;
pub mod opt;
pub mod oracle;
pub mod ppo;
pub mod so3;

pub use error::{Error, Result};

/// Cartesian 3-vector in Å.
pub type Vec3 = nalgebra::Vector3<f64>;
