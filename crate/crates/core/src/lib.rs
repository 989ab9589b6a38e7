//! Desk-scale laboratory for RIS-aided uplink localization in multipath
//! indoor environments.
//!
//! The crate synthesizes narrowband SISO channels with image-source ray
//! tracing ([`geometry`], [`propagation`]), trains an LSTM-based active
//! sensing controller that reconfigures the RIS from grouped pilots
//! ([`autodiff`], [`model`], [`training`]), and benchmarks it against
//! fingerprinting and non-adaptive baselines ([`baselines`]).

pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod geometry;
pub mod io;
pub mod model;
pub mod propagation;
pub mod scene;
pub mod training;

#[cfg(any(test, feature = "testkit"))]
pub mod testkit;

pub use geometry::{MaterialProperties, PathGeometry, Room, SurfacePose, Wall};
pub use propagation::{ChannelRealization, PathChannel, RadioConfig, RisConfig, RisGeometry};
pub use scene::Scene;

pub use ndarray;
pub use num_complex;
