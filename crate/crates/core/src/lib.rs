//! Reservoir-network surrogate forecasting with hidden-space data assimilation.
//!
//! The crate trains echo-state style recurrent networks on Lorenz-96
//! trajectories and runs cycled state estimation directly in the network's
//! hidden space: direct insertion, an ensemble transform Kalman filter,
//! and strong-constraint incremental 4D-Var with matrix-free tangent-linear
//! and adjoint operators. Domain localization scales the same machinery to
//! larger cyclic domains by training one network per patch.

pub mod assimilation;
pub mod error;
pub mod harness;
pub mod l96;
pub mod linalg;
pub mod localization;
pub mod lyapunov;
pub mod macro_training;
pub mod metrics;
pub mod reservoir;
pub mod rng;

pub use error::{Error, Result};
