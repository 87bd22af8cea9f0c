//! Derivative feedback control workbench for a two-disk active magnetic
//! levitation plant.
//!
//! Two data-driven routes to the optimal derivative feedback gain are
//! provided and can be cross-checked against each other and against the
//! model-based Riccati solution:
//!
//! * [`mfpi`]: model-free, multi-epoch policy iteration driven directly by
//!   closed-loop trajectory data (biased state measurements allowed).
//! * [`sysid`]: DMDc identification refined by prediction-error
//!   minimization, followed by model-based design in [`dfc`].
//!
//! [`maglev`] supplies the nonlinear plant and its linearization and
//! [`sim`] produces the trajectories both routes consume.

pub mod dfc;
pub mod error;
pub mod lin_model;
pub mod linalg;
pub mod maglev;
pub mod mfpi;
pub mod sim;
pub mod sysid;

pub use error::{DfcError, Result};
pub use lin_model::{closed_loop_matrix, is_hurwitz, CostWeights, Gain, StateSpaceModel};

/// Version of this library, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
