//! Safety-critical control of control-affine systems under mixed state-input
//! constraints, using projection-based backup control barrier functions.
//!
//! Mixed constraints H(x, u) >= 0 (state, input, or coupled quantities such
//! as power) are projected onto the state space along a backup controller,
//! h(x) = H(x, k_b(x)). A quadratic-program filter then minimally modifies a
//! desired controller subject to barrier rows sampled along the backup flow,
//! a terminal backup-set row, and the direct mixed rows — keeping the
//! computed invariant set forward invariant while every constraint holds.
//!
//! The crate ships the full inverted-pendulum study (angle, torque and power
//! limits), a high-order-CBF baseline for comparison, grid-based
//! invariant-set analysis, and a deterministic simulation harness. Grid
//! classification is data-parallel via rayon behind the `parallel` feature
//! (on by default); disabling it yields a dependency-free sequential build
//! with identical results.

pub mod constraint;
pub mod dynamics;
mod error;
pub mod filter;
pub mod flow;
pub mod params;
pub mod qp;
pub mod sets;
pub mod sim;

pub use error::{Error, Result};
pub use params::PendulumParams;
