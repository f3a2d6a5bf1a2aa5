//! Tabular preference-optimization laboratory.
//!
//! Policies are logit tables over finite prompt and response spaces. The
//! crate evaluates SFT, RLHF and DPO objectives exactly, computes their
//! closed-form optima, trains policies by deterministic gradient descent,
//! and checks the structural properties of DPO numerically.

pub mod datagen;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod io;
pub mod losses;
pub mod matrix;
pub mod numeric;
pub mod preference;
pub mod rng;
pub mod solvers;
pub mod tabular;
pub mod theory;
pub mod trainer;

pub use error::{Error, Result};
pub use matrix::Matrix;
