//! Model-free inverse reinforcement learning of network-coupled mean-field
//! LQG feedback strategies, with a model-based ground-truth layer for
//! validation.
//!
//! The crate is organized in three layers:
//!
//! * system description and assumption checking ([`model`], [`demo`]),
//! * model-based solutions of the coupled Riccati equations ([`riccati`],
//!   [`gains`]) and trajectory generation ([`simulator`]),
//! * the data-driven learner ([`irl`]) and the experiment harness
//!   ([`harness`]) that ties the stages together.

pub mod demo;
pub mod error;
pub mod gains;
pub mod harness;
pub mod irl;
pub mod linalg;
pub mod model;
pub mod riccati;
pub mod simulator;

pub use error::{Error, Result};
