//! Impulse control of piecewise-deterministic Markov processes: model
//! loading and validation, the one-step optimality operators, approximate
//! value iteration, and simulation of the controlled process.

// `!(x > 0.0)` is used deliberately so that NaN fails range checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod controlled;
pub mod dynamics;
pub mod error;
pub mod expr;
pub mod model;
pub mod numerics;
pub mod operators;
pub mod stats;
pub mod valuefn;

pub use error::{Error, Result};
pub use model::{load_model, load_model_file, ModeId, PdmpModel, StatePoint};
