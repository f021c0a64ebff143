//! Deterministic simulator of 3D-parallel training jobs, with the control
//! plane, diagnostics, checkpointing and span analytics that run around it.

pub mod bubbles;
pub mod checkpoint;
pub mod cluster;
pub mod control;
pub mod diagnostics;
pub mod error;
pub mod groupinit;
pub mod observe;
mod rng;
pub mod runner;
pub mod scenario;
pub mod schedule;
pub mod sim;

pub use error::{Error, Result};
