//! Dynamic photoacoustic computed tomography with a low-rank spatiotemporal model.

pub mod baseline;
mod error;
pub mod geometry;
pub mod io;
pub mod lowrank;
pub mod metrics;
pub mod operator;
pub mod phantoms;
pub mod solver;

pub use error::{Error, Result};
