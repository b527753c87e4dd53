//! Simulation and analysis toolkit for coherent control of a spin-9/2 nuclear qudit.

pub mod error;
pub mod analysis;
pub mod dynamics;
pub mod lsq;
pub mod model;
pub mod protocols;
pub mod readout;
pub mod sequence;
pub mod spin_core;
pub mod synthesis;

pub use error::{Error, Result};
