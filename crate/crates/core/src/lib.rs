//! Koopman latent dynamics from image observations, with an EDMD baseline.

pub mod checkpoint;
pub mod dataset;
pub mod dynamics;
pub mod edmd;
pub mod error;
pub mod evalreport;
pub mod koopman;
pub mod netcore;
pub mod pgm;
pub mod render;
pub mod training;

pub use error::{Error, Result};
