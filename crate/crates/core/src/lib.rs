pub mod cli;
pub mod config;
pub mod dataset;
pub mod diffcore;
pub mod error;
pub mod losses;
pub mod nets;
pub mod seeds;
pub mod spatial;
pub mod synth;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};
