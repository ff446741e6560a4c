pub mod error;
pub mod experiment;
pub mod features;
pub mod fem;
pub mod io;
pub mod microstructure;
pub mod rng;
pub mod surrogate;
pub mod training;

pub use error::{Error, Result};
