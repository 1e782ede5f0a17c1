pub mod error;
pub mod evaluation;
pub mod features;
pub mod losses;
pub mod manifest;
pub mod networks;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
