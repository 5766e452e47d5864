pub mod checkpoint;
pub mod corruption;
pub mod dataset;
pub mod discriminator;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod image;
pub mod losses;
pub mod perceptual;
pub mod rng;
pub mod scenes;
pub mod training;

pub use error::{Error, Result};
