pub mod audio;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod features;
pub mod models;
pub mod nn;
pub mod preprocess;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
