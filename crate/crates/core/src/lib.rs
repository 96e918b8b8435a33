pub mod cli;
pub mod dataio;
pub mod error;
pub mod evalmetrics;
pub mod fusion;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod rng;
pub mod seqmodel;
pub mod smoothing;

pub use error::{Error, Result};
