pub mod config;
pub mod dsp;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod numerics;
pub mod scene;
pub mod srn;
pub mod training;

pub use error::{Error, Result};
