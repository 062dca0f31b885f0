//! Procedural stand-in for captured scenes: analytic priors for shoebox
//! rooms and image-source ground-truth audio.

mod dataset;
mod geometry;
mod ism;
mod points;
mod render;

pub use dataset::*;
pub use geometry::*;
pub use ism::*;
pub use points::*;
pub use render::*;
