//! Stereo depth, tool masking and surfel-based dynamic reconstruction of
//! deforming scenes, with a synthetic ground-truth simulator.

pub mod deformation;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod imaging;
pub mod io;
pub mod pipeline;
pub mod registration;
pub mod segmentation;
pub mod sim;
pub mod spatial;
pub mod stereo;
pub mod surfel;

pub use error::{Error, Result};
