//! Part-wise face shape codes: synthetic data, label codec, networks,
//! losses, gene algebra, training and evaluation.

pub mod error;
pub mod evalsuite;
pub mod image;
pub mod labelspace;
pub mod checkpoint;
pub mod genecore;
pub mod lossbank;
pub mod netzoo;
pub mod pipeline;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{FaceImage, Image};
pub use labelspace::{EditingMask, LabelClass, LabelMap, Part};
