//! Self-supervised pre-training of two-stage detectors driven by unsupervised
//! region proposals.
//!
//! Selective-search style proposals act as pseudo ground truth for a region
//! proposal network, and as the regions contrasted across three augmented
//! views by an online/target (EMA) network pair.

pub mod detector;
pub mod commands;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod numerics;
pub mod segmentation;
pub mod synth;
pub mod training;
pub mod views;

pub use error::{Error, Result};
pub use geometry::BBox;
pub use image::Image;
