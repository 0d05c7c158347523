//! Cross-modal, cross-domain training for unsupervised LiDAR semantic
//! segmentation, on procedurally generated camera + LiDAR scenes.

pub mod ablation;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod mixing;
pub mod nets;
pub mod optim;
pub mod pseudo;
pub mod real;
pub mod scene;
pub mod seed;
pub mod snapshot;
pub mod trainer;

pub use error::{Error, Result};
