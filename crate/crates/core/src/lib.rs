//! Multi-scale contrastive image-text rumor detection.

pub mod alignment;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod probe;
pub mod sclip;
pub mod text;
pub mod visual;

pub use error::{Error, Result};
