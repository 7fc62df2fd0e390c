//! One-stage prompt-based continual learning at desk scale.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod harness;
pub mod numerics;
pub mod prompt;
pub mod qr;
pub mod rng;
pub mod vit;

pub use error::{Error, Result};
