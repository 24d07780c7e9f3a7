//! Adversarial purification testbed: a small autodiff engine, toy
//! classifiers and diffusion models, white- and black-box attacks, purifiers
//! trained toward opposite-adversarial-path reference points, guided reverse
//! diffusion, and dual-path purification with optimal-transport color
//! transfer.

pub mod error;
pub mod numcore;
pub mod rng;

pub use error::{Error, Result};
pub mod diffusion;
pub mod harness;
pub mod models;
pub mod attacks;
pub mod parallel;
pub mod oap;
pub mod dualpath;
pub mod granularity;
