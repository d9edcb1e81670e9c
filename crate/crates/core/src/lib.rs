//! Self-cyclic creative generation for click-through rate.

pub mod cli;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod logs;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod prompt;
pub mod reward;
pub mod rng;
pub mod serving;
pub mod world;

pub use error::{Error, Result};
