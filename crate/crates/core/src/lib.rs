//! Compressive diffusion LMS: simulation and weighted-energy theory.
pub mod blockalg;
pub mod config;
pub mod error;
pub mod metrics;
pub mod netmodel;
pub mod presets;
pub mod rng;
pub mod simulator;
pub mod theory;
pub use error::{Error, Result};
