pub mod config;
pub mod decoupling;
pub mod error;
pub mod grid;
pub mod limit;
pub mod noise;
pub mod riccati;
pub mod simulate;
pub mod strategy;

pub use error::{Error, Result};
pub mod output;
pub mod experiment;
