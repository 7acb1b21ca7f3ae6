pub mod backbone;
pub mod config;
pub mod error;
pub mod evalsuite;
pub mod image;
pub mod objectives;
pub mod rng;
pub mod synthgen;
pub mod trainer;
pub mod verify;
pub mod views;

pub use error::{Error, Result};

pub use candle_core::DType;
