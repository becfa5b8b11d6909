pub mod alignment;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod network;
pub mod training;

pub use error::{Error, Result};
