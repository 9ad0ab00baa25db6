//! First-integral-preserving neural differential equations.

pub mod config;
pub mod demo;
pub mod error;
pub mod eval;
pub mod finde;
pub mod integrators;
pub mod models;
pub mod systems;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
