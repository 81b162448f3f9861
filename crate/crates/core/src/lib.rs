//! Desk-scale audio-visual navigation laboratory.
//!
//! Everything numeric is generic over [`numerics::Scalar`] (`f32` for
//! training, `f64` for gradient checks); the aliases below fix the precision.

pub mod acoustics;
pub mod bench;
pub mod config;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod export;
pub mod metrics;
pub mod numerics;
pub mod policy;
pub mod world;

pub use error::{Error, Result};

pub type Array32 = numerics::Array<f32>;
pub type Array64 = numerics::Array<f64>;
pub type ParamSet32 = numerics::ParamSet<f32>;
pub type ParamSet64 = numerics::ParamSet<f64>;
