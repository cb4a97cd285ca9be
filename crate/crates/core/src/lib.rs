//! Spatio-temporal pruning of spiking transformers.

pub mod config;
pub mod cost;
pub mod data;
pub mod engine;
pub mod error;
pub mod importance;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod spatial;
pub mod studies;
pub mod temporal;
pub mod trainer;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/spiking-encoder.md")]
    pub mod spiking_encoder {}
    #[doc = include_str!("../../../book/src/cost.md")]
    pub mod cost {}
    #[doc = include_str!("../../../book/src/spatial.md")]
    pub mod spatial {}
    #[doc = include_str!("../../../book/src/temporal.md")]
    pub mod temporal {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    pub mod experiments {}
}
