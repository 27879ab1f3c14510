//! Sparse hierarchical memory layers for frozen Transformer encoders.
//!
//! [`memory`] holds the layer itself. [`backbone`] wires it (or the
//! [`adapter`] baseline) into a small frozen encoder, [`training`] fits the
//! plugin and head, and [`analysis`], [`accounting`] and [`bench`] inspect
//! the result. The guide under `book/` walks through each piece.

pub mod accounting;
pub mod adapter;
pub mod analysis;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod memory;
pub mod numerics;
pub mod training;
pub mod tensors;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    pub mod introduction {}
    #[doc = include_str!("../../../book/src/memory-layer.md")]
    pub mod memory_layer {}
    #[doc = include_str!("../../../book/src/compute.md")]
    pub mod compute {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
    #[doc = include_str!("../../../book/src/specialization.md")]
    pub mod specialization {}
    #[doc = include_str!("../../../book/src/accounting.md")]
    pub mod accounting {}
    #[doc = include_str!("../../../book/src/checkpoints.md")]
    pub mod checkpoints {}
}
