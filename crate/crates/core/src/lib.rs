//! Vision transformers trained with block-wise self-distillation and tested
//! on held-out synthetic domains, at desk scale: a small autodiff engine, a
//! monolithic ViT whose every block can feed the shared classifier, the
//! random sub-model distillation objective, a synthetic multi-domain dataset
//! and a leave-one-domain-out protocol.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod distill;
pub mod error;
pub mod protocol;
pub mod vit;

pub use error::{Error, Result};
