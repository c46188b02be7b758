//! Attention branch networks whose attention maps can be edited by a person
//! and fed back into fine-tuning.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]), the network itself ([`model`]), base training and
//! map-guided fine-tuning ([`train`]), tools that turn brush strokes, bubble
//! clicks and segmentation masks into attention maps ([`editing`]),
//! deletion/insertion/MSE evaluation ([`metrics`]) and a synthetic dataset
//! with on-disk formats ([`data`]).

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod editing;
mod error;
pub mod image;
pub mod map;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use image::Image;
pub use map::AttentionMap;
pub use model::{build_model, AbnModel, Mechanism, ModelConfig, ParamGroup};
pub use tensor::Tensor;
