//! Depth estimation from paired RGB and thermal (THR) images.
//!
//! The crate is organized around a small reverse-mode autodiff tensor core
//! ([`tensor`]) on top of which the network blocks are composed: two
//! ConvNeXt-style encoders ([`backbone`]), the edge-guided cross-modal fusion
//! block ([`egfusion`]), a UNet-style decoder ([`decoder`]), training losses
//! ([`loss`]) and depth evaluation metrics ([`metrics`]). A procedural scene
//! generator and the image/depth file formats live in [`data`]; model
//! assembly, the optimizer and the training loop in [`engine`]; the operator
//! CLI in [`cli`].

pub mod backbone;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod egfusion;
pub mod engine;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod params;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
