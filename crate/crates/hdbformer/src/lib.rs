//! Heterogeneous dual-branch RGB-D semantic segmentation.
//!
//! The crate implements the HDBFormer architecture end to end on the CPU:
//! a windowed-attention detail encoder and a convolutional base encoder for
//! RGB, the lightweight LDFormer depth encoder, the MIIM cross-modal fusion
//! module (pooled-query global attention + large-kernel local attention),
//! and a concat-and-project decoder. Everything runs on a small built-in
//! tensor library with reverse-mode autodiff, so the full model is trainable
//! on synthetic RGB-D scenes. An analytic profiler reports parameters,
//! FLOPs, and modeled peak activation memory for every module and ablation
//! configuration.

pub mod checkpoint;
pub mod config;
pub mod dumps;
pub mod encoders;
pub mod error;
pub mod flopcount;
pub mod harness;
pub mod metrics;
pub mod miim;
pub mod nn;
pub mod oracle;
pub mod profiler;
pub mod segmodel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
