//! Desk-scale laboratory for denoising diffusion vocoders with
//! inference-aware fine-tuning.
//!
//! A noise-prediction network is pretrained with the usual epsilon loss and
//! then fine-tuned by backpropagating through a few-step reverse chain
//! against a multi-resolution STFT magnitude and phase loss.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audio_data;
pub mod autodiff;
pub mod config;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod noise_model;
pub mod schedules;
pub mod trainer;

pub use error::{Error, Result};
