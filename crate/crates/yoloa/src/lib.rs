//! Real-time affordance detection with a language-model adapter.
//!
//! The model is a dual-branch detector: an anchor-free object detection
//! branch and a dense affordance-heatmap branch share a small convolutional
//! backbone. During training a frozen language model with LoRA deltas
//! ("the adapter") consumes the top-k preliminary detections and emits class
//! priors, box offsets, and spatial affordance gates that refine both
//! branches in a closed loop. At inference the adapter can be disabled for a
//! faster light variant.
//!
//! Module map:
//! - [`tensor`]: reverse-mode autodiff tape over n-d float arrays
//! - [`types`]: boxes, detections, samples, shared geometry
//! - [`backbone`], [`detect`], [`afford`]: the dual-branch detector
//! - [`lm`], [`lora`], [`adapter`]: language model, LoRA, refinement heads
//! - [`model`]: parameter store, assembled network, checkpoints
//! - [`train`]: SGD, schedules, the end-to-end loop
//! - [`metrics`]: mAP/AR and KLD/SIM/NSS evaluation
//! - [`data`]: synthetic dataset generation and on-disk formats
//! - [`config`], [`commands`]: run configuration and CLI entry points

pub mod adapter;
pub mod afford;
pub mod archive;
pub mod backbone;
pub mod commands;
pub mod config;
pub mod data;
pub mod detect;
pub mod error;
pub mod gradcheck;
pub mod lm;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod runtime;
pub mod tensor;
pub mod train;
pub mod types;

pub use error::{Error, Result};
