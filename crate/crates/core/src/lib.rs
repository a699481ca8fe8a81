//! Context-aware document re-ranking at desk scale.
//!
//! A trainable two-pass ranking pipeline: a BM25 first stage retrieves
//! candidates, a transformer interaction encoder scores query-passage pairs,
//! feedback prototypes calibrate each candidate's interaction vector, and a
//! groupwise scorer ranks overlapping groups of candidates jointly. Training,
//! cross-validation, TREC-style evaluation, and analytic FLOP accounting are
//! included.
//!
//! Core math is generic over the scalar type ([`Scalar`]): f64 for training
//! and gradient checking, f32 optionally for inference.

pub mod calibrator;
pub mod config;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod firststage;
pub mod flops;
pub mod group;
pub mod interaction;
pub mod model;
pub mod scalar;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// f64 tensors, the training precision.
pub type Tensor64 = tensor::Tensor<f64>;
/// f32 tensors, the optional inference precision.
pub type Tensor32 = tensor::Tensor<f32>;
pub type ParamSet64 = tensor::ParamSet<f64>;
pub type ParamSet32 = tensor::ParamSet<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Graph32 = tensor::Graph<f32>;
