//! Learned image codec whose compressed latents and decoder feature taps
//! preserve perceptual distance.
//!
//! The crate provides the full pipeline: a five-level encoder/classifier pair
//! sharing convolution weights, a mirrored decoder exposing intermediate
//! feature taps, a learned factorized probability model with a bit-exact
//! range coder, the two-stage training loop, and the perceptual distance
//! (`metric` module) computed directly from decoded bitstreams together with
//! its 2AFC evaluation harness.

pub mod autodiff;
pub mod codec;
pub mod container;
pub mod data;
pub mod density;
pub mod entropy;
pub mod infer;
pub mod kernels;
pub mod metric;
pub mod models;
pub mod ops;
pub mod params;
pub mod range;
pub mod reference;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod weights;

pub use autodiff::{Tape, TapeGrads, Var};
pub use params::{Constraint, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
