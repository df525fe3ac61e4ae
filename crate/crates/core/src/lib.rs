//! Few-shot object localization and classification.
//!
//! The crate trains a small convolutional backbone in two roles: a feature
//! map encoder that turns support masks into a class prototype and scores
//! query pixels by cosine similarity (region proposal), and an embedding
//! encoder whose distances to class centroids classify query images in
//! sampled episodes. Dataset ingestion, episode sampling, augmentation, a
//! synthetic busy-scene benchmark, and the training/evaluation pipeline sit
//! on top.

pub mod augment;
pub mod encoder;
pub mod episodic;
pub mod error;
pub mod ingestion;
pub mod lovasz;
pub mod nn;
pub mod pipeline;
pub mod protonet;
pub mod rpn;
pub mod util;

pub use error::{Error, Result};

/// Floating point element type for all tensor math. Training uses `f32`;
/// tests instantiate `f64` where tight numeric tolerances demand it.
pub trait Scalar: ndarray::NdFloat {}

impl<T: ndarray::NdFloat> Scalar for T {}

/// Shorthand for converting literals and counts into the generic scalar.
#[inline]
pub(crate) fn cf<F: Scalar>(x: f64) -> F {
    F::from(x).expect("value representable in scalar type")
}
