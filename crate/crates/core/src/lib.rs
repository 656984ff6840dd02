//! Two-phase learning for weakly supervised object localization.
//!
//! A first fully convolutional classifier is trained from image-level labels.
//! Its heat maps, binarized relative to their maximum, become suppression
//! masks that zero the feedback-layer activations of a second network during
//! training, which pushes the second network onto the next most
//! discriminative regions. Heat maps of both phases are fused by
//! probability-weighted pixelwise maximum.

pub mod dataset;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod network;
pub mod ops;
pub mod suppression;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use network::{ClassifierHead, ConvSpec, FcnConfig, FcnModel, HeatMapSet};
pub use suppression::SuppressionMask;
pub use tensor::{Scalar, Tensor};
