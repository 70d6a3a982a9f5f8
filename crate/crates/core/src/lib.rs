//! Latent-guided dual-stream HER2 scoring.
//!
//! The crate bundles everything the model needs end to end:
//!
//! * [`tensor`]: dense tensors with reverse-mode autodiff, AdamW and the
//!   cosine learning-rate schedule.
//! * [`stain`]: optical density, colour deconvolution, hematoxylin density
//!   maps and Otsu-thresholded DAB membrane masks.
//! * [`synth`]: deterministic registered H&E/IHC patch pairs.
//! * [`model`]: student/teacher encoders, the latent hallucinator, auxiliary
//!   decoders, attention fusion and the classifier.
//! * [`losses`] and [`metrics`]: training objectives and evaluation scores.
//! * [`harness`]: teacher pretraining, training, evaluation and ablations.

pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod stain;
pub mod synth;
pub mod tensor;

pub use error::{LgdError, Result};
