//! Vision-language-location pretraining at desk scale.
//!
//! The crate is organised the way the pipeline runs:
//!
//! * [`datapipe`] ingests image/caption/coordinate records, filters them by
//!   similarity score, produces reproducible splits, builds the vocabulary and
//!   drives the grounded-caption service client.
//! * [`encoders`] holds the vision, text, fusion and location encoders, all
//!   written against the small reverse-mode engine in [`autograd`].
//! * [`masking`] and [`objectives`] implement the corruption plans and the
//!   five pretraining losses.
//! * [`training`] runs the joint optimisation loop with checkpointing.
//! * [`evaluation`] implements KNN, zero-shot and segmentation-probe protocols.
//!
//! Data-parallel inner loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and plain iterators otherwise. Both paths
//! produce bit-identical results.

pub mod autograd;
pub mod config;
pub mod datapipe;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod masking;
pub mod nn;
pub mod objectives;
pub mod par;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
