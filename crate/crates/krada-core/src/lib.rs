//! Known-region-aware domain alignment for open-world semantic segmentation.
//!
//! A segmentation model is adapted from a labeled source domain to an
//! unlabeled target domain that additionally contains pixels of a class never
//! seen in the source. Target pixels whose known-class probability vector is
//! close to uniform (measured by a goodness-of-fit statistic) are pseudo-
//! labeled as unknown, and the complement of the unknown region masks the
//! adversarial feature-alignment loss so that only known regions are pulled
//! toward the source distribution.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense `f64` tensors, parameter groups, SGD;
//! * [`tape`] — define-by-run reverse-mode autodiff over a flat op tape;
//! * [`rng`] — named, independently seeded ChaCha streams;
//! * [`label`] — integer label maps and one-hot conversion;
//! * [`nn`] — the segmentation network, auxiliary known-class head, and
//!   per-location discriminator;
//! * [`openset`] — uniformity statistics, pseudo-labels, known-region masks,
//!   and threshold calibration;
//! * [`loss`] — the training objectives;
//! * [`trainer`] — the alternating update loop and its ablation modes;
//! * [`synth`] — a deterministic synthetic two-domain benchmark;
//! * [`metrics`] — confusion accumulation, IoU summaries, and image-level
//!   unknown detection scores.
//!
//! Everything is `no_std`-compatible (with `alloc`); file formats and the
//! command-line harness live in the companion `krada-lab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod label;
pub mod loss;
pub mod math;
pub mod metrics;
pub mod nn;
pub mod openset;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

use alloc::string::String;

/// Errors shared by every module of the crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes (or label-map dimensions) are inconsistent with what an
    /// operation requires.
    Shape(String),
    /// An argument is outside an operation's domain (negative probabilities,
    /// even kernel sizes, empty inputs, ...).
    Invalid(String),
    /// `Tape::backward` was called on a tape whose gradients were already
    /// propagated; a new forward pass is required.
    TapeConsumed,
    /// A loss or parameter became NaN/∞; training must abort rather than
    /// continue on garbage.
    NonFinite(String),
    /// A generator constraint cannot be satisfied (for example a class that
    /// can never appear, yet is required to be present).
    Unsatisfiable(String),
}

impl core::fmt::Display for Error {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape mismatch: {m}"),
            Error::Invalid(m) => write!(f, "invalid argument: {m}"),
            Error::TapeConsumed => write!(f, "backward already ran on this tape"),
            Error::NonFinite(m) => write!(f, "non-finite value: {m}"),
            Error::Unsatisfiable(m) => write!(f, "unsatisfiable constraint: {m}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

#[macro_export]
macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::Error::Shape(alloc::format!($($arg)*)) };
}

#[macro_export]
macro_rules! invalid_err {
    ($($arg:tt)*) => { $crate::Error::Invalid(alloc::format!($($arg)*)) };
}
