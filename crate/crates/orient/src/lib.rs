//! Learned canonical orientations for feature points.
//!
//! This crate trains a small convolutional network to assign an orientation to
//! an image patch so that descriptors of corresponding patches come out close.
//! There is no target angle anywhere: two weight-shared evaluations of the
//! network feed a descriptor-distance loss, and the optimum orientations fall
//! out implicitly. The descriptor is treated as a black box; its derivative
//! with respect to the angle comes from a table of descriptors precomputed
//! every 5 degrees.
//!
//! Module map:
//!
//! - [`tensor`]: dense `f64` tensors, named parameter sets, the ADAM optimizer.
//! - [`layers`]: conv / max-pool / fully-connected / ReLU / dropout with
//!   hand-derived backward passes.
//! - [`ghh`]: the generalized-hinging-hyperplanes activation (signed sum of
//!   maxima) and its reductions to ReLU, maxout and PReLU.
//! - [`net`]: the orientation CNN, the arctan2 head and its regularized
//!   gradient, checkpoint I/O.
//! - [`descriptor`]: from-scratch SIFT-style 128-D descriptor, rotation
//!   tables, table lookup and numeric Jacobians.
//! - [`data`]: image I/O, DoG keypoint detection, homographies, patch
//!   extraction, synthetic pair generation, dataset files.
//! - [`trainer`]: the Siamese pair loss, its mixed analytic/numeric gradient,
//!   and the training loop.
//! - [`eval`]: nearest-neighbor matching, precision-recall, mAP and method
//!   ranking.
//! - [`gradcheck`]: finite-difference verification of every backward pass.
//! - [`config`] / [`cli`]: plain-text configuration and the command-line
//!   front end.

pub mod cli;
pub mod config;
pub mod data;
pub mod descriptor;
pub mod error;
pub mod eval;
pub mod ghh;
pub mod gradcheck;
pub mod layers;
pub mod net;
pub mod tensor;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
