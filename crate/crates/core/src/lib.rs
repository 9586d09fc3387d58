//! Rotation-and-translation adversarial robustness for small convolutional
//! image classifiers.
//!
//! The crate is organized bottom-up:
//!
//! - [`image`] and [`warp`]: the image tensor and the differentiable
//!   rotation+translation warp (bilinear sampling, zero fill).
//! - [`nn`]: a small fully-convolutional classifier with exact backprop.
//! - [`attacks`]: grid search, worst-of-k, first-order spatial PGD, pixel
//!   ℓ∞ PGD, and the combined spatial+ℓ∞ adversary.
//! - [`defenses`]: augmentation, worst-of-k robust training, ℓ∞ adversarial
//!   training, and majority-vote inference.
//! - [`data`]: MNIST IDX loading and the versioned checkpoint format.
//! - [`eval`]: accuracy reports, fooled-set decomposition, fooling-angle
//!   maps, fooling-fraction CCDFs, loss landscapes, and CSV/JSON export.
//! - [`cli`]: the `spatrob` command-line front end.

pub mod attacks;
pub mod cli;
pub mod data;
pub mod defenses;
pub mod error;
pub mod eval;
pub mod image;
pub mod nn;
pub mod rng;
pub mod warp;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use warp::{AttackSpace, TransformParams};
