//! Change detection for co-registered speckled (SAR-like) grayscale image
//! pairs with a multiscale capsule network.
//!
//! The pipeline: a log-ratio difference image is computed from the pair
//! ([`preprocessing`]), hierarchical fuzzy c-means clustering selects
//! reliable changed/unchanged training pixels ([`pseudo_label`]), a capsule
//! network with an adaptive-fusion-convolution front end is trained on
//! patches around those pixels ([`afc`], [`capsnet`], [`training`]), and the
//! trained model classifies every pixel into a binary change map that is
//! scored against ground truth ([`evaluation`]).
//!
//! Everything runs on a small dense-tensor core with reverse-mode gradients
//! ([`tensor`], [`tape`]) and a finite-difference checker ([`grad_check`]).
//! The crate is `no_std`-compatible (alloc required); disable the `std`
//! feature to drop the platform math library in favor of `libm`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod afc;
pub mod capsnet;
pub mod error;
pub mod evaluation;
mod fmath;
pub mod grad_check;
mod kernels;
pub mod preprocessing;
pub mod pseudo_label;
pub mod runner;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tape::{Padding, Tape, Val};
pub use tensor::Tensor;
