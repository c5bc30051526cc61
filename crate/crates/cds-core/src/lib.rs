//! Cross-domain self-supervised feature learning at desk scale.
//!
//! The crate trains a small MLP encoder on two unlabeled domains with a pair
//! of memory-bank objectives: in-domain instance discrimination (each sample
//! classified as its own identity against its domain's bank) and across-domain
//! matching (entropy minimization of a sample's similarity distribution over
//! the opposite domain's bank). A second stage fits a linear classifier with
//! few source labels plus entropy minimization on the unlabeled splits.
//!
//! Everything is deterministic given a seed, every analytic gradient has a
//! finite-difference oracle next to it, and no training code path can read a
//! ground-truth label of an unlabeled sample: those live in a sealed side
//! channel consumed only by evaluation.
//!
//! The crate is `no_std`-compatible (with `alloc`); IO, file formats, and the
//! CLI live in the companion `cds-cli` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod adapt;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod memory;
pub mod numerics;
pub mod pretrain;

mod math;

pub use error::{CdsError, Result};
