//! Invertible coupling networks for framewise polyphonic transcription.
//!
//! The network maps a spectrogram frame `x` (plus padding) to labels `y`,
//! nuisance variables `z` and output padding, and the same parameters run
//! the map backwards exactly. Training balances six loss terms over one
//! forward and two inverse passes, two of which match distributions with
//! the sliced Wasserstein distance.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::single_range_in_vec_init)]

pub mod checkpoint;
pub mod coupling;
pub mod datagen;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod swd;
pub mod training;

pub use coupling::{cexp, CouplingLayer, Direction};
pub use error::{Error, Result};
pub use model::{DimSpec, InnModel};
pub use numerics::{Mat, Permutation, RngState};
pub use objective::{LossBreakdown, LossWeights};
pub use swd::SwdConfig;
