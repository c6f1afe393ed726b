//! Numerical laboratory for linear truth encoding in small transformers.
//!
//! - [`datagen`]: truth-correlated synthetic sequences.
//! - [`toy`]: one-hot one-layer model with exact population gradients.
//! - [`theory`]: executable checks of the closed-form claims about the toy model.
//! - [`dense`]: trainable attention-only transformer with manual backprop.
//! - [`probes`]: logistic probes, AUC, PCA and phase metrics.
//! - [`cooccur`]: document-level co-occurrence statistics.
//! - [`io`]: checkpoint container and CSV/JSON exports.

// `!(x >= 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cooccur;
pub mod datagen;
pub mod dense;
pub mod probes;
pub mod error;
pub mod io;
pub mod rng;
pub mod theory;
pub mod toy;

pub use error::{Error, Result};
