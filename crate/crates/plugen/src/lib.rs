//! Attribute-factorized latent flows for frozen generative backbones.
//!
//! The crate trains an invertible NICE-style flow that maps the entangled
//! latent space of a pre-trained generator onto a space where each labeled
//! attribute occupies one coordinate and the remaining coordinates carry
//! style. The backbone stays frozen throughout; conditional generation,
//! attribute editing, and intensity interpolation all happen by moving
//! points in the factorized space and mapping them back.

// Guards like `!(sigma > 0.0)` reject NaN along with the out-of-range
// values; `partial_cmp` would lose that.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Pivoted elimination and Jacobian assembly read clearer with indices.
#![allow(clippy::needless_range_loop)]

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod inference;
pub mod numerics;
pub mod priors;
pub mod training;

pub use error::{Error, Result};
