//! Image-grounded attentional encoder-decoder translation.
//!
//! The image-conditioned model (`Variant::Osu1`) projects a pooled image
//! feature into the initial recurrent states of both encoder and decoder;
//! `Variant::Osu2` is the same network without the image pathway. Decoding
//! uses beam search with a bounded per-token length reward.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod cli;
pub mod data;
pub mod decode;
pub mod metrics;
pub mod model;
pub mod numcore;
pub mod synth;
pub mod train;

pub use error::{Error, ErrorClass, Result};
