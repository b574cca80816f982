//! Automatic voice over with discrete speech units.
//!
//! Phoneme and video-feature sequences are encoded, aligned with cross-modal
//! attention, upsampled to the unit rate and classified into discrete speech
//! units, which a vocoder turns back into audio.

pub mod autograd;
pub mod cli;
pub mod datamodel;
pub mod error;
pub mod eval;
pub mod inference;
pub mod matrix;
pub mod model;
pub mod seed;
pub mod synthdata;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use matrix::{Matrix, Real};
