//! Coarse-to-fine mask prompt generation.
//!
//! A coarse stage fuses class-token attention from several encoder layers
//! into a soft patch mask; a fine stage refines it with mask-modulated
//! window attention at four times the resolution. Loss functions, attention
//! cost models and a small CLI driver complete the crate.

pub mod error;
pub mod fine;
pub mod cli;
pub mod coarse;
pub mod complexity;
pub mod init;
pub mod losses;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
