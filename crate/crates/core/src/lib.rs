//! Software twin of an FPGA trapped-ion qubit readout pipeline.
//!
//! The crate covers synthetic EMCCD image generation ([`dataset`]), the
//! ROI-threshold baseline ([`threshold`]), a LUT-compiled polynomial MLP
//! ([`polymlp`]), a small Vision Transformer with a bit-exact fixed-point
//! evaluator ([`vit`], [`fixedpoint`]), a cycle-level model of the
//! camera-to-classifier path ([`timingsim`]), fidelity reporting ([`eval`])
//! and the end-to-end workflow ([`pipeline`]).

mod binio;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fixedpoint;
pub mod parallel;
pub mod pipeline;
pub mod polymlp;
pub mod threshold;
pub mod timingsim;
pub mod vit;

pub use error::{Error, ParseError, Result};
