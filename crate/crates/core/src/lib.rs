// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation-patching workbench for a miniature vision-language
//! transformer with a planted, known circuit.
//!
//! The crate covers the whole pipeline: a deterministic `f64` tensor kernel,
//! the model and its traced forward pass, a synthetic two-choice VQA world,
//! text and image corruption, patching sweeps and knockout, head-level
//! analysis, and the report pipeline used by the command-line tool.

pub mod analysis;
pub mod cma;
pub mod corruption;
pub mod error;
pub mod layout;
pub mod model;
pub mod numerics;
pub mod report;
pub mod vocab;
pub mod worldgen;

pub use error::{Error, ErrorClass, Result};
