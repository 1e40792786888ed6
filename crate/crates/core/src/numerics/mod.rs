// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dense f64 kernels: matmul, softmax, layer norm, GELU and a seeded
//! counter-based RNG.
//!
//! Every reduction runs sequentially in index order so that results are
//! bitwise reproducible across runs, thread counts and platforms.

mod rng;
mod tensor;

pub use rng::Rng;
pub use tensor::{gelu, layer_norm, matmul, softmax, Tensor};

pub(crate) use tensor::softmax_in_place;

/// Layer-norm epsilon used by every model in the workbench.
pub const LN_EPS: f64 = 1e-5;
