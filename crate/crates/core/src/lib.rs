//! Dual-alignment knowledge retention for domain-incremental segmentation.
//!
//! The crate is `no_std` with `alloc`: everything in here is pure computation
//! over owned buffers. File formats, the CLI and the ablation runner live in
//! the companion `dakr` crate.
//!
//! Layout:
//!
//! * [`tensor`] / [`autodiff`]: dense fp64 tensors and a tape-based reverse-mode
//!   differentiation engine with the primitives the losses and the network need.
//! * [`hsic`]: RBF/linear kernels, centering, and the nonlinear and linear
//!   HSIC estimators.
//! * [`alignment`]: feature mapping, MAD-filtered feature pairing and the
//!   cross-representation (CRA) and cross-network (CNA) losses.
//! * [`replay`]: reservoir buffer, segmentation / distillation losses and the
//!   weighted total objective.
//! * [`segnet`]: a small mirrored encoder-decoder with named feature taps.
//! * [`synth`]: seeded synthetic domain-shifted segmentation tasks.
//! * [`metrics`]: Dice, IoU, HD95 and the backward-transfer aggregates.
//! * [`train`]: continual-training orchestration over a domain sequence.
#![no_std]
// `!(x > 0.0)` is the NaN-rejecting form used by the validators.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod alignment;
pub mod autodiff;
mod error;
pub mod hsic;
mod math;
pub mod metrics;
pub mod replay;
pub mod rng;
pub mod segnet;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Clipping threshold shared by every guarded `log` and division.
pub const EPS: f64 = 1e-12;
