//! Self-attentive associative memory (SAM) and the SAM-based two-memory
//! recurrent model (STM).
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] and [`graph`]: dense `f64` tensors and a define-by-run
//!   reverse-mode autodiff tape.
//! * [`attention`]: dot product and outer product attention, the contraction
//!   that links them, and the bilinear expansion of a flattened OPA map.
//! * [`sam`]: the SAM operator plus associative-memory read/write rules.
//! * [`stm`] and [`lstm`]: the two-memory recurrent cell and an LSTM
//!   baseline.
//! * [`tasks`]: synthetic episode generators with brute-force oracles.
//! * [`train`]: losses, optimizers, metrics, the training loop, numerical
//!   rank and operation counters.
//! * [`props`]: executable property suites for the algebraic results.
//! * [`config`] and [`checkpoint`]: plain-text run configs and binary
//!   parameter files.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod lstm;
pub mod params;
pub mod props;
pub mod sam;
pub mod stm;
pub mod tasks;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{grad_check, grad_check_report, GradCheckReport, Gradients, Graph, Var};
pub use params::ParamSet;
pub use tensor::{EwOp, FlattenMode, ReduceOp, Rng, Tensor};
