//! Fair training of tabular MLP classifiers via decision-rationale alignment.
//!
//! The crate provides four layers that build on each other:
//!
//! * [`autodiff`] — a scalar reverse-mode tape whose gradients are themselves
//!   tape nodes, so losses built from gradients (the alignment term) can be
//!   differentiated again.
//! * [`network`] — MLP definition, Glorot init, tape-bound forward passes, and
//!   the flat weight indexing (per-layer index sets) that the rationale
//!   machinery addresses.
//! * [`metrics`] / [`rationale`] — relaxed and hard group-fairness metrics,
//!   exact leave-one-out parity scores, Taylor importance, and the per-layer
//!   cosine alignment loss.
//! * [`data`] / [`training`] / [`harness`] — dataset ingestion and synthesis,
//!   the training algorithms (ERM, oversampling, fairness regularization,
//!   rationale-aligned training), and a sweep/audit experiment runner.
//!
//! See the `examples/` directory for one runnable example per capability, and
//! the `dralign` binary for the command-line experiment runner.

pub mod autodiff;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod network;
pub mod rationale;
pub mod training;

pub use autodiff::{ExpressionTape, NodeHandle, OpCode};
pub use data::{DatasetTable, SubgroupView};
pub use network::{MlpParams, MlpSpec};
pub use rationale::{ImportanceVector, ParityReport};
pub use training::{FairnessMetric, Method, RunHistory, TrainConfig};
