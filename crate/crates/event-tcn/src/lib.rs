#![forbid(unsafe_code)]

//! Multi-receptive-field temporal 1D convolutional networks for event
//! detection in coarsely annotated feature sequences.
//!
//! The crate covers the full pipeline at desk scale: numerical kernels with
//! explicit backward passes, the multi-tower network with sum fusion,
//! window sampling over feature sequences with second-resolution labels,
//! training with Adam and checkpointing, sliding-window inference with
//! duplicate merging and consecutive-event suppression, watershed event
//! spotting, and tolerance-matched evaluation metrics.
//!
//! Start from the `examples/` directory for runnable entry points; the
//! `event-tcn` binary wraps the same library surface behind subcommands.

pub mod arch;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod infer;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
