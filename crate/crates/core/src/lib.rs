//! Partitioned, streaming DNN inference for clusters of small devices.
//!
//! The crate is organized bottom-up:
//!
//! * [`model_ir`] declares feed-forward graphs and infers tensor shapes, with
//!   builders for a two-stream action-recognition network, AlexNet and VGG16.
//! * [`engine`] is a deterministic single-process forward pass. It is both the
//!   reference oracle and the compute kernel each worker runs.
//! * [`cost`] models latency, memory, load time, communication and energy.
//! * [`partition`] turns a graph into per-device task assignments for every
//!   device count from 1 to `n_max`, choosing between model and data
//!   parallelism.
//! * [`runtime`] executes an assignment as a cluster of workers that exchange
//!   tagged one-way messages, with sliding windows, bounded inboxes,
//!   backpressure and master-driven role reassignment.
//! * [`harness`] verifies distributed runs against the reference and produces
//!   benchmark reports.
//!
//! See the `examples/` directory of this crate for one runnable program per
//! capability.

pub mod cost;
pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod model_ir;
pub mod partition;
pub mod runtime;

pub use error::{Error, Result};
