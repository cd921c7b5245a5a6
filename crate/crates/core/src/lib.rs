//! Privacy-preserving taxi-demand prediction: a virtual grid over trip
//! data, a tanh MLP classifying demand level per (cell, hour), and FedAvg
//! training across facility clients compared with a pooled single model.

pub mod eval;
pub mod fed;
pub mod grid;
pub mod ingest;
pub mod nn;
pub mod seed;

/// Version of this library crate.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
