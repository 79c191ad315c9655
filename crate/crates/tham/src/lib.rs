//! Health event prediction over longitudinal visit records.
//!
//! The model couples four pieces:
//! - hierarchical code embeddings assembled from an ontology ([`ontology`]),
//! - a drug-disease heterogeneous graph refined by co-occurrence statistics
//!   ([`cograph`], [`hgnn`]),
//! - a time-aware transformer over the visit sequence ([`visit`],
//!   [`attention`]),
//! - adaptive merging of two attention views into one patient
//!   representation ([`merge`]).
//!
//! [`model`] wires the pieces together, [`train`] fits them, [`metrics`]
//! scores them, and [`cli`] exposes the whole pipeline as subcommands.
//! Everything runs on a from-scratch reverse-mode autodiff engine
//! ([`tensor`], [`optim`]) in `f64`.
//!
//! Start with the runnable examples in `examples/` for end-to-end usage.

pub mod attention;
pub mod checkpoint;
pub mod cli;
pub mod cograph;
pub mod cohort;
pub mod config;
pub mod error;
pub mod hgnn;
pub mod merge;
pub mod metrics;
pub mod model;
pub mod ontology;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod visit;

pub use error::{Error, Result};
