//! Federated fine-tuning of a frozen residual stack through randomly
//! allocated per-layer low-rank adapters.
//!
//! Each round the server draws an allocation matrix assigning every client a
//! subset of layers sized to its capacity, dispatches the frozen base layers
//! together with their adapters, lets the clients train adapters and head,
//! and merges the adapters layer by layer weighted by local dataset size.

pub mod allocation;
pub mod check;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod model;
pub mod nn;
pub mod rng;
pub mod theory;

pub use error::{Error, Result};
