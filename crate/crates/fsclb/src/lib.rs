//! Federated sketched contextual linear bandits.
//!
//! Agents keep a Frequent-Directions style sketch of their pulled arms and
//! talk to a server only when a determinant trigger fires. The server merges
//! uploaded sketches and broadcasts the sketched ridge solution back.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` rejects NaN too

pub mod agent;
pub mod baselines;
pub mod env;
mod error;
pub mod harness;
pub mod protocol;
pub mod server;
pub mod sketch;
pub mod spectral;

pub use agent::{compute_beta, AgentState, BanditParams};
pub use error::{Error, Result};
pub use server::ServerState;
pub use sketch::{SketchMode, SketchState, ShrinkRule};
