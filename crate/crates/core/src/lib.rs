//! Federated multi-view matrix factorization for implicit-feedback
//! recommendation with user and item side information.
//!
//! Users keep their interactions and features on device, an item server keeps
//! item metadata, and a central server only ever sees gradient payloads for the
//! shared factor matrices Q (items) and U (user features).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate self as fedmvmf;

pub mod cli;
pub mod coldstart;
pub mod data;
pub mod error;
pub mod eval;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod optimizer;
pub mod seeds;

#[cfg(test)]
mod testkit;

pub use error::{Error, Result};
pub use federation::{ClientState, ItemServerState, MasterModel, ServerState, Simulation, SimulationConfig};
pub use model::{FeatureVector, GradientPayload, HyperParams, InteractionRow};
pub use numerics::DenseMatrix;
pub use optimizer::AdamConfig;
