//! Deterministic simulation and analysis of Federated SGD with stale-gradient
//! reuse under partial client participation.

pub mod analysis;
pub mod error;
pub mod fedsgd;
pub mod harness;
pub mod linalg;
pub mod loss;
pub mod rng;
pub mod staleness;

pub use error::{Error, Result};
pub use linalg::ParamVector;
