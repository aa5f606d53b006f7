//! Mean-field price formation: adversarial training of a control network
//! and a price network, a-posteriori residual certificates, and reference
//! solvers to check both.

pub mod cli;
pub mod config;
pub mod error;
pub mod estimator;
pub mod io;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod rollout;
pub mod training;

pub use error::{Error, Result};
