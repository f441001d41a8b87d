//! Learning agents that combine environment reward with delayed, noisy human
//! feedback, together with the gridworlds, the simulated observer and the
//! experiment harness used to compare them.

pub mod agents;
pub mod env;
pub mod error;
pub mod harness;
pub mod nn;
pub mod observer;
pub mod rng;

pub use error::{Error, Result};
