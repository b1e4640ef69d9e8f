//! Two-tier hybrid learner.
//!
//! * [`lower_tier`]: frozen random features with a ridge readout fit in one
//!   streaming pass over the data.
//! * [`upper_tier`]: softmax head trained with SGD plus an EWC penalty.
//! * [`compound`]: composition of the two tiers and the continual-learning
//!   protocol with forgetting metrics.
//! * [`datapath`]: fixed-point emulation of the direct solve and MAC/memory
//!   cost accounting.
//! * [`linalg`]: the dense kernels underneath.

pub mod compound;
pub mod datapath;
mod error;
pub mod linalg;
pub mod lower_tier;
pub mod upper_tier;

pub use error::{Error, Result};
pub use linalg::Matrix;
