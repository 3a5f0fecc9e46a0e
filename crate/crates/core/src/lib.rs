//! Low-rank side adaptation of frozen vision transformers, the baselines it
//! is compared against, and the instrumentation needed to verify its
//! training-cost claims.

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod baselines;
pub mod costmodel;
pub mod error;
pub mod harness;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
pub use model::Model;
pub use tensor::{Precision, Tensor};
