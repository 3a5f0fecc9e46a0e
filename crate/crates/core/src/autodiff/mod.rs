//! Reverse-mode differentiation over an explicit tape, with per-node
//! multiply-accumulate and cached-activation accounting.
//!
//! Only multiply-accumulates are counted; elementwise nonlinearities, norms
//! and softmax are free. A matmul's backward costs one forward-equivalent
//! matmul per input that needs a gradient.

mod params;
mod tape;

pub use params::{ParamStore, Parameter};
pub use tape::{
    Gradients, OpKind, Region, RegionStats, Tape, TapeNode, TapeStats, Var, LAYER_NORM_EPS,
};
