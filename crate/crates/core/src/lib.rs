//! Numerical laboratory for multi-head attention budgets.
//!
//! Modules cover dense numerics, exponential-sum delta fits, head/dimension
//! allocation bounds, softmax Jacobian analysis, attention head compression,
//! a small differentiable Transformer, the explicit lag-extractor
//! construction and synthetic sequence tasks.

pub mod allocation;
pub mod archive;
pub mod delta_approx;
pub mod error;
pub mod extractor;
pub mod head_compress;
pub mod numerics;
pub mod softmax_analysis;
pub mod tasks;
pub mod transformer;

pub use error::{Error, Result};
