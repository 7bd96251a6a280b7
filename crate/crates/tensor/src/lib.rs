//! Dense `f64` arrays with eager, tape-based reverse-mode differentiation.
//!
//! A [`Tape`] records every operation as it is evaluated. Parameters live in a
//! [`ParamStore`] and are bound onto a fresh tape for each step; [`Adam`]
//! applies the resulting gradients.

pub mod array;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod params;
pub mod tape;

pub use array::Array;
pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use optim::{adam_step, Adam, AdamConfig, Moments};
pub use params::{Bound, Param, ParamId, ParamStore};
pub use tape::{CustomOp, Gradients, Tape, Var};
