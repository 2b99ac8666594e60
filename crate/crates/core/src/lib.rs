//! Rotation- and reflection-equivariant convolutional networks built from
//! moment kernels.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod autodiff;
pub mod error;
pub mod geometry;
pub mod io;
pub mod kernels;
pub mod network;
pub mod scalar;
pub mod tasks;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Real;
