// index-style loops and parity checks mirror the math they implement
#![allow(clippy::needless_range_loop)]
#![allow(clippy::manual_is_multiple_of)]
#![allow(clippy::type_complexity)]

//! Feature-selective RoI detection at desk scale.
//!
//! A self-contained numerical library implementing shifted-convolution
//! attention banks, selective RoI pooling, attention-weighted RoI features,
//! and a low-capacity detection head, trained end-to-end on synthetic data.
//! Every operator ships an analytic backward pass verified against central
//! finite differences; nothing here depends on crates outside std.

pub mod attention;
pub mod detector;
pub mod error;
pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod roi;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Precision, Scalar, Shape4, Tensor4};
