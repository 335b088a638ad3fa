//! Scalar abstraction for the numeric core.
//!
//! Everything downstream of the grid is generic over [`Scalar`] so the same
//! code runs in `f32` or `f64`. Shipped binaries and file formats use `f64`
//! (see the aliases at the crate root); `f32` exists for cheap smoke runs and
//! to keep the math honest about what precision it actually needs.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + fmt::Debug + fmt::Display + Send + Sync + 'static
{
    /// Converts an `f64` literal (tolerances, config values). Panics only if
    /// the literal does not fit, which for f32/f64 means never.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    /// Lossy view as `f64`, for reports and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
