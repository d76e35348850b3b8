//! Scalar abstraction for the numeric core.
//!
//! All core math is generic over [`Real`]; `f64` is the default scalar and
//! the one the CLI uses. `f32` works too, at reduced tolerance.

use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar not representable as f64")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + AddAssign
        + SubAssign
        + MulAssign
        + DivAssign
        + Sum
        + Debug
        + Display
        + LowerExp
        + Default
        + Send
        + Sync
        + 'static
{
}
