//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type for tensors and models.
///
/// Implemented for `f32` and `f64`. Training and all equivalence checks run
/// in `f64`; `f32` exists for inference benchmarks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short dtype tag used in file headers and logs.
    const NAME: &'static str;

    #[inline]
    fn of(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("f64 is representable in every Scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }

    /// Adjacent representable value, upward or downward.
    fn step_ulp(self, up: bool) -> Self;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn step_ulp(self, up: bool) -> Self {
        if up {
            self.next_up()
        } else {
            self.next_down()
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn step_ulp(self, up: bool) -> Self {
        if up {
            self.next_up()
        } else {
            self.next_down()
        }
    }
}
