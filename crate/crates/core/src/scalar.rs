use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type accepted by the numeric parts of the crate.
///
/// Implemented for `f32` and `f64`. The simulator clock itself is always
/// `f64` milliseconds; this trait covers the weight-merge kernels and the
/// speedup algebra, which are meaningful at either precision.
pub trait Scalar:
    'static + Copy + Send + Sync + Float + NumAssign + FromPrimitive + Default + Debug + Display
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count fits in scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
