use std::fmt::{Debug, Display};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type a [`Tape`](crate::Tape) can differentiate.
///
/// Training runs in `f32`; finite-difference checks instantiate the same
/// graphs in `f64`.
pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).expect("finite scalar")
    }

    fn to_le_bytes_vec(self) -> Vec<u8>;
}

impl Scalar for f32 {
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

impl Scalar for f64 {
    fn to_le_bytes_vec(self) -> Vec<u8> {
        self.to_le_bytes().to_vec()
    }
}

pub(crate) fn c<T: Scalar>(v: f64) -> T {
    <T as Scalar>::from_f64(v)
}
