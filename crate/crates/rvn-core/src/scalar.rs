//! Floating-point scalar abstraction: f32 or f64.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Scalar type the tensor core is generic over.
///
/// Training paths use the `f64` aliases at the crate root; `f32` satisfies the
/// same bound for a lighter inference build, without any tolerance guarantees.
pub trait Scalar:
    Float
    + NumAssignOps
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn of_usize(v: usize) -> Self {
        <Self as FromPrimitive>::from_usize(v).expect("usize conversion")
    }
    fn to_f64_lossy(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
