//! Scalar abstraction over the element type of tensors.
//!
//! All layer math is generic over [`Scalar`] so the same code runs in f32
//! (the shipping precision) and f64 (used by the gradient-check tests,
//! where finite differences need the extra headroom).

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type of tensors: f32 or f64.
pub trait Scalar:
    Float + NumAssignOps + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from f64, used for constants and initialization.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
