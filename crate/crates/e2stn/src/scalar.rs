use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps};

/// Scalar type the whole numeric core is generic over.
///
/// Implemented for `f32` and `f64`. Training defaults to `f32`; gradient
/// checking and the checkpoint payload use `f64`.
pub trait Scalar:
    Float + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` (exact for constants in range).
    fn from_f64(x: f64) -> Self {
        Self::from(x).expect("f64 constant representable")
    }

    /// Widening conversion to `f64` (exact for f32 and f64).
    fn to_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite scalar")
    }
}

impl<T> Scalar for T where
    T: Float + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
}
