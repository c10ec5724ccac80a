use num_traits::Float;

/// Element type of the tensor engine.
///
/// The engine runs in one of two precisions: `f32` for training and
/// inference, `f64` for finite-difference gradient checking, where 32-bit
/// round-off would swamp the comparison. Everything downstream of the
/// engine is generic over this trait.
pub trait Scalar: Float + std::fmt::Debug + Default + std::iter::Sum + 'static {
    fn from_f64(v: f64) -> Self;
    fn from_usize(v: usize) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn from_usize(v: usize) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn from_usize(v: usize) -> Self {
        v as f64
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
