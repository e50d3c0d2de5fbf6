//! Element type abstraction: the whole stack runs either in f32 (training
//! mode) or f64 (test mode, where finite-difference checks are reliable).

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point element type for tensors.
///
/// Everything numeric is generic over this so a run can pick f32 for speed
/// or f64 for bit-level reproducibility and gradient checking.
pub trait Real:
    num_traits::Float + Sum + Debug + Display + Send + Sync + 'static
{
    const PRECISION_NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    const PRECISION_NAME: &'static str = "f32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }
}

impl Real for f64 {
    const PRECISION_NAME: &'static str = "f64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
}
