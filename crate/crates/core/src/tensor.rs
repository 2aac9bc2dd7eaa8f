//! Array aliases shared across the crate and the scalar trait the Unet is
//! generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{Array3, Array4, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

/// One slice, channel first: `(C, H, W)`.
pub type SliceTensor = Array3<f32>;

/// A batch of slices: `(N, C, H, W)`.
pub type SliceBatch = Array4<f32>;

/// Binary volume `(D, H, W)`.
pub type BinaryVolume = Array3<bool>;

/// Scalar type for the denoiser: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("finite conversion")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// Raw little-endian bytes for checkpointing.
    fn to_le(self, out: &mut Vec<u8>);

    fn from_le(bytes: &[u8]) -> Self;

    const BYTES: usize;
    const NAME: &'static str;
}

impl Real for f32 {
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }

    const BYTES: usize = 4;
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    fn to_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn from_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }

    const BYTES: usize = 8;
    const NAME: &'static str = "f64";
}
