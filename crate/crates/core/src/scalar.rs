//! Scalar abstraction so every numeric path runs in f32 or f64.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Float type usable throughout the numeric stack. Gradient and equivalence
/// tests rely on f64; f32 is supported for storage-light experiments.
pub trait Scalar:
    Float + ScalarOperand + LinalgScalar + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Dtype tag used by file manifests.
    const DTYPE: &'static str;
    /// Size of one scalar in the little-endian binary representation.
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn write_le(self, buf: &mut Vec<u8>);
    /// Reads one scalar from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("scalar byte width"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    fn write_le(self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("scalar byte width"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn le_roundtrip_is_bitwise() {
        let mut buf = Vec::new();
        for v in [0.0f64, -1.5, std::f64::consts::PI, 1e-300] {
            buf.clear();
            v.write_le(&mut buf);
            assert_eq!(f64::read_le(&buf).to_bits(), v.to_bits());
        }
        let mut buf = Vec::new();
        1.25f32.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), 1.25f32);
    }
}
