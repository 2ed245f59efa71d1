//! Storage scalar abstraction.
//!
//! Matrices store `f32` or `f64`; every reduction in this crate widens to
//! `f64` before accumulating and narrows once when writing the result back.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Name written into tensor file headers.
    const DTYPE: &'static str;
    /// Width of one element in the on-disk payload.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// Stand-in for −∞ in masked score positions: the most negative finite value.
    #[inline]
    fn masked() -> Self {
        Self::min_value()
    }

    #[inline]
    fn is_masked(self) -> bool {
        self == Self::min_value()
    }

    #[inline]
    fn widen(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Narrowing conversion; values outside the storage range become ±∞.
    #[inline]
    fn narrow(x: f64) -> Self {
        Self::from_f64(x).unwrap_or_else(Self::nan)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_is_finite_and_most_negative() {
        assert!(f32::masked().is_finite());
        assert_eq!(f32::masked(), f32::MIN);
        assert!(f64::masked().is_masked());
    }

    #[test]
    fn narrow_overflows_to_infinity() {
        assert_eq!(f32::narrow(1e300), f32::INFINITY);
        assert_eq!(f32::narrow(0.5), 0.5);
    }
}
