//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point type the model, losses and oracles are computed in.
///
/// Implemented for `f32` and `f64`. Acceptance tolerances assume `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints.
    const NAME: &'static str;
    /// Width of one value in a checkpoint payload.
    const BYTES: usize;

    /// Converts a literal; every finite `f64` is representable (possibly rounded).
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal converts to scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 8];
        buf.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(buf)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut buf = [0u8; 4];
        buf.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(buf)
    }
}

/// `x * ln(x)` with the `0 * ln 0 = 0` convention.
#[inline]
pub fn xlogx<S: Scalar>(x: S) -> S {
    if x == S::zero() {
        S::zero()
    } else {
        x * x.ln()
    }
}

#[inline]
pub(crate) fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<S: Scalar>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Numerically stable softmax of `logits / temperature` written into `out`.
pub(crate) fn softmax_into<S: Scalar>(logits: &[S], temperature: S, out: &mut Vec<S>) {
    out.clear();
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let mut total = S::zero();
    for &l in logits {
        let e = ((l - max) / temperature).exp();
        total += e;
        out.push(e);
    }
    for p in out.iter_mut() {
        *p /= total;
    }
}

/// Log-probability of `index` under `softmax(logits / temperature)`.
pub(crate) fn log_softmax_at<S: Scalar>(logits: &[S], temperature: S, index: usize) -> S {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let total: S = logits.iter().map(|&l| ((l - max) / temperature).exp()).sum();
    (logits[index] - max) / temperature - total.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xlogx_zero_convention() {
        assert_eq!(xlogx(0.0_f64), 0.0);
        assert!((xlogx(0.5_f64) - 0.5 * 0.5_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn byte_roundtrip_is_exact() {
        for x in [0.1_f64, -3.25e-300, f64::MAX, 1.0 / 3.0] {
            let mut buf = Vec::new();
            x.write_le(&mut buf);
            assert_eq!(f64::read_le(&buf).to_bits(), x.to_bits());
        }
        let mut buf = Vec::new();
        0.1_f32.write_le(&mut buf);
        assert_eq!(f32::read_le(&buf), 0.1_f32);
    }

    #[test]
    fn softmax_matches_log_softmax() {
        let logits = [1.0_f64, -2.0, 0.5, 3.0];
        let mut p = Vec::new();
        softmax_into(&logits, 0.7, &mut p);
        for (i, pi) in p.iter().enumerate() {
            assert!((pi.ln() - log_softmax_at(&logits, 0.7, i)).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
