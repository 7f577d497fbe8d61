//! Floating-point element types for the encoder.
//!
//! `f64` is used for gradient checks, `f32` everywhere else. The `f32`
//! exponential is a branch-free polynomial approximation (relative error
//! below 5e-7) so that softmax and GELU loops vectorize.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::Float;

pub trait Scalar:
    Float
    + LinalgScalar
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;
    /// Replaces every element with its exponential.
    fn exp_in_place(xs: &mut [Self]);
}

impl Scalar for f64 {
    fn of(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }

    #[inline(always)]
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }
}

impl Scalar for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = fast_exp(*x);
        }
    }
}

const LOG2E: f32 = std::f32::consts::LOG2_E;
pub(crate) const LN2_HI: f32 = 0.693_145_75;
pub(crate) const LN2_LO: f32 = 1.428_606_8e-6;
/// 1.5 * 2^23: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f32 = 12_582_912.0;

#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    let t = x * LOG2E + ROUND_MAGIC;
    let n = t - ROUND_MAGIC;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let k = (t.to_bits() as i32).wrapping_sub(ROUND_MAGIC.to_bits() as i32);
    p * f32::from_bits((k.wrapping_add(127) << 23) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_points() {
        assert_eq!(fast_exp(0.0), 1.0);
        assert!((fast_exp(1.0) - std::f32::consts::E).abs() < 1e-6);
        assert!(fast_exp(-1000.0) < 1e-37);
        assert!(fast_exp(f32::NEG_INFINITY) < 1e-37);
        assert!(fast_exp(1000.0).is_finite());
    }

    proptest! {
        #[test]
        fn close_to_libm(x in -80.0f32..80.0) {
            let want = (x as f64).exp();
            let got = fast_exp(x) as f64;
            prop_assert!(((got - want) / want).abs() < 5e-7, "{x}: {got} vs {want}");
        }
    }
}
