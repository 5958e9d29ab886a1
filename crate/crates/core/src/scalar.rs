//! Numeric abstraction for the scoring math.
//!
//! Precision, recall, F1, ROC rates and AUC are all ratios of counts. The
//! scorer is written once against [`Scalar`] and instantiated with `f64` for
//! reports, `f32` where memory matters, or an exact rational when a test or
//! audit needs bit-exact answers.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Num, NumCast, ToPrimitive};

/// A field-like number that counts can be converted into.
pub trait Scalar: Num + Copy + PartialOrd + Debug {
    /// Converts a non-negative count. Exact for rationals; rounds for floats.
    fn from_count(n: u64) -> Self;

    fn to_f64(self) -> f64;

    fn half() -> Self {
        Self::one() / (Self::one() + Self::one())
    }

    /// `num / den`, or zero when `den` is zero.
    fn ratio_or_zero(num: u64, den: u64) -> Self {
        if den == 0 {
            Self::zero()
        } else {
            Self::from_count(num) / Self::from_count(den)
        }
    }
}

macro_rules! float_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            fn from_count(n: u64) -> Self {
                <$t as NumCast>::from(n).expect("count representable as float")
            }

            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    )*};
}

float_scalar!(f32, f64);

macro_rules! ratio_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for Ratio<$t> {
            fn from_count(n: u64) -> Self {
                Ratio::from_integer(<$t>::try_from(n).expect("count fits the rational's integer type"))
            }

            fn to_f64(self) -> f64 {
                ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
            }
        }
    )*};
}

ratio_scalar!(i64, i128);

/// Harmonic mean of precision and recall; zero when both are zero.
pub fn f1<T: Scalar>(precision: T, recall: T) -> T {
    let sum = precision + recall;
    if sum == T::zero() {
        T::zero()
    } else {
        (T::one() + T::one()) * precision * recall / sum
    }
}
