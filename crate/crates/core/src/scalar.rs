use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Floating-point element type used by the ontology and transport math.
///
/// Implemented for `f32` and `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal; every `f64` is representable (possibly rounded) in both impls.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable `log(sum(exp(x)))`; `-inf` entries are ignored.
pub(crate) fn log_sum_exp<T: Scalar>(values: impl Iterator<Item = T> + Clone) -> T {
    let max = values.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_matches_direct() {
        let xs = [0.1_f64, -2.0, 3.5];
        let direct = xs.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(xs.iter().copied()) - direct).abs() < 1e-12);
    }

    #[test]
    fn lse_skips_neg_infinity() {
        let xs = [f64::NEG_INFINITY, 1.0];
        assert!((log_sum_exp(xs.iter().copied()) - 1.0).abs() < 1e-15);
        let none = [f32::NEG_INFINITY; 3];
        assert_eq!(log_sum_exp(none.iter().copied()), f32::NEG_INFINITY);
    }
}
