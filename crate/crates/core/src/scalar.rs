use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar used by the likelihood and annealing code.
///
/// The two floors keep logarithms finite: `prob_floor` clamps probabilities
/// before `ln`, `param_floor` bounds fitted parameters away from 0 and 1.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn prob_floor() -> Self;

    fn param_floor() -> Self;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Clamp into `[prob_floor, 1 - prob_floor]`.
    #[inline]
    fn clamp_prob(self) -> Self {
        let lo = Self::prob_floor();
        let hi = Self::one() - lo;
        self.max(lo).min(hi)
    }

    #[inline]
    fn clamp_param(self) -> Self {
        let lo = Self::param_floor();
        let hi = Self::one() - lo;
        self.max(lo).min(hi)
    }
}

impl Real for f64 {
    #[inline]
    fn prob_floor() -> Self {
        1e-12
    }

    #[inline]
    fn param_floor() -> Self {
        1e-6
    }
}

impl Real for f32 {
    // 1 - 1e-12 rounds to 1 in single precision.
    #[inline]
    fn prob_floor() -> Self {
        1e-6
    }

    #[inline]
    fn param_floor() -> Self {
        1e-5
    }
}

/// Numerically stable `ln(sum(exp(v)))`. Returns `-inf` for an empty or all `-inf` slice.
pub fn log_sum_exp<F: Real>(values: &[F]) -> F {
    let max = values
        .iter()
        .copied()
        .fold(F::neg_infinity(), |a, b| if b > a { b } else { a });
    if max == F::neg_infinity() {
        return max;
    }
    let sum: F = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct() {
        let v = [0.1f64, -2.0, 3.5];
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-14);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
    }

    #[test]
    fn log_sum_exp_survives_large_magnitudes() {
        let v = [-1e6f64, -1e6 - 1.0];
        let got = log_sum_exp(&v);
        assert!((got - (-1e6 + (1.0 + (-1.0f64).exp()).ln())).abs() < 1e-9);
    }

    #[test]
    fn clamps_differ_by_precision() {
        assert!(0.0f64.clamp_prob() > 0.0);
        assert!(1.0f32.clamp_prob() < 1.0);
        assert_eq!(0.5f32.clamp_param(), 0.5);
    }
}
