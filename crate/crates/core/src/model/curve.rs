//! Piecewise-constant short-rate curves and their cash accounts.

use serde::{Deserialize, Serialize};

use crate::scalar::Real;

use super::ModelError;

/// Largest absolute annualized rate accepted by validation.
pub const RATE_BOUND: f64 = 1.0;

/// Right-continuous piecewise-constant rate: `values[i]` applies on
/// `[knots[i], knots[i+1])`, the last value extends to infinity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RateCurve<T: Real> {
    knots: Vec<T>,
    values: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CurveError {
    #[error("curve needs at least one knot")]
    Empty,
    #[error("knots and values differ in length ({knots} vs {values})")]
    LengthMismatch { knots: usize, values: usize },
    #[error("first knot must be 0, got {0}")]
    FirstKnotNotZero(f64),
    #[error("knots must be strictly ascending (index {0})")]
    NotAscending(usize),
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
}

impl<T: Real> RateCurve<T> {
    pub fn new(knots: Vec<T>, values: Vec<T>) -> Result<Self, CurveError> {
        if knots.is_empty() {
            return Err(CurveError::Empty);
        }
        if knots.len() != values.len() {
            return Err(CurveError::LengthMismatch {
                knots: knots.len(),
                values: values.len(),
            });
        }
        for (i, (k, v)) in knots.iter().zip(&values).enumerate() {
            if !k.is_finite() || !v.is_finite() {
                return Err(CurveError::NonFinite(i));
            }
        }
        if knots[0] != T::zero() {
            return Err(CurveError::FirstKnotNotZero(knots[0].to_f64_lossy()));
        }
        if let Some(i) = knots.windows(2).position(|w| w[1] <= w[0]) {
            return Err(CurveError::NotAscending(i + 1));
        }
        Ok(Self { knots, values })
    }

    pub fn flat(rate: T) -> Self {
        Self {
            knots: vec![T::zero()],
            values: vec![rate],
        }
    }

    pub fn zero() -> Self {
        Self::flat(T::zero())
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn is_flat(&self) -> bool {
        self.values.iter().all(|&v| v == self.values[0])
    }

    pub fn max_abs(&self) -> T {
        self.values
            .iter()
            .fold(T::zero(), |acc, &v| if v.abs() > acc { v.abs() } else { acc })
    }

    /// Short rate in force at `t` (right-continuous).
    pub fn rate_at(&self, t: T) -> T {
        let idx = self.knots.partition_point(|&k| k <= t);
        self.values[idx.saturating_sub(1)]
    }

    /// Exact `int_a^b r(u) du` for `0 <= a <= b`.
    pub fn integral(&self, a: T, b: T) -> T {
        if b <= a {
            return T::zero();
        }
        let n = self.knots.len();
        let mut acc = T::zero();
        let start = self.knots.partition_point(|&k| k <= a).saturating_sub(1);
        for i in start..n {
            let lo = if self.knots[i] > a { self.knots[i] } else { a };
            let hi = if i + 1 < n && self.knots[i + 1] < b {
                self.knots[i + 1]
            } else {
                b
            };
            if hi > lo {
                acc = acc + self.values[i] * (hi - lo);
            }
            if hi >= b {
                break;
            }
        }
        acc
    }

    /// `B(t) = exp(int_0^t r(u) du)`, with `B(0) = 1`.
    pub fn cash_account(&self, t: T) -> Result<T, ModelError> {
        if t < T::zero() {
            return Err(ModelError::NegativeTime(t.to_f64_lossy()));
        }
        Ok(self.integral(T::zero(), t).exp())
    }

    /// Pointwise sum or difference of two curves on the union of their knots.
    pub fn combine(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        let mut knots: Vec<T> = self.knots.iter().chain(&other.knots).copied().collect();
        knots.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
        knots.dedup();
        let values = knots
            .iter()
            .map(|&k| f(self.rate_at(k), other.rate_at(k)))
            .collect();
        Self { knots, values }
    }

    pub fn convert<U: Real>(&self) -> RateCurve<U> {
        RateCurve {
            knots: self.knots.iter().map(|k| U::lit(k.to_f64_lossy())).collect(),
            values: self.values.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
        }
    }
}

/// `cash_account_value`: closed-form cash account of `rate` at time `t`.
pub fn cash_account_value<T: Real>(rate: &RateCurve<T>, t: T) -> Result<T, ModelError> {
    rate.cash_account(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_curve() -> RateCurve<f64> {
        RateCurve::new(vec![0.0, 1.0], vec![0.01, 0.03]).unwrap()
    }

    /// Midpoint Riemann sum of the short rate, independent of `integral`.
    fn riemann_log_account(curve: &RateCurve<f64>, t: f64, steps: usize) -> f64 {
        let h = t / steps as f64;
        (0..steps).map(|i| curve.rate_at((i as f64 + 0.5) * h) * h).sum()
    }

    #[test]
    fn zero_rate_account_is_one() {
        assert_eq!(RateCurve::<f64>::zero().cash_account(5.0).unwrap(), 1.0);
    }

    #[test]
    fn flat_rate_account_is_exponential() {
        let b = RateCurve::flat(0.02f64).cash_account(1.0).unwrap();
        assert!((b - 0.02f64.exp()).abs() < 1e-15);
        assert!((b - 1.020_201_340_026_756).abs() < 1e-14);
    }

    #[test]
    fn account_at_origin_is_one() {
        assert_eq!(step_curve().cash_account(0.0).unwrap(), 1.0);
    }

    #[test]
    fn step_curve_matches_riemann_oracle() {
        let c = step_curve();
        let exact = c.cash_account(2.0).unwrap();
        let oracle = riemann_log_account(&c, 2.0, 1_000_000).exp();
        assert!((exact - oracle).abs() < 1e-9);
        assert!((exact - 0.04f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn integral_inside_single_piece_and_across_knots() {
        let c: RateCurve<f64> = RateCurve::new(vec![0.0, 1.0, 3.0], vec![0.01, 0.02, -0.01]).unwrap();
        assert!((c.integral(0.25, 0.75) - 0.005).abs() < 1e-16);
        // 0.5*0.01 + 2*0.02 + 1*(-0.01)
        assert!((c.integral(0.5, 4.0) - 0.035).abs() < 1e-15);
        assert_eq!(c.integral(2.0, 2.0), 0.0);
    }

    #[test]
    fn rate_lookup_is_right_continuous() {
        let c = step_curve();
        assert_eq!(c.rate_at(0.999), 0.01);
        assert_eq!(c.rate_at(1.0), 0.03);
        assert_eq!(c.rate_at(50.0), 0.03);
    }

    #[test]
    fn negative_time_is_rejected() {
        assert!(matches!(
            step_curve().cash_account(-0.1),
            Err(ModelError::NegativeTime(_))
        ));
    }

    #[test]
    fn malformed_curves_are_rejected() {
        assert_eq!(
            RateCurve::<f64>::new(vec![0.5], vec![0.1]),
            Err(CurveError::FirstKnotNotZero(0.5))
        );
        assert_eq!(
            RateCurve::<f64>::new(vec![0.0, 1.0, 1.0], vec![0.1, 0.1, 0.1]),
            Err(CurveError::NotAscending(2))
        );
        assert!(RateCurve::<f64>::new(vec![], vec![]).is_err());
    }

    #[test]
    fn combine_takes_union_of_knots() {
        let a: RateCurve<f64> = RateCurve::new(vec![0.0, 1.0], vec![0.01, 0.02]).unwrap();
        let b = RateCurve::new(vec![0.0, 2.0], vec![0.005, 0.0]).unwrap();
        let d = a.combine(&b, |x, y| x - y);
        assert_eq!(d.knots(), &[0.0, 1.0, 2.0]);
        assert!((d.integral(0.0, 3.0) - (a.integral(0.0, 3.0) - b.integral(0.0, 3.0))).abs() < 1e-16);
    }

    proptest::proptest! {
        #[test]
        fn account_is_positive_and_nondecreasing_for_nonnegative_rates(
            r0 in 0.0f64..0.2, r1 in 0.0f64..0.2, k in 0.1f64..5.0,
            t1 in 0.0f64..10.0, dt in 0.0f64..10.0,
        ) {
            let c = RateCurve::new(vec![0.0, k], vec![r0, r1]).unwrap();
            let b1 = c.cash_account(t1).unwrap();
            let b2 = c.cash_account(t1 + dt).unwrap();
            proptest::prop_assert!(b1 > 0.0);
            proptest::prop_assert!(b2 >= b1);
        }
    }
}
