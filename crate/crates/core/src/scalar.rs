//! Scalar abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the policy, losses and metrics are generic over.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossy conversion from an `f64` literal or intermediate.
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    #[inline]
    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize is representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Kahan-compensated accumulator, used where sums must not depend on
/// evaluation order beyond rounding of the final result.
#[derive(Debug, Clone, Copy, Default)]
pub struct KahanSum<S> {
    sum: S,
    carry: S,
}

impl<S: Scalar> KahanSum<S> {
    pub fn new() -> Self {
        Self { sum: S::zero(), carry: S::zero() }
    }

    pub fn add(&mut self, v: S) {
        let y = v - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }

    pub fn value(&self) -> S {
        self.sum
    }
}

impl<S: Scalar> FromIterator<S> for KahanSum<S> {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        let mut acc = Self::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Numerically stable `log(sigmoid(x))`.
pub fn log_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// In-place log-softmax; returns the log normalizer.
pub fn log_softmax_in_place<S: Scalar>(row: &mut [S]) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
    lse
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kahan_recovers_small_terms() {
        let mut acc = KahanSum::<f64>::new();
        acc.add(1e16);
        for _ in 0..10 {
            acc.add(1.0);
        }
        acc.add(-1e16);
        assert_eq!(acc.value(), 10.0);
    }

    #[test]
    fn log_sigmoid_matches_naive_in_safe_range() {
        for &x in &[-5.0f64, -0.3, 0.0, 0.7, 4.0] {
            let naive = (1.0 / (1.0 + (-x).exp())).ln();
            assert!((log_sigmoid(x) - naive).abs() < 1e-14);
            assert!((sigmoid(x) - naive.exp()).abs() < 1e-14);
        }
        assert!(log_sigmoid(-800.0f64).is_finite());
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut row = vec![0.5f64, -1.0, 2.0, 0.0];
        log_softmax_in_place(&mut row);
        let total: f64 = row.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
