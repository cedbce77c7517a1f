//! Floating-point abstraction shared by the model, optimizer and aggregation code.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the simulator can run on.
///
/// Implemented for `f32` (fast experiment runs) and `f64` (gradient checks,
/// exactness tests).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short name used in run manifests.
    const NAME: &'static str;

    #[inline]
    fn of(v: f64) -> Self {
        // f32/f64 conversions from f64 never fail
        Self::from_f64(v).unwrap()
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Numerically stable softmax. Returns an all-equal distribution for empty
/// or fully `-inf` input instead of NaNs.
pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    if logits.is_empty() {
        return Vec::new();
    }
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        let u = S::one() / S::of(logits.len() as f64);
        return vec![u; logits.len()];
    }
    let exps: Vec<S> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `ln Σ exp(x)` with max subtraction.
pub fn log_sum_exp<S: Scalar>(logits: &[S]) -> S {
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    let total: S = logits.iter().map(|&l| (l - max).exp()).sum();
    max + total.ln()
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_closed_form() {
        let p = softmax(&[2f64.ln(), 0.0]);
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_handles_large_logits() {
        let p = softmax(&[1000f32, 1000.0, -1000.0]);
        assert!((p[0] - 0.5).abs() < 1e-6);
        assert!(p[2] == 0.0);
    }

    #[test]
    fn lse_matches_naive() {
        let x = [0.3f64, -1.2, 2.5];
        let naive = x.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&x) - naive).abs() < 1e-12);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0]), 1);
    }
}
