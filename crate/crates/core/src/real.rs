//! Scalar abstraction shared by the model, caches and masks.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

/// Floating-point width used by a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Single,
    #[default]
    Double,
}

/// Real scalar usable by the toy model.
///
/// `mask_neg` is the value written into disallowed attention-mask entries:
/// the most negative finite number of the type. It stands in for −∞ so that
/// no `(−∞)·0` products can produce NaN, while `exp(mask_neg − max)` still
/// underflows to exactly zero.
pub trait Real: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static {
    const PRECISION: Precision;

    /// Absolute tolerance for comparing batched against sequential results.
    fn tolerance() -> Self;

    fn mask_neg() -> Self {
        Self::min_value()
    }

    fn from_f64_lossy(x: f64) -> Self {
        <Self as FromPrimitive>::from_f64(x).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Single;

    fn tolerance() -> Self {
        1e-3
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::Double;

    fn tolerance() -> Self {
        1e-6
    }
}

/// Index of the largest entry; ties go to the smallest index.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable `log_softmax`, computed in `f64`.
pub fn log_softmax<T: Real>(xs: &[T]) -> Vec<f64> {
    let max = xs.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let lse = xs.iter().map(|x| (x.as_f64() - max).exp()).sum::<f64>().ln() + max;
    xs.iter().map(|x| x.as_f64() - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_smallest_index_on_ties() {
        assert_eq!(argmax(&[1.0f64, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[5.0f32]), 0);
    }

    #[test]
    fn log_softmax_normalizes() {
        let lp = log_softmax(&[0.5f64, -1.0, 2.0]);
        let total: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mask_neg_underflows_to_zero_weight() {
        assert_eq!((f64::mask_neg() - 3.0).exp(), 0.0);
        assert_eq!((f32::mask_neg() - 3.0).exp(), 0.0);
    }
}
