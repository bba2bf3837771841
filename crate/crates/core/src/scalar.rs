//! Scalar abstraction for the math core.
//!
//! Everything that is pure algebra (similarities, losses, diagnostics) is
//! generic over [`Scalar`] so the same code runs in `f32` and `f64`. Oracle
//! and metric paths instantiate at `f64`; the training stack is `f64` only.

use ndarray::ScalarOperand;
use num_traits::{Float, NumAssignOps};

/// Floating-point scalar usable throughout the math core.
pub trait Scalar:
    Float + NumAssignOps + ScalarOperand + std::fmt::Debug + std::fmt::Display + 'static
{
    /// Lossy conversion from `f64` (used for fixed hyperparameters).
    fn from_f64(v: f64) -> Self {
        Self::from(v).expect("f64 conversion")
    }

    /// Widen to `f64` for reporting.
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Numerically stable logistic function, clamped into the open interval
/// `(0, 1)` so downstream logs stay finite even for saturating inputs.
pub fn sigmoid<S: Scalar>(x: S) -> S {
    let one = S::one();
    let raw = if x >= S::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    };
    let eps = S::from_f64(1e-12).max(S::epsilon());
    raw.max(eps).min(one - eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_matches_reference() {
        assert!((sigmoid(1.0_f64) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((sigmoid(0.0_f64) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_stays_strictly_inside_unit_interval() {
        for &x in &[-1e3_f64, -40.0, 0.0, 40.0, 1e3] {
            let s = sigmoid(x);
            assert!(s > 0.0 && s < 1.0, "sigmoid({x}) = {s}");
        }
        let s32 = sigmoid(100.0_f32);
        assert!(s32 > 0.0 && s32 < 1.0);
    }
}
