//! Elementwise positivity transforms used in the attention normalisation
//! stage, with their first derivatives.
//!
//! `Exp` is the transform hidden inside standard softmax; `Softplus` is the
//! numerically safe replacement this crate is built around. `Identity` exists
//! so the normalisation stage can be ablated away entirely.

use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Exp,
    Relu,
    ReluSquared,
    Relu6,
    Gelu,
    Sigmoid,
    Softplus,
    Mish,
    Identity,
}

impl ActivationKind {
    pub const ALL: [ActivationKind; 9] = [
        ActivationKind::Exp,
        ActivationKind::Relu,
        ActivationKind::ReluSquared,
        ActivationKind::Relu6,
        ActivationKind::Gelu,
        ActivationKind::Sigmoid,
        ActivationKind::Softplus,
        ActivationKind::Mish,
        ActivationKind::Identity,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ActivationKind::Exp => "exp",
            ActivationKind::Relu => "relu",
            ActivationKind::ReluSquared => "relu_squared",
            ActivationKind::Relu6 => "relu6",
            ActivationKind::Gelu => "gelu",
            ActivationKind::Sigmoid => "sigmoid",
            ActivationKind::Softplus => "softplus",
            ActivationKind::Mish => "mish",
            ActivationKind::Identity => "identity",
        }
    }
}

/// Overflow-safe softplus: `x + log1p(exp(-x))` for positive x, `log1p(exp(x))`
/// otherwise. Exact to within one ulp of `ln(1 + e^x)` and finite for all
/// finite inputs.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gaussian_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2))
}

fn gaussian_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn apply_scalar(kind: ActivationKind, x: f64) -> Result<f64> {
    let y = match kind {
        ActivationKind::Exp => {
            let y = x.exp();
            if !y.is_finite() {
                return Err(Error::Numeric {
                    context: "exp overflow in activation".into(),
                    magnitude: x,
                });
            }
            y
        }
        ActivationKind::Relu => x.max(0.0),
        ActivationKind::ReluSquared => {
            let r = x.max(0.0);
            r * r
        }
        ActivationKind::Relu6 => x.max(0.0).min(6.0),
        ActivationKind::Gelu => x * gaussian_cdf(x),
        ActivationKind::Sigmoid => sigmoid(x),
        ActivationKind::Softplus => softplus(x),
        ActivationKind::Mish => x * softplus(x).tanh(),
        ActivationKind::Identity => x,
    };
    Ok(y)
}

/// First derivative. Non-differentiable points in the ReLU family take the
/// right-hand derivative.
pub fn derivative_scalar(kind: ActivationKind, x: f64) -> Result<f64> {
    let d = match kind {
        ActivationKind::Exp => {
            let y = x.exp();
            if !y.is_finite() {
                return Err(Error::Numeric {
                    context: "exp overflow in activation derivative".into(),
                    magnitude: x,
                });
            }
            y
        }
        ActivationKind::Relu => {
            if x >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::ReluSquared => 2.0 * x.max(0.0),
        ActivationKind::Relu6 => {
            if (0.0..6.0).contains(&x) {
                1.0
            } else {
                0.0
            }
        }
        ActivationKind::Gelu => gaussian_cdf(x) + x * gaussian_pdf(x),
        ActivationKind::Sigmoid => {
            let s = sigmoid(x);
            s * (1.0 - s)
        }
        ActivationKind::Softplus => sigmoid(x),
        ActivationKind::Mish => {
            let t = softplus(x).tanh();
            t + x * (1.0 - t * t) * sigmoid(x)
        }
        ActivationKind::Identity => 1.0,
    };
    Ok(d)
}

pub(crate) fn apply_slice(kind: ActivationKind, xs: &[f64]) -> Result<Vec<f64>> {
    xs.iter().map(|&x| apply_scalar(kind, x)).collect()
}

pub(crate) fn derivative_slice(kind: ActivationKind, xs: &[f64]) -> Result<Vec<f64>> {
    xs.iter().map(|&x| derivative_scalar(kind, x)).collect()
}

/// Elementwise application over a tensor.
pub fn apply(kind: ActivationKind, x: &Tensor) -> Result<Tensor> {
    Tensor::new(x.shape(), apply_slice(kind, x.data())?)
}

/// Elementwise derivative over a tensor.
pub fn derivative(kind: ActivationKind, x: &Tensor) -> Result<Tensor> {
    Tensor::new(x.shape(), derivative_slice(kind, x.data())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    #[test]
    fn softplus_at_zero_is_ln_two() {
        assert!((apply_scalar(ActivationKind::Softplus, 0.0).unwrap() - LN_2).abs() < 1e-15);
    }

    #[test]
    fn relu_splits_on_sign() {
        let x = Tensor::new(&[2], vec![-1.0, 2.0]).unwrap();
        let y = apply(ActivationKind::Relu, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 2.0]);
    }

    #[test]
    fn softplus_large_input_stays_finite_and_linear() {
        let y = apply_scalar(ActivationKind::Softplus, 1000.0).unwrap();
        assert!((y - 1000.0).abs() < 1e-9);
        let y = apply_scalar(ActivationKind::Softplus, -1000.0).unwrap();
        assert!(y.abs() < 1e-9);
    }

    #[test]
    fn exp_overflow_reports_offending_magnitude() {
        let err = apply_scalar(ActivationKind::Exp, 1000.0).unwrap_err();
        match err {
            Error::Numeric { magnitude, .. } => assert_eq!(magnitude, 1000.0),
            other => panic!("expected numeric error, got {other}"),
        }
    }

    #[test]
    fn softplus_derivative_is_sigmoid_half_at_zero() {
        assert!((derivative_scalar(ActivationKind::Softplus, 0.0).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn relu_derivative_uses_right_hand_convention() {
        assert_eq!(derivative_scalar(ActivationKind::Relu, 0.0).unwrap(), 1.0);
        assert_eq!(derivative_scalar(ActivationKind::Relu6, 0.0).unwrap(), 1.0);
        assert_eq!(derivative_scalar(ActivationKind::Relu6, 6.0).unwrap(), 0.0);
        assert_eq!(derivative_scalar(ActivationKind::ReluSquared, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn exp_derivative_equals_exp() {
        for &x in &[-3.0, -0.7, 0.0, 1.3, 4.2] {
            let a = apply_scalar(ActivationKind::Exp, x).unwrap();
            let d = derivative_scalar(ActivationKind::Exp, x).unwrap();
            assert!((a - d).abs() <= 1e-12 * a.abs());
        }
    }

    // Reference values computed with 40-digit arithmetic.
    #[test]
    fn gelu_and_mish_match_reference_values() {
        let cases = [
            (ActivationKind::Gelu, -2.0, -0.045500263896358414),
            (ActivationKind::Gelu, 0.5, 0.3457312306370066),
            (ActivationKind::Gelu, 1.0, 0.8413447460685429),
            (ActivationKind::Gelu, 2.0, 1.9544997361036416),
            (ActivationKind::Mish, -2.0, -0.25250148269570886),
            (ActivationKind::Mish, 0.5, 0.3752452113048951),
            (ActivationKind::Mish, 1.0, 0.8650983882673103),
            (ActivationKind::Mish, 2.0, 1.9439589595339945),
        ];
        for (kind, x, want) in cases {
            let got = apply_scalar(kind, x).unwrap();
            assert!(
                (got - want).abs() < 1e-10,
                "{}({x}) = {got}, want {want}",
                kind.name()
            );
        }
    }

    #[test]
    fn softplus_derivative_bounded_in_open_unit_interval() {
        // Strictly inside (0,1) wherever f64 can represent the openness.
        for i in -144..=144 {
            let x = i as f64 * 0.25;
            let d = derivative_scalar(ActivationKind::Softplus, x).unwrap();
            assert!(d > 0.0 && d < 1.0, "softplus'({x}) = {d} out of (0,1)");
        }
        // Saturated tails still respect the bound of one.
        for &x in &[-500.0, -50.0, 50.0, 500.0] {
            let d = derivative_scalar(ActivationKind::Softplus, x).unwrap();
            assert!(d > 0.0 && d <= 1.0, "softplus'({x}) = {d}");
        }
    }

    #[test]
    fn softplus_positive_and_strictly_increasing() {
        let mut prev = f64::NEG_INFINITY;
        for i in -100..=100 {
            let x = i as f64 * 0.25;
            let y = apply_scalar(ActivationKind::Softplus, x).unwrap();
            assert!(y > 0.0);
            assert!(y > prev);
            prev = y;
        }
    }

    #[test]
    fn relu_squared_equals_relu_squared_exactly() {
        for i in -40..=40 {
            let x = i as f64 * 0.37;
            let r = apply_scalar(ActivationKind::Relu, x).unwrap();
            let rs = apply_scalar(ActivationKind::ReluSquared, x).unwrap();
            assert_eq!(rs, r * r);
        }
    }

    #[test]
    fn derivatives_match_finite_differences_away_from_kinks() {
        let h = 1e-6;
        for kind in ActivationKind::ALL {
            for i in -60..=60 {
                let x = i as f64 * 0.35 + 0.017;
                // Skip kink neighbourhoods for the ReLU family.
                let near_kink = matches!(
                    kind,
                    ActivationKind::Relu | ActivationKind::ReluSquared | ActivationKind::Relu6
                ) && (x.abs() < 1e-3 || (x - 6.0).abs() < 1e-3);
                if near_kink {
                    continue;
                }
                let fp = apply_scalar(kind, x + h).unwrap();
                let fm = apply_scalar(kind, x - h).unwrap();
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = derivative_scalar(kind, x).unwrap();
                let denom = analytic.abs().max(numeric.abs()).max(1.0);
                assert!(
                    (analytic - numeric).abs() / denom < 1e-5,
                    "{} at {x}: analytic {analytic} vs numeric {numeric}",
                    kind.name()
                );
            }
        }
    }
}
