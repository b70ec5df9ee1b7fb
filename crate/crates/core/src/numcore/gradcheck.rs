//! Finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numcore::graph::{Graph, Var};
use crate::numcore::tensor::Tensor;

/// Relative differences are measured against `max(|analytic|, |numeric|,`
/// [`REL_FLOOR`]`)` so that finite-difference noise on near-zero entries does
/// not register as disagreement.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_abs_diff: f64,
    pub max_rel_diff: f64,
    pub param_count: usize,
}

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences `(f(x+h) - f(x-h)) / 2h`, elementwise over `x`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::Parameter(format!("step h must be positive, got {h}")));
    }

    let eval = |probe: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(probe.clone());
        let out = f(&mut g, v)?;
        if g.value(out).len() != 1 {
            return Err(Error::Dimension(
                "grad_check target must evaluate to a scalar".into(),
            ));
        }
        let y = g.value(out).data()[0];
        if !y.is_finite() {
            return Err(Error::Numeric {
                context: "non-finite function value at finite-difference probe".into(),
                magnitude: y,
            });
        }
        Ok(y)
    };

    // Reverse-mode gradient at x.
    let mut g = Graph::new();
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return Err(Error::Dimension(
            "grad_check target must evaluate to a scalar".into(),
        ));
    }
    g.backward(out)?;
    let analytic: Vec<f64> = match g.grad(v) {
        Some(grad) => grad.to_vec(),
        None => vec![0.0; x.len()],
    };

    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let diff = (analytic[i] - numeric).abs();
        max_abs = max_abs.max(diff);
        let denom = analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        max_rel = max_rel.max(diff / denom);
    }

    Ok(GradCheckReport {
        max_abs_diff: max_abs,
        max_rel_diff: max_rel,
        param_count: x.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_gradient() {
        let x = Tensor::new(&[3], vec![0.3, -1.0, 2.0]).unwrap();
        let report = grad_check(
            |g, _| {
                let c = g.constant(Tensor::scalar(4.2));
                g.sum_all(c)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.max_abs_diff < 1e-10, "{report:?}");
        assert_eq!(report.param_count, 3);
    }

    #[test]
    fn sum_of_squares_matches_analytic_gradient() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        // f(x) = sum(x^2), grad = [2, 4]
        let report = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                g.sum_all(sq)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(report.max_rel_diff < 1e-6, "{report:?}");

        let mut g = Graph::new();
        let v = g.param(x);
        let sq = g.mul(v, v).unwrap();
        let s = g.sum_all(sq).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(v).unwrap();
        assert!((grad[0] - 2.0).abs() < 1e-12);
        assert!((grad[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_nonpositive_step() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            grad_check(|g, v| g.sum_all(v), &x, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn reports_numeric_error_on_nonfinite_probe() {
        use crate::activations::ActivationKind;
        let x = Tensor::scalar(709.9);
        let err = grad_check(
            |g, v| {
                let e = g.activation(v, ActivationKind::Exp)?;
                g.sum_all(e)
            },
            &x,
            1.0,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }
}
