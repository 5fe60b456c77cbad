//! Central finite-difference verification of tape gradients.

use super::{Precision, Tape, Tensor, Var};
use crate::error::{MspError, Result};

/// Gradients smaller than this are compared in absolute rather than
/// relative terms, so that near-zero components do not amplify round-off.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-3)`, maximized
    /// over every checked coordinate.
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compare backward gradients of the scalar function `f` against central
/// differences `(f(x+h) - f(x-h)) / 2h` at every coordinate of every input.
///
/// `f` receives the inputs as differentiable leaves and must return a scalar.
/// Evaluation always uses `f64` tapes.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(MspError::Contract("grad_check step must be positive".into()));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::with_precision(Precision::F64);
        let vars: Vec<Var> = vals.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        if tape.value(out).numel() != 1 {
            return Err(MspError::Contract("grad_check function must be scalar".into()));
        }
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::with_precision(Precision::F64);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad(v)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: 0,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let x0 = input.data()[e];
            work[ti].data_mut()[e] = x0 + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[e] = x0 - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[e] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti].data()[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (ti, e);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::CustomOp;

    #[test]
    fn linear_function_is_exact() {
        let w = Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let r = grad_check(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                Ok(t.sum(p))
            },
            &[w, x],
            0.5,
            1e-12,
        )
        .unwrap();
        // each partial is linear in its own input, so any step is exact
        assert!(r.passed, "{r:?}");
    }

    struct BadSquare;

    impl CustomOp for BadSquare {
        fn name(&self) -> &str {
            "bad_square"
        }
        fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
            let d = inputs[0].data().iter().map(|x| x * x).collect();
            Tensor::new(inputs[0].shape().to_vec(), d)
        }
        fn backward(&self, inputs: &[&Tensor], _out: &Tensor, g: &[f64]) -> Vec<Vec<f64>> {
            // wrong: should be 2x
            vec![inputs[0].data().iter().zip(g).map(|(x, g)| 3.0 * x * g).collect()]
        }
    }

    #[test]
    fn corrupted_rule_is_flagged() {
        let x = Tensor::new(vec![2], vec![0.7, -1.3]).unwrap();
        let r = grad_check(
            |t, v| {
                let y = t.custom(Box::new(BadSquare), &[v[0]])?;
                Ok(t.sum(y))
            },
            &[x],
            1e-6,
            1e-5,
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 1e-2);
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|t, v| Ok(t.sum(v[0])), &[Tensor::scalar(1.0)], 0.0, 1e-5).is_err());
    }
}
