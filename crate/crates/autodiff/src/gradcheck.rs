use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// max over coordinates of |analytic - numeric| / max(1, |numeric|)
    pub max_rel_error: f64,
    /// (input, flat index) pairs skipped because the function has a kink there
    pub skipped: Vec<(usize, usize)>,
    pub checked: usize,
}

/// One-sided slopes differing by more than this mark a non-differentiable point.
const KINK_TOLERANCE: f64 = 1e-2;

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&tape, &vars)?;
    let v = out.value();
    if v.len() != 1 {
        return Err(TensorError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.data()[0])
}

/// Checks the gradient of a scalar function of several inputs against
/// central finite differences with step `h`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], h: f64) -> Result<GradCheck>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(TensorError::InvalidArgument {
            op: "grad_check",
            reason: format!("step must be positive, got {h}"),
        });
    }
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|x| tape.param(x.clone())).collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.get(*v)).collect()
    };
    let f0 = eval(&f, inputs)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        skipped: Vec::new(),
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (k, x) in inputs.iter().enumerate() {
        for i in 0..x.len() {
            let orig = x.data()[i];
            probe[k].data_mut()[i] = orig + h;
            let fp = eval(&f, &probe)?;
            probe[k].data_mut()[i] = orig - h;
            let fm = eval(&f, &probe)?;
            probe[k].data_mut()[i] = orig;

            let forward = (fp - f0) / h;
            let backward = (f0 - fm) / h;
            let central = (fp - fm) / (2.0 * h);
            if (forward - backward).abs() > KINK_TOLERANCE * central.abs().max(1.0) {
                report.skipped.push((k, i));
                continue;
            }
            let err = (analytic[k].data()[i] - central).abs() / central.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_kink_is_skipped() {
        let x = Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let r = grad_check(|_, v| v[0].relu()?.sum(), &[x], 1e-5).unwrap();
        assert_eq!(r.skipped, vec![(0, 1)]);
        assert_eq!(r.checked, 2);
        assert!(r.max_rel_error < 1e-9);
    }

    #[test]
    fn non_scalar_output_is_an_error() {
        let x = Tensor::new(&[2], vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            grad_check(|_, v| v[0].square(), &[x], 1e-5),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn non_positive_step_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|_, v| v[0].square(), &[x], 0.0).is_err());
    }
}
