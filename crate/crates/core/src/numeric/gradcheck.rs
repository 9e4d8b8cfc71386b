//! Central-difference verification of tape gradients.

use super::tape::{ParamSet, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which parameter entries a gradient check perturbs.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    /// Every scalar of every parameter.
    All,
    /// At most this many evenly strided entries per parameter tensor.
    PerTensor(usize),
}

/// Maximum over checked entries of
/// `|analytic - central| / max(1, |central|)`.
pub fn grad_check<T, F>(params: &ParamSet<T>, step: T, f: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamSet<T>) -> Result<Var>,
{
    grad_check_with(params, step, Coverage::All, f)
}

pub fn grad_check_with<T, F>(params: &ParamSet<T>, step: T, coverage: Coverage, f: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamSet<T>) -> Result<Var>,
{
    if step <= T::zero() {
        return Err(Error::config("step", "must be positive"));
    }
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;
    let analytic = tape.param_grads(&grads, params);

    let eval = |p: &ParamSet<T>| -> Result<T> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        let v = t.scalar(l);
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {v} during grad check")));
        }
        Ok(v)
    };

    let mut worst = T::zero();
    let mut probe = params.clone();
    for id in params.ids() {
        let n = params.get(id).len();
        let stride = match coverage {
            Coverage::All => 1,
            Coverage::PerTensor(k) => n.div_ceil(k.max(1)).max(1),
        };
        for idx in (0..n).step_by(stride) {
            let orig = params.get(id).data()[idx];
            probe.get_mut(id).data_mut()[idx] = orig + step;
            let plus = eval(&probe)?;
            probe.get_mut(id).data_mut()[idx] = orig - step;
            let minus = eval(&probe)?;
            probe.get_mut(id).data_mut()[idx] = orig;

            let numeric = (plus - minus) / (step + step);
            let a = analytic[id.0].data()[idx];
            let rel = (a - numeric).abs() / T::one().max(numeric.abs());
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

/// Convenience: gradient check of a function of a single free tensor.
pub fn grad_check_tensor<T, F>(x: Tensor<T>, step: T, f: F) -> Result<T>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    let mut ps = ParamSet::new();
    let id = ps.add("x", x);
    grad_check(&ps, step, |tape, p| {
        let v = tape.param(p, id);
        f(tape, v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_step_squared() {
        let err = grad_check_tensor(Tensor::scalar(3.0f64), 1e-4, |t, x| {
            let sq = t.square(x);
            Ok(t.sum_all(sq))
        })
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn non_finite_loss_is_numeric_error() {
        let r = grad_check_tensor(Tensor::scalar(1.0f64), 1e-4, |t, x| {
            let c = t.constant(Tensor::scalar(f64::INFINITY));
            let s = t.add(x, c)?;
            Ok(t.sum_all(s))
        });
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_non_positive_step() {
        let r = grad_check_tensor(Tensor::scalar(1.0f64), 0.0, |t, x| Ok(t.sum_all(x)));
        assert!(r.is_err());
    }
}
