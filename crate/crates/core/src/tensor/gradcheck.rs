//! Central-difference gradient oracle.

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_h(h: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(what, format!("function value {v}")))
    }
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor input.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'static>, Var) -> Var,
{
    check_h(h)?;
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_requires_grad(true));
    let y = f(&mut tape, x);
    finite(tape.scalar(y), "grad_check base point")?;
    let grads = tape.backward(y)?;
    let zeros = vec![0.0; point.len()];
    let analytic = grads.wrt(x).unwrap_or(&zeros).to_vec();
    let eval = |vals: Vec<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(point.shape().to_vec(), vals);
        let y = f(&mut tape, x);
        finite(tape.scalar(y), "grad_check perturbed point")
    };
    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.values().to_vec();
        plus[i] += h;
        let mut minus = point.values().to_vec();
        minus[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

/// Same oracle over every non-frozen parameter of `store`; rows pinned with
/// [`ParamStore::set_fixed_row`] are skipped.
pub fn grad_check_params<F>(store: &mut ParamStore, f: F, h: f64) -> Result<f64>
where
    F: for<'a> Fn(&mut Tape<'a>) -> Var,
{
    check_h(h)?;
    let grads = {
        let mut tape = Tape::with_params(store);
        let y = f(&mut tape);
        finite(tape.scalar(y), "grad_check_params base point")?;
        tape.backward(y)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(store);
        let y = f(&mut tape);
        finite(tape.scalar(y), "grad_check_params perturbed point")
    };
    let mut worst: f64 = 0.0;
    for id in store.ids().collect::<Vec<_>>() {
        if store.is_frozen(id) {
            continue;
        }
        let n = store.values(id).len();
        let analytic = grads.param(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let cols = *store.shape(id).last().unwrap_or(&1);
        let fixed = store.fixed_row(id);
        for i in 0..n {
            if Some(i / cols) == fixed {
                continue;
            }
            let orig = store.values(id)[i];
            store.values_mut(id)[i] = orig + h;
            let fp = eval(store)?;
            store.values_mut(id)[i] = orig - h;
            let fm = eval(store)?;
            store.values_mut(id)[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_function_is_exact() {
        let point = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |t, x| {
                let y = t.scale(x, 3.0);
                t.sum(y)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-10, "{err}");
    }

    #[test]
    fn corrupted_backward_rule_is_caught() {
        let point = Tensor::new(vec![3], vec![0.3, -0.7, 1.1]).unwrap();
        // forward tanh, backward claims d/dx = 1
        let err = grad_check(
            |t, x| {
                let y = t.map(x, f64::tanh, |_| 1.0);
                t.sum(y)
            },
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-2, "{err}");
    }

    #[test]
    fn rejects_bad_step_and_nonfinite_values() {
        let point = Tensor::new(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(|t, x| t.sum(x), &point, 1e-1).is_err());
        let r = grad_check(|t, x| t.map(x, |_| f64::INFINITY, |_| 0.0), &point, 1e-5);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }
}
