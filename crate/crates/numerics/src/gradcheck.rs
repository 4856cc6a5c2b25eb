//! Central-difference gradient checking in 64-bit.

use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a - n| / (|a| + |n| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares tape gradients of `f` with central differences for every
/// learnable tensor in `store`. `f` binds whatever parameters it needs and
/// returns a scalar node.
pub fn check_params<F>(store: &ParamStore<f64>, f: F, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    check_params_except(store, f, h, |_, _| false)
}

/// [`check_params`] that leaves out coordinates for which `skip(name, index)`
/// holds, e.g. ones whose exact gradient is identically zero and so have no
/// meaningful relative error.
pub fn check_params_except<F, S>(store: &ParamStore<f64>, f: F, h: f64, skip: S) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
    S: Fn(&str, usize) -> bool,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let v = f(&mut t, s)?;
        t.value(v).item()
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.value.requires_grad())
        .map(|(id, _)| id)
        .collect();
    for id in ids {
        let n = store.value(id).numel();
        let analytic = grads.get(id).cloned().unwrap_or_else(|| Tensor::zeros(store.value(id).shape()));
        for i in 0..n {
            if skip(&store.get(id).name, i) {
                continue;
            }
            let orig = store.value(id).data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(analytic.data()[i], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), i));
            }
        }
    }
    Ok(report)
}

/// Maximum relative error between the tape gradient of `f` at `x` and its
/// central-difference estimate.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone().with_requires_grad(true));
    let report = check_params(
        &store,
        |tape, s| {
            let v = tape.param(s, id);
            f(tape, v)
        },
        h,
    )?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::from_fn([7], |i| i as f64 * 0.4 - 1.3);
        let err = finite_diff_check(
            |t, v| {
                let sq = t.mul(v, v)?;
                Ok(t.sum_all(sq))
            },
            &x,
            DEFAULT_STEP,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn relative_error_metric() {
        assert!(relative_error(1.0, 1.1) > 0.04);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
