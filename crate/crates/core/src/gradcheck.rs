//! Central finite-difference gradient checks.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of |analytic - fd| / max(1, |analytic|, |fd|)
    pub max_relative_error: f64,
    /// Worst error per checked parameter, in the order given.
    pub per_param: Vec<(String, f64)>,
    pub entries_checked: usize,
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences with step `fd_step`, for every entry of `params`.
/// `build` must be deterministic for fixed parameter values.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    fd_step: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.backward(loss, store)?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|&id| store.grad(id).expect("zeroed above").data().to_vec())
        .collect();

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::inference();
        let l = build(&mut g, store)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        per_param: Vec::with_capacity(params.len()),
        entries_checked: 0,
    };
    for (&id, an) in params.iter().zip(&analytic) {
        let mut worst = 0.0f64;
        for (k, &a) in an.iter().enumerate() {
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + fd_step;
            let plus = eval(store);
            store.value_mut(id).data_mut()[k] = orig - fd_step;
            let minus = eval(store);
            store.value_mut(id).data_mut()[k] = orig;
            let (plus, minus) = (plus?, minus?);
            let fd = (plus - minus) / (2.0 * fd_step);
            if !a.is_finite() || !fd.is_finite() {
                return Err(Error::NonFinite {
                    param: store.name(id).to_string(),
                    index: k,
                });
            }
            let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            worst = worst.max(err);
            report.entries_checked += 1;
        }
        report.max_relative_error = report.max_relative_error.max(worst);
        report.per_param.push((store.name(id).to_string(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::scalar(3.0)).unwrap();
        let r = grad_check(&mut s, &[x], 1e-5, |g, s| {
            let v = g.param(s, x);
            g.mul(v, v)
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-8, "{r:?}");
    }

    #[test]
    fn constant_graph_has_zero_error() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::row(vec![1.0, -2.0])).unwrap();
        let r = grad_check(&mut s, &[x], 1e-5, |g, s| {
            let _ = g.param(s, x);
            let c = g.constant(Tensor::scalar(4.0));
            Ok(g.scale(c, 2.0))
        })
        .unwrap();
        assert_eq!(r.max_relative_error, 0.0);
    }

    #[test]
    fn non_finite_reports_index() {
        let mut s = ParamStore::new();
        let x = s.add("x", Tensor::row(vec![1.0, 0.0])).unwrap();
        let err = grad_check(&mut s, &[x], 1e-5, |g, s| {
            let v = g.param(s, x);
            let inv = g.exp(v);
            let w = g.scale(inv, f64::INFINITY);
            Ok(g.sum(w))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 0, .. }), "{err}");
    }
}
