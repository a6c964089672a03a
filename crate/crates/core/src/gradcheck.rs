//! Central finite-difference verification of [`Graph::backprop`].
//!
//! Each parameter element is nudged by `±epsilon` and the tape is replayed
//! (see [`Graph::replay`]), so stop-gradient and gradient-scale nodes are
//! honoured by the numeric side too.
//!
//! Errors are relative with a unit floor on the denominator,
//! `|analytic − numeric| / max(1, |analytic|, |numeric|)`, which keeps
//! near-zero gradients from turning round-off into huge ratios.

use std::collections::HashMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ElementMismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub param: NodeId,
    pub max_rel_error: f64,
    pub failures: Vec<ElementMismatch>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.failures.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central differences `(f(w+ε) − f(w−ε)) / 2ε` for one parameter.
pub fn numeric_gradient(graph: &Graph, loss: NodeId, param: NodeId, epsilon: f64) -> Result<Tensor> {
    let base = graph.value(param).clone();
    let mut out = Vec::with_capacity(base.len());
    let mut overrides = HashMap::new();
    let mut probe = |delta: f64, i: usize| -> Result<f64> {
        let mut data = base.data().to_vec();
        data[i] += delta;
        overrides.insert(param, Tensor::new(base.shape().to_vec(), data)?);
        let values = graph.replay(&overrides)?;
        Ok(values[loss.index()].item().expect("scalar loss"))
    };
    for i in 0..base.len() {
        let plus = probe(epsilon, i)?;
        let minus = probe(-epsilon, i)?;
        out.push((plus - minus) / (2.0 * epsilon));
    }
    Tensor::new(base.shape().to_vec(), out)
}

pub fn check_gradients(graph: &Graph, loss: NodeId, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let analytic = graph.backprop(loss)?;
    let mut params = Vec::new();
    for (param, grad) in analytic.iter() {
        let numeric = numeric_gradient(graph, loss, param, epsilon)?;
        let mut check = ParamCheck {
            param,
            max_rel_error: 0.0,
            failures: Vec::new(),
        };
        for (index, (&a, &n)) in grad.data().iter().zip(numeric.data()).enumerate() {
            let rel_error = relative_error(a, n);
            check.max_rel_error = check.max_rel_error.max(rel_error);
            if rel_error > tolerance {
                check.failures.push(ElementMismatch {
                    index,
                    analytic: a,
                    numeric: n,
                    rel_error,
                });
            }
        }
        params.push(check);
    }
    Ok(GradCheckReport {
        epsilon,
        tolerance,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![0.4, -1.3, 2.2]).unwrap());
        let sq = g.square(w).unwrap();
        let l = g.sum(sq).unwrap();
        let report = check_gradients(&g, l, 1e-5, 1e-6).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-6, "{}", report.max_rel_error());
    }

    #[test]
    fn barrier_respecting_objective() {
        // l = sum(stop(x) * x): analytic gradient is stop(x) = x, not 2x.
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.7, -1.1]).unwrap());
        let s = g.stop_gradient(x).unwrap();
        let p = g.mul(s, x).unwrap();
        let l = g.sum(p).unwrap();
        let report = check_gradients(&g, l, 1e-5, 1e-8).unwrap();
        assert!(report.passed(), "{report:?}");
        let grads = g.backprop(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.7, -1.1]);
    }

    #[test]
    fn scaled_objective() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.5, 2.0]).unwrap());
        let s = g.gradient_scale(x, -3.0).unwrap();
        let e = g.exp(s).unwrap();
        let l = g.sum(e).unwrap();
        assert!(check_gradients(&g, l, 1e-5, 1e-7).unwrap().passed());
    }

    #[test]
    fn no_params_no_entries() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(1.0).unwrap());
        let l = g.square(c).unwrap();
        let report = check_gradients(&g, l, 1e-5, 1e-6).unwrap();
        assert!(report.params.is_empty());
        assert!(report.passed());
    }

    #[test]
    fn detects_wrong_gradients() {
        // A gradient scale makes backprop disagree with the plain function,
        // which numeric_gradient on an unscaled copy exposes.
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.5).unwrap());
        let s = g.gradient_scale(x, 2.0).unwrap();
        let l = g.square(s).unwrap();
        let analytic = g.backprop(l).unwrap().get(x).unwrap().item().unwrap();

        let mut plain = Graph::new();
        let px = plain.param(Tensor::scalar(1.5).unwrap());
        let pl = plain.square(px).unwrap();
        let numeric = numeric_gradient(&plain, pl, px, 1e-5).unwrap().item().unwrap();
        assert!(relative_error(analytic, numeric) > 0.1);
    }

    #[test]
    fn rejects_bad_epsilon() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0).unwrap());
        assert!(check_gradients(&g, x, 0.0, 1e-6).is_err());
    }
}
