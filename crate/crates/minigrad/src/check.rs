//! Central finite-difference verification of backward passes. Always runs
//! in f64; the training path stays f32.

use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Relative-error report for one checked tensor.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares the backward gradient of `f` w.r.t. `point` against central
/// finite differences. `f` must rebuild the graph from scratch on every call
/// and return a scalar. Error metric per element:
/// `|analytic - numeric| / max(|analytic|, 1e-8)`.
pub fn grad_check<F>(point: &Tensor<f64>, eps: f64, f: F) -> GradReport
where
    F: Fn(&mut Graph<f64>, Var) -> Var,
{
    let mut g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&mut g, x);
    assert_eq!(g.val(loss).numel(), 1, "grad_check needs a scalar objective");
    g.backward(loss);
    let analytic = g
        .grad(x)
        .expect("objective does not depend on the checked tensor")
        .to_vec();

    let eval = |t: &Tensor<f64>| -> f64 {
        let mut g = Graph::new();
        let x = g.param(t.clone());
        let loss = f(&mut g, x);
        g.val(loss).data[0]
    };

    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data[i] += eps;
        let mut minus = point.clone();
        minus.data[i] -= eps;
        let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    report
}
