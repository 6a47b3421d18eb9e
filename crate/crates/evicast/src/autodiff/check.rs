//! Finite-difference verification of reverse-mode gradients.

use super::graph::Graph;
use super::tensor::Tensor;
use crate::{Error, Result};

/// Outcome of comparing analytic gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Reverse-mode gradients, one tensor per parameter.
    pub analytic: Vec<Tensor>,
    /// Central-difference gradients; NaN where the perturbed loss was
    /// non-finite (those coordinates are listed in `flagged`).
    pub finite_diff: Vec<Tensor>,
    /// max over coordinates of |a - f| / max(|a|, |f|, 1e-8), flagged
    /// coordinates excluded.
    pub max_rel_err: f64,
    /// (parameter index, flat coordinate) pairs where the loss could not be
    /// evaluated at the perturbed point.
    pub flagged: Vec<(usize, usize)>,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.flagged.is_empty() && self.max_rel_err < tol
    }
}

/// Compare the graph's reverse-mode gradients against central differences
/// `(f(θ+h) - f(θ-h)) / 2h` per parameter coordinate.
pub fn finite_diff_check(graph: &Graph, params: &[Tensor], step: f64) -> Result<GradReport> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Contract(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let (_, analytic) = graph.value_and_grad(params)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut finite_diff = Vec::with_capacity(params.len());
    let mut flagged = Vec::new();
    let mut max_rel_err = 0.0_f64;
    for p in 0..params.len() {
        let mut fd = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let original = work[p].data()[i];
            work[p].data_mut()[i] = original + step;
            let plus = graph.forward(&work).map(|e| e.loss());
            work[p].data_mut()[i] = original - step;
            let minus = graph.forward(&work).map(|e| e.loss());
            work[p].data_mut()[i] = original;
            match (plus, minus) {
                (Ok(fp), Ok(fm)) => {
                    let d = (fp - fm) / (2.0 * step);
                    fd.data_mut()[i] = d;
                    let a = analytic[p].data()[i];
                    let rel = (a - d).abs() / a.abs().max(d.abs()).max(1e-8);
                    max_rel_err = max_rel_err.max(rel);
                }
                _ => {
                    fd.data_mut()[i] = f64::NAN;
                    flagged.push((p, i));
                }
            }
        }
        finite_diff.push(fd);
    }
    Ok(GradReport {
        analytic,
        finite_diff,
        max_rel_err,
        flagged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GraphBuilder;

    #[test]
    fn square_at_three() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[]);
        let loss = b.square(x);
        let g = b.finish(loss).unwrap();
        let report = finite_diff_check(&g, &[Tensor::scalar(3.0)], 1e-5).unwrap();
        assert!((report.finite_diff[0].data()[0] - 6.0).abs() < 1e-6);
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn tanh_at_zero() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[]);
        let loss = b.tanh(x);
        let g = b.finish(loss).unwrap();
        let report = finite_diff_check(&g, &[Tensor::scalar(0.0)], 1e-5).unwrap();
        assert!((report.finite_diff[0].data()[0] - 1.0).abs() < 1e-9);
        assert!(report.passes(1e-6));
    }

    #[test]
    fn step_outside_contract_is_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[]);
        let loss = b.square(x);
        let g = b.finish(loss).unwrap();
        assert!(finite_diff_check(&g, &[Tensor::scalar(1.0)], 1e-2).is_err());
        assert!(finite_diff_check(&g, &[Tensor::scalar(1.0)], 1e-8).is_err());
    }

    #[test]
    fn non_finite_perturbation_flags_coordinate() {
        // log(x) at x slightly above 0: x - h goes negative -> NaN loss.
        let mut b = GraphBuilder::new();
        let x = b.param("x", &[]);
        let loss = b.log(x);
        let g = b.finish(loss).unwrap();
        let report = finite_diff_check(&g, &[Tensor::scalar(5e-6)], 1e-5).unwrap();
        assert_eq!(report.flagged, vec![(0, 0)]);
        assert!(report.finite_diff[0].data()[0].is_nan());
    }
}
