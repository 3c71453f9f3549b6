//! Central finite-difference gradient checking. The numeric side only ever
//! calls the forward pass, so it is an oracle independent of `backward`.

use ndarray::ArrayD;

use crate::{Graph, NodeId};

/// Worst-case errors of analytic vs numeric gradients.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn assert_rel_below(&self, tol: f64) {
        assert!(
            self.max_rel_err < tol,
            "gradient check failed: max relative error {:.3e} (abs {:.3e}) over {} entries, tolerance {:.1e}",
            self.max_rel_err,
            self.max_abs_err,
            self.checked,
            tol
        );
    }
}

/// Compare backward gradients of `build` (a scalar loss over leaf arrays)
/// against central finite differences with step `eps`.
///
/// Relative error uses max(|analytic|, |numeric|, 1e-6) as denominator so
/// near-zero entries are judged on absolute error.
pub fn grad_check(
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    inputs: &[ArrayD<f64>],
    eps: f64,
) -> GradCheckReport {
    let eval = |arrays: &[ArrayD<f64>]| -> f64 {
        let mut g = Graph::new();
        let leaves: Vec<NodeId> = arrays.iter().map(|a| g.leaf(a.clone())).collect();
        let loss = build(&mut g, &leaves);
        g.scalar(loss)
    };

    let mut g = Graph::new();
    let leaves: Vec<NodeId> = inputs.iter().map(|a| g.leaf(a.clone())).collect();
    let loss = build(&mut g, &leaves);
    g.backward(loss);
    let analytic: Vec<ArrayD<f64>> = leaves
        .iter()
        .zip(inputs.iter())
        .map(|(&l, a)| {
            g.grad(l)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(a.raw_dim()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        for idx in 0..input.len() {
            let orig = input.as_slice().unwrap()[idx];
            work[k].as_slice_mut().unwrap()[idx] = orig + eps;
            let up = eval(&work);
            work[k].as_slice_mut().unwrap()[idx] = orig - eps;
            let down = eval(&work);
            work[k].as_slice_mut().unwrap()[idx] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic[k].as_slice().unwrap()[idx];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(1e-6);
            report.max_abs_err = report.max_abs_err.max(abs);
            report.max_rel_err = report.max_rel_err.max(rel);
            report.checked += 1;
        }
    }
    report
}
