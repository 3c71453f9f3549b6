//! Softmax, layer norm, activations, and cross-entropy.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, Ix1, Ix2, Zip};

use crate::{Graph, NodeId, Op};

type Sink<'a> = &'a mut dyn FnMut(NodeId, ArrayD<f64>);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Graph {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: NodeId, axis: usize) -> NodeId {
        let mut v = self.value(x).clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let m = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in lane.iter_mut() {
                *e = (*e - m).exp();
                z += *e;
            }
            for e in lane.iter_mut() {
                *e /= z;
            }
        }
        let ng = self.needs(x);
        self.push(v, Op::Softmax { x, axis }, ng)
    }

    /// Layer normalization over `axis` with per-index scale/shift.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, axis: usize, eps: f64) -> NodeId {
        let d = self.shape(x)[axis];
        assert_eq!(self.shape(gamma), &[d], "layer_norm gamma shape");
        assert_eq!(self.shape(beta), &[d], "layer_norm beta shape");
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let mut v = self.value(x).clone();
        for mut lane in v.lanes_mut(Axis(axis)) {
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for (j, e) in lane.iter_mut().enumerate() {
                *e = (*e - mean) * inv * gv[j] + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                eps,
            },
            ng,
        )
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|t| {
            let u = GELU_C * (t + GELU_A * t * t * t);
            0.5 * t * (1.0 + u.tanh())
        });
        let ng = self.needs(x);
        self.push(v, Op::Gelu(x), ng)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(|t| t.max(0.0));
        let ng = self.needs(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// Mean cross-entropy over rows of (M,C) logits against integer targets.
    pub fn cross_entropy_mean(&mut self, logits: NodeId, targets: &[usize]) -> NodeId {
        let lv = self.value(logits).view().into_dimensionality::<Ix2>().unwrap();
        let (m, c) = lv.dim();
        assert_eq!(m, targets.len(), "cross_entropy target count");
        assert!(m > 0, "cross_entropy over zero rows");
        let mut total = 0.0;
        for (row, &t) in lv.outer_iter().zip(targets.iter()) {
            assert!(t < c, "cross_entropy target {t} out of {c} classes");
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|&z| (z - mx).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let v = ndarray::arr0(total / m as f64).into_dyn();
        let ng = self.needs(logits);
        self.push(
            v,
            Op::CrossEntropyMean {
                logits,
                targets: Arc::new(targets.to_vec()),
            },
            ng,
        )
    }
}

pub(crate) fn softmax_bwd(g: &Graph, x: NodeId, axis: usize, out: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let y = g.value(out);
    let mut dx = grad.clone();
    Zip::from(dx.lanes_mut(Axis(axis)))
        .and(y.lanes(Axis(axis)))
        .for_each(|mut dl, yl| {
            let dot: f64 = dl.iter().zip(yl.iter()).map(|(&a, &b)| a * b).sum();
            for (d, &yv) in dl.iter_mut().zip(yl.iter()) {
                *d = (*d - dot) * yv;
            }
        });
    sink(x, dx);
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_bwd(
    g: &Graph,
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    axis: usize,
    eps: f64,
    grad: &ArrayD<f64>,
    sink: Sink,
) {
    let xv = g.value(x);
    let gv = g.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
    let d = gv.len();
    let mut dgamma = vec![0.0; d];
    let mut dbeta = vec![0.0; d];
    let mut dx = xv.clone();
    Zip::from(dx.lanes_mut(Axis(axis)))
        .and(grad.lanes(Axis(axis)))
        .for_each(|mut xl_then_dxl, gl| {
            let n = xl_then_dxl.len() as f64;
            let mean = xl_then_dxl.sum() / n;
            let var = xl_then_dxl.iter().map(|&t| (t - mean) * (t - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            let xhat: Vec<f64> = xl_then_dxl.iter().map(|&t| (t - mean) * inv).collect();
            let dy_g: Vec<f64> = gl.iter().zip(gv.iter()).map(|(&a, &b)| a * b).collect();
            let mean_dyg = dy_g.iter().sum::<f64>() / n;
            let mean_dyg_xh = dy_g.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<f64>() / n;
            for j in 0..d {
                dgamma[j] += gl[j] * xhat[j];
                dbeta[j] += gl[j];
                xl_then_dxl[j] = inv * (dy_g[j] - mean_dyg - xhat[j] * mean_dyg_xh);
            }
        });
    sink(x, dx);
    sink(gamma, ndarray::Array1::from(dgamma).into_dyn());
    sink(beta, ndarray::Array1::from(dbeta).into_dyn());
}

pub(crate) fn gelu_bwd(g: &Graph, x: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let xv = g.value(x);
    let mut dx = grad.clone();
    dx.zip_mut_with(xv, |gd, &t| {
        let u = GELU_C * (t + GELU_A * t * t * t);
        let th = u.tanh();
        let dudx = GELU_C * (1.0 + 3.0 * GELU_A * t * t);
        *gd *= 0.5 * (1.0 + th) + 0.5 * t * (1.0 - th * th) * dudx;
    });
    sink(x, dx);
}

pub(crate) fn relu_bwd(g: &Graph, x: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let xv = g.value(x);
    let mut dx = grad.clone();
    dx.zip_mut_with(xv, |gd, &t| {
        if t <= 0.0 {
            *gd = 0.0;
        }
    });
    sink(x, dx);
}

pub(crate) fn cross_entropy_bwd(
    g: &Graph,
    logits: NodeId,
    targets: &[usize],
    grad: &ArrayD<f64>,
    sink: Sink,
) {
    let lv = g.value(logits).view().into_dimensionality::<Ix2>().unwrap();
    let (m, c) = lv.dim();
    let gs = grad.iter().next().copied().unwrap_or(0.0) / m as f64;
    let mut dl = ndarray::Array2::<f64>::zeros((m, c));
    for (i, (row, &t)) in lv.outer_iter().zip(targets.iter()).enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| (z - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..c {
            let p = exps[j] / z;
            dl[[i, j]] = gs * (p - if j == t { 1.0 } else { 0.0 });
        }
    }
    sink(logits, dl.into_dyn());
}
