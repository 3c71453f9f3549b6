//! Elementwise, shape, and reduction ops with numpy-style broadcasting.

use std::sync::Arc;

use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::{Graph, NodeId, Op};

type Sink<'a> = &'a mut dyn FnMut(NodeId, ArrayD<f64>);

/// Right-aligned broadcast shape of two shapes; panics on incompatibility.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("cannot broadcast shapes {a:?} and {b:?}"),
        };
    }
    out
}

fn broadcast_to(v: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    v.broadcast(IxDyn(shape))
        .unwrap_or_else(|| panic!("cannot broadcast {:?} to {:?}", v.shape(), shape))
        .to_owned()
}

/// Reduce a broadcasted gradient back to the original operand shape.
pub(crate) fn unbroadcast(grad: &ArrayD<f64>, shape: &[usize]) -> ArrayD<f64> {
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape.iter()).enumerate() {
        if sd == 1 && gd != 1 {
            let summed = g.sum_axis(Axis(ax));
            g = summed.insert_axis(Axis(ax));
        }
    }
    g
}

fn binary_forward(
    g: &mut Graph,
    a: NodeId,
    b: NodeId,
    f: impl Fn(f64, f64) -> f64,
) -> (ArrayD<f64>, bool) {
    let shape = broadcast_shape(g.shape(a), g.shape(b));
    let av = broadcast_to(g.value(a), &shape);
    let bv = broadcast_to(g.value(b), &shape);
    let mut out = av;
    out.zip_mut_with(&bv, |x, &y| *x = f(*x, y));
    (out, g.needs(a) || g.needs(b))
}

impl Graph {
    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (v, ng) = binary_forward(self, a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (v, ng) = binary_forward(self, a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (v, ng) = binary_forward(self, a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (v, ng) = binary_forward(self, a, b, |x, y| x / y);
        self.push(v, Op::Div(a, b), ng)
    }

    /// y = mul * x + add
    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let v = self.value(x).mapv(|t| mul * t + add);
        let ng = self.needs(x);
        self.push(v, Op::Affine { x, mul, add }, ng)
    }

    pub fn neg(&mut self, x: NodeId) -> NodeId {
        self.affine(x, -1.0, 0.0)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.affine(x, s, 0.0)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).mapv(f64::sqrt);
        let ng = self.needs(x);
        self.push(v, Op::Sqrt(x), ng)
    }

    pub fn permute(&mut self, x: NodeId, axes: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let ng = self.needs(x);
        self.push(
            v,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(x)
            .view()
            .to_shape(IxDyn(shape))
            .unwrap_or_else(|_| panic!("reshape {:?} -> {:?}", self.shape(x), shape))
            .to_owned();
        let ng = self.needs(x);
        self.push(v, Op::Reshape { x }, ng)
    }

    /// Sum along one axis, keeping it with size 1.
    pub fn sum_axis_keep(&mut self, x: NodeId, axis: usize) -> NodeId {
        let v = self.value(x).sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let ng = self.needs(x);
        self.push(v, Op::SumAxis { x, axis }, ng)
    }

    /// Mean along one axis, keeping it with size 1.
    pub fn mean_axis_keep(&mut self, x: NodeId, axis: usize) -> NodeId {
        let n = self.shape(x)[axis] as f64;
        let s = self.sum_axis_keep(x, axis);
        self.scale(s, 1.0 / n)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let v = ndarray::arr0(self.value(x).sum()).into_dyn();
        let ng = self.needs(x);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = ndarray::arr0(self.value(x).sum() / self.value(x).len() as f64).into_dyn();
        let ng = self.needs(x);
        self.push(v, Op::MeanAll(x), ng)
    }

    pub fn select_rows(&mut self, x: NodeId, idx: &[usize]) -> NodeId {
        let xv = self.value(x);
        let rows = xv.shape()[0];
        for &i in idx {
            assert!(i < rows, "select_rows index {i} out of {rows}");
        }
        let v = xv.select(Axis(0), idx);
        let ng = self.needs(x);
        self.push(
            v,
            Op::SelectRows {
                x,
                idx: Arc::new(idx.to_vec()),
            },
            ng,
        )
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> NodeId {
        assert!(!xs.is_empty());
        let views: Vec<_> = xs.iter().map(|&n| self.value(n).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        let ng = xs.iter().any(|&n| self.needs(n));
        self.push(
            v,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Identity value, gradient barrier.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::Detach(x), false)
    }

    /// Clamp into [-bound, bound].
    pub fn clamp_abs(&mut self, x: NodeId, bound: f64) -> NodeId {
        let v = self.value(x).mapv(|t| t.clamp(-bound, bound));
        let ng = self.needs(x);
        self.push(v, Op::ClampAbs { x, bound }, ng)
    }
}

pub(crate) fn clamp_abs_bwd(g: &Graph, x: NodeId, bound: f64, grad: &ArrayD<f64>, sink: Sink) {
    let xv = g.value(x);
    let mut dx = grad.clone();
    dx.zip_mut_with(xv, |gd, &t| {
        if t.abs() > bound {
            *gd = 0.0;
        }
    });
    sink(x, dx);
}

pub(crate) fn affine_bwd(x: NodeId, mul: f64, grad: &ArrayD<f64>, sink: Sink) {
    sink(x, grad.mapv(|g| g * mul));
}

pub(crate) fn add_bwd(g: &Graph, a: NodeId, b: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    sink(a, unbroadcast(grad, g.shape(a)));
    sink(b, unbroadcast(grad, g.shape(b)));
}

pub(crate) fn sub_bwd(g: &Graph, a: NodeId, b: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    sink(a, unbroadcast(grad, g.shape(a)));
    sink(b, unbroadcast(&grad.mapv(|x| -x), g.shape(b)));
}

pub(crate) fn mul_bwd(g: &Graph, a: NodeId, b: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let shape = broadcast_shape(g.shape(a), g.shape(b));
    let av = broadcast_to(g.value(a), &shape);
    let bv = broadcast_to(g.value(b), &shape);
    sink(a, unbroadcast(&(grad * &bv), g.shape(a)));
    sink(b, unbroadcast(&(grad * &av), g.shape(b)));
}

pub(crate) fn div_bwd(g: &Graph, a: NodeId, b: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let shape = broadcast_shape(g.shape(a), g.shape(b));
    let av = broadcast_to(g.value(a), &shape);
    let bv = broadcast_to(g.value(b), &shape);
    sink(a, unbroadcast(&(grad / &bv), g.shape(a)));
    let db = grad * &av.mapv(|x| -x) / &bv.mapv(|x| x * x);
    sink(b, unbroadcast(&db, g.shape(b)));
}

pub(crate) fn sqrt_bwd(g: &Graph, x: NodeId, out: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let y = g.value(out);
    sink(x, grad * &y.mapv(|v| 0.5 / v));
}

pub(crate) fn permute_bwd(x: NodeId, axes: &[usize], grad: &ArrayD<f64>, sink: Sink) {
    let mut inverse = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    sink(
        x,
        grad.view()
            .permuted_axes(IxDyn(&inverse))
            .as_standard_layout()
            .to_owned(),
    );
}

pub(crate) fn reshape_bwd(g: &Graph, x: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let shape = g.shape(x).to_vec();
    sink(
        x,
        grad.view().to_shape(IxDyn(&shape)).unwrap().to_owned(),
    );
}

pub(crate) fn sum_axis_bwd(g: &Graph, x: NodeId, _axis: usize, grad: &ArrayD<f64>, sink: Sink) {
    sink(x, broadcast_to(grad, g.shape(x)));
}

pub(crate) fn sum_all_bwd(g: &Graph, x: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let s = grad.iter().next().copied().unwrap_or(0.0);
    sink(x, ArrayD::from_elem(IxDyn(g.shape(x)), s));
}

pub(crate) fn mean_all_bwd(g: &Graph, x: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let n = g.value(x).len() as f64;
    let s = grad.iter().next().copied().unwrap_or(0.0) / n;
    sink(x, ArrayD::from_elem(IxDyn(g.shape(x)), s));
}

pub(crate) fn select_rows_bwd(g: &Graph, x: NodeId, idx: &[usize], grad: &ArrayD<f64>, sink: Sink) {
    let mut dx = ArrayD::zeros(IxDyn(g.shape(x)));
    for (k, &i) in idx.iter().enumerate() {
        let mut row = dx.index_axis_mut(Axis(0), i);
        row += &grad.index_axis(Axis(0), k);
    }
    sink(x, dx);
}

pub(crate) fn concat_bwd(g: &Graph, xs: &[NodeId], axis: usize, grad: &ArrayD<f64>, sink: Sink) {
    let mut start = 0isize;
    for &x in xs {
        let len = g.shape(x)[axis] as isize;
        let part = grad
            .slice_axis(Axis(axis), Slice::new(start, Some(start + len), 1))
            .to_owned();
        sink(x, part);
        start += len;
    }
}
