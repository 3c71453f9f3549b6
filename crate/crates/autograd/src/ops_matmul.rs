//! Matrix products. 2-D and batched 3-D, backed by `ndarray::dot`.

use ndarray::{ArrayD, Axis, Ix2, Ix3};

use crate::{Graph, NodeId, Op};

type Sink<'a> = &'a mut dyn FnMut(NodeId, ArrayD<f64>);

impl Graph {
    /// (M,K) · (K,N) -> (M,N)
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let v = av.dot(&bv).into_dyn();
        let ng = self.needs(a) || self.needs(b);
        self.push(v, Op::MatMul(a, b), ng)
    }

    /// (B,M,K) · (B,K,N) -> (B,M,N)
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.value(b).view().into_dimensionality::<Ix3>().unwrap();
        let (ba, m, k) = av.dim();
        let (bb, k2, n) = bv.dim();
        assert_eq!(ba, bb, "bmm batch dims");
        assert_eq!(k, k2, "bmm inner dims");
        let mut out = ndarray::Array3::<f64>::zeros((ba, m, n));
        for i in 0..ba {
            let prod = av.index_axis(Axis(0), i).dot(&bv.index_axis(Axis(0), i));
            out.index_axis_mut(Axis(0), i).assign(&prod);
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::BatchMatMul(a, b), ng)
    }

    /// x · w + bias, shapes (M,K)·(K,N) + (N,)
    pub fn linear(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let y = self.matmul(x, w);
        self.add(y, bias)
    }
}

pub(crate) fn matmul_bwd(g: &Graph, a: NodeId, b: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let av = g.value(a).view().into_dimensionality::<Ix2>().unwrap();
    let bv = g.value(b).view().into_dimensionality::<Ix2>().unwrap();
    let gv = grad.view().into_dimensionality::<Ix2>().unwrap();
    sink(a, gv.dot(&bv.t()).into_dyn());
    sink(b, av.t().dot(&gv).into_dyn());
}

pub(crate) fn bmm_bwd(g: &Graph, a: NodeId, b: NodeId, grad: &ArrayD<f64>, sink: Sink) {
    let av = g.value(a).view().into_dimensionality::<Ix3>().unwrap();
    let bv = g.value(b).view().into_dimensionality::<Ix3>().unwrap();
    let gv = grad.view().into_dimensionality::<Ix3>().unwrap();
    let (bsz, m, k) = av.dim();
    let n = bv.dim().2;
    let mut da = ndarray::Array3::<f64>::zeros((bsz, m, k));
    let mut db = ndarray::Array3::<f64>::zeros((bsz, k, n));
    for i in 0..bsz {
        let gi = gv.index_axis(Axis(0), i);
        da.index_axis_mut(Axis(0), i)
            .assign(&gi.dot(&bv.index_axis(Axis(0), i).t()));
        db.index_axis_mut(Axis(0), i)
            .assign(&av.index_axis(Axis(0), i).t().dot(&gi));
    }
    sink(a, da.into_dyn());
    sink(b, db.into_dyn());
}
