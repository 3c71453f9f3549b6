use std::sync::Arc;

use ndarray::ArrayD;

use crate::{Graph, NodeId};

type Sink<'a> = &'a mut dyn FnMut(NodeId, ArrayD<f64>);

/// Tape operation. Parents are `NodeId`s into the owning graph.
#[derive(Clone)]
pub enum Op {
    Leaf,
    /// y = mul * x + add (elementwise, scalar coefficients)
    Affine {
        x: NodeId,
        mul: f64,
        add: f64,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Sqrt(NodeId),
    /// 2-D matrix product (M,K)·(K,N)
    MatMul(NodeId, NodeId),
    /// Batched 3-D matrix product (B,M,K)·(B,K,N)
    BatchMatMul(NodeId, NodeId),
    Permute {
        x: NodeId,
        axes: Vec<usize>,
    },
    Reshape {
        x: NodeId,
    },
    SumAxis {
        x: NodeId,
        axis: usize,
    },
    SumAll(NodeId),
    MeanAll(NodeId),
    Softmax {
        x: NodeId,
        axis: usize,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        axis: usize,
        eps: f64,
    },
    Gelu(NodeId),
    Relu(NodeId),
    /// y = clamp(x, -bound, bound); gradient is zero outside the band.
    ClampAbs {
        x: NodeId,
        bound: f64,
    },
    /// Mean cross-entropy of row logits (M,C) against integer targets (len M).
    CrossEntropyMean {
        logits: NodeId,
        targets: Arc<Vec<usize>>,
    },
    /// Gather rows along axis 0; duplicate indices accumulate on backward.
    SelectRows {
        x: NodeId,
        idx: Arc<Vec<usize>>,
    },
    Concat {
        xs: Vec<NodeId>,
        axis: usize,
    },
    Detach(NodeId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        groups: usize,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        x: NodeId,
        w: NodeId,
        stride: usize,
    },
    AvgPool2d {
        x: NodeId,
        k: usize,
        stride: usize,
    },
    AdaptiveAvgPool2d {
        x: NodeId,
        out_h: usize,
        out_w: usize,
    },
    ResizeBilinear {
        x: NodeId,
        out_h: usize,
        out_w: usize,
    },
    /// Modulated deformable 3x3 sampling; see `Graph::deform_sample`.
    DeformSample {
        x: NodeId,
        offsets: NodeId,
        modulation: NodeId,
        groups: usize,
    },
}

impl Op {
    pub(crate) fn clone_shallow(&self) -> Op {
        self.clone()
    }

    pub(crate) fn backward(&self, g: &Graph, out: NodeId, grad: &ArrayD<f64>, sink: Sink) {
        use crate::{ops_basic, ops_conv, ops_deform, ops_matmul, ops_nn};
        match self {
            Op::Leaf => {}
            Op::Affine { x, mul, .. } => ops_basic::affine_bwd(*x, *mul, grad, sink),
            Op::Add(a, b) => ops_basic::add_bwd(g, *a, *b, grad, sink),
            Op::Sub(a, b) => ops_basic::sub_bwd(g, *a, *b, grad, sink),
            Op::Mul(a, b) => ops_basic::mul_bwd(g, *a, *b, grad, sink),
            Op::Div(a, b) => ops_basic::div_bwd(g, *a, *b, grad, sink),
            Op::Sqrt(x) => ops_basic::sqrt_bwd(g, *x, out, grad, sink),
            Op::MatMul(a, b) => ops_matmul::matmul_bwd(g, *a, *b, grad, sink),
            Op::BatchMatMul(a, b) => ops_matmul::bmm_bwd(g, *a, *b, grad, sink),
            Op::Permute { x, axes } => ops_basic::permute_bwd(*x, axes, grad, sink),
            Op::Reshape { x } => ops_basic::reshape_bwd(g, *x, grad, sink),
            Op::SumAxis { x, axis } => ops_basic::sum_axis_bwd(g, *x, *axis, grad, sink),
            Op::SumAll(x) => ops_basic::sum_all_bwd(g, *x, grad, sink),
            Op::MeanAll(x) => ops_basic::mean_all_bwd(g, *x, grad, sink),
            Op::Softmax { x, axis } => ops_nn::softmax_bwd(g, *x, *axis, out, grad, sink),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                eps,
            } => ops_nn::layer_norm_bwd(g, *x, *gamma, *beta, *axis, *eps, grad, sink),
            Op::Gelu(x) => ops_nn::gelu_bwd(g, *x, grad, sink),
            Op::Relu(x) => ops_nn::relu_bwd(g, *x, grad, sink),
            Op::ClampAbs { x, bound } => ops_basic::clamp_abs_bwd(g, *x, *bound, grad, sink),
            Op::CrossEntropyMean { logits, targets } => {
                ops_nn::cross_entropy_bwd(g, *logits, targets, grad, sink)
            }
            Op::SelectRows { x, idx } => ops_basic::select_rows_bwd(g, *x, idx, grad, sink),
            Op::Concat { xs, axis } => ops_basic::concat_bwd(g, xs, *axis, grad, sink),
            Op::Detach(_) => {}
            Op::Conv2d {
                x,
                w,
                groups,
                stride,
                pad,
            } => ops_conv::conv2d_bwd(g, *x, *w, *groups, *stride, *pad, grad, sink),
            Op::ConvTranspose2d { x, w, stride } => {
                ops_conv::conv_transpose2d_bwd(g, *x, *w, *stride, grad, sink)
            }
            Op::AvgPool2d { x, k, stride } => ops_conv::avg_pool2d_bwd(g, *x, *k, *stride, grad, sink),
            Op::AdaptiveAvgPool2d { x, out_h, out_w } => {
                ops_conv::adaptive_avg_pool2d_bwd(g, *x, *out_h, *out_w, grad, sink)
            }
            Op::ResizeBilinear { x, out_h, out_w } => {
                ops_conv::resize_bilinear_bwd(g, *x, *out_h, *out_w, grad, sink)
            }
            Op::DeformSample {
                x,
                offsets,
                modulation,
                groups,
            } => ops_deform::deform_sample_bwd(g, *x, *offsets, *modulation, *groups, grad, sink),
        }
    }
}
