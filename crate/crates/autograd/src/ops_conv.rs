//! Spatial ops on NCHW tensors: grouped conv, transposed conv, pooling,
//! bilinear resizing. Convolutions go through im2col + dgemm.

use ndarray::{Array2, Array4, ArrayD, ArrayView3, ArrayViewMut3, Ix4, s};

use crate::{Graph, NodeId, Op};

type Sink<'a> = &'a mut dyn FnMut(NodeId, ArrayD<f64>);

pub(crate) fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// (C,H,W) -> (C*kh*kw, Ho*Wo), zero padding. Row index = c*kh*kw + ky*kw + kx.
fn im2col(x: ArrayView3<f64>, kh: usize, kw: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add transpose of `im2col` into a (C,H,W) buffer.
fn col2im(
    col: &Array2<f64>,
    mut out: ArrayViewMut3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) {
    let (c, h, w) = out.dim();
    let ho = conv_out_dim(h, kh, stride, pad);
    let wo = conv_out_dim(w, kw, stride, pad);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[[ci, iy as usize, ix as usize]] += col[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

impl Graph {
    /// Grouped 2-D convolution. x: (N,Ci,H,W), w: (Co,Ci/groups,kh,kw).
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, groups: usize, stride: usize, pad: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let (n, ci, h, wd) = xv.dim();
        let (co, cig, kh, kw) = wv.dim();
        assert_eq!(ci % groups, 0, "conv2d channels vs groups");
        assert_eq!(co % groups, 0, "conv2d out channels vs groups");
        assert_eq!(cig, ci / groups, "conv2d weight in-channels");
        let (ho, wo) = (conv_out_dim(h, kh, stride, pad), conv_out_dim(wd, kw, stride, pad));
        let cog = co / groups;
        let mut out = Array4::<f64>::zeros((n, co, ho, wo));
        for ni in 0..n {
            for g in 0..groups {
                let xs = xv.slice(s![ni, g * cig..(g + 1) * cig, .., ..]);
                let col = im2col(xs, kh, kw, stride, pad);
                let wg = wv
                    .slice(s![g * cog..(g + 1) * cog, .., .., ..])
                    .to_shape((cog, cig * kh * kw))
                    .unwrap()
                    .to_owned();
                let og = wg.dot(&col);
                let og = og.to_shape((cog, ho, wo)).unwrap();
                out.slice_mut(s![ni, g * cog..(g + 1) * cog, .., ..]).assign(&og);
            }
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(
            out.into_dyn(),
            Op::Conv2d {
                x,
                w,
                groups,
                stride,
                pad,
            },
            ng,
        )
    }

    /// Transposed 2-D convolution (no padding). x: (N,Ci,H,W), w: (Ci,Co,kh,kw).
    pub fn conv_transpose2d(&mut self, x: NodeId, w: NodeId, stride: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let wv = self.value(w).view().into_dimensionality::<Ix4>().unwrap();
        let (n, ci, h, wd) = xv.dim();
        let (ciw, co, kh, kw) = wv.dim();
        assert_eq!(ci, ciw, "conv_transpose2d weight in-channels");
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        let wr = wv.to_shape((ci, co * kh * kw)).unwrap().to_owned();
        let mut out = Array4::<f64>::zeros((n, co, oh, ow));
        for ni in 0..n {
            let xs = xv
                .slice(s![ni, .., .., ..])
                .to_shape((ci, h * wd))
                .unwrap()
                .to_owned();
            let cols = wr.t().dot(&xs); // (co*kh*kw, h*wd)
            col2im(
                &cols,
                out.slice_mut(s![ni, .., .., ..]),
                kh,
                kw,
                stride,
                0,
            );
        }
        let ng = self.needs(x) || self.needs(w);
        self.push(out.into_dyn(), Op::ConvTranspose2d { x, w, stride }, ng)
    }

    /// Non-padded average pooling.
    pub fn avg_pool2d(&mut self, x: NodeId, k: usize, stride: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let (ho, wo) = (conv_out_dim(h, k, stride, 0), conv_out_dim(w, k, stride, 0));
        let inv = 1.0 / (k * k) as f64;
        let mut out = Array4::<f64>::zeros((n, c, ho, wo));
        for ni in 0..n {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..k {
                            for kx in 0..k {
                                acc += xv[[ni, ci, oy * stride + ky, ox * stride + kx]];
                            }
                        }
                        out[[ni, ci, oy, ox]] = acc * inv;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::AvgPool2d { x, k, stride }, ng)
    }

    /// Adaptive average pooling to (out_h, out_w) with floor/ceil bins.
    pub fn adaptive_avg_pool2d(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, c, out_h, out_w));
        for oy in 0..out_h {
            let (y0, y1) = bin_bounds(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1) = bin_bounds(ox, out_w, w);
                let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                for ni in 0..n {
                    for ci in 0..c {
                        let mut acc = 0.0;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc += xv[[ni, ci, iy, ix]];
                            }
                        }
                        out[[ni, ci, oy, ox]] = acc * inv;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::AdaptiveAvgPool2d { x, out_h, out_w }, ng)
    }

    /// Bilinear resizing with half-pixel centers, edge-clamped.
    pub fn resize_bilinear(&mut self, x: NodeId, out_h: usize, out_w: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        let mut out = Array4::<f64>::zeros((n, c, out_h, out_w));
        for oy in 0..out_h {
            let (y0, y1, ty) = src_coords(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, tx) = src_coords(ox, out_w, w);
                for ni in 0..n {
                    for ci in 0..c {
                        let v = xv[[ni, ci, y0, x0]] * (1.0 - ty) * (1.0 - tx)
                            + xv[[ni, ci, y0, x1]] * (1.0 - ty) * tx
                            + xv[[ni, ci, y1, x0]] * ty * (1.0 - tx)
                            + xv[[ni, ci, y1, x1]] * ty * tx;
                        out[[ni, ci, oy, ox]] = v;
                    }
                }
            }
        }
        let ng = self.needs(x);
        self.push(out.into_dyn(), Op::ResizeBilinear { x, out_h, out_w }, ng)
    }
}

fn bin_bounds(i: usize, out: usize, input: usize) -> (usize, usize) {
    let start = i * input / out;
    let end = ((i + 1) * input).div_ceil(out);
    (start, end.max(start + 1).min(input))
}

fn src_coords(o: usize, out: usize, input: usize) -> (usize, usize, f64) {
    let src = ((o as f64 + 0.5) * input as f64 / out as f64 - 0.5).clamp(0.0, (input - 1) as f64);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(input - 1);
    (i0, i1, src - i0 as f64)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_bwd(
    g: &Graph,
    x: NodeId,
    w: NodeId,
    groups: usize,
    stride: usize,
    pad: usize,
    grad: &ArrayD<f64>,
    sink: Sink,
) {
    let xv = g.value(x).view().into_dimensionality::<Ix4>().unwrap();
    let wv = g.value(w).view().into_dimensionality::<Ix4>().unwrap();
    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
    let (n, _ci, _h, _wd) = xv.dim();
    let (co, cig, kh, kw) = wv.dim();
    let (_, _, ho, wo) = gv.dim();
    let cog = co / groups;
    let mut dx = Array4::<f64>::zeros(xv.dim());
    let mut dw = Array4::<f64>::zeros(wv.dim());
    for ni in 0..n {
        for gi in 0..groups {
            let wg = wv
                .slice(s![gi * cog..(gi + 1) * cog, .., .., ..])
                .to_shape((cog, cig * kh * kw))
                .unwrap()
                .to_owned();
            let dog = gv
                .slice(s![ni, gi * cog..(gi + 1) * cog, .., ..])
                .to_shape((cog, ho * wo))
                .unwrap()
                .to_owned();
            let dcol = wg.t().dot(&dog);
            col2im(
                &dcol,
                dx.slice_mut(s![ni, gi * cig..(gi + 1) * cig, .., ..]),
                kh,
                kw,
                stride,
                pad,
            );
            let xs = xv.slice(s![ni, gi * cig..(gi + 1) * cig, .., ..]);
            let col = im2col(xs, kh, kw, stride, pad);
            let dwg = dog.dot(&col.t());
            let dwg = dwg.to_shape((cog, cig, kh, kw)).unwrap();
            let mut slot = dw.slice_mut(s![gi * cog..(gi + 1) * cog, .., .., ..]);
            slot += &dwg;
        }
    }
    sink(x, dx.into_dyn());
    sink(w, dw.into_dyn());
}

pub(crate) fn conv_transpose2d_bwd(
    g: &Graph,
    x: NodeId,
    w: NodeId,
    stride: usize,
    grad: &ArrayD<f64>,
    sink: Sink,
) {
    let xv = g.value(x).view().into_dimensionality::<Ix4>().unwrap();
    let wv = g.value(w).view().into_dimensionality::<Ix4>().unwrap();
    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
    let (n, ci, h, wd) = xv.dim();
    let (_, co, kh, kw) = wv.dim();
    let wr = wv.to_shape((ci, co * kh * kw)).unwrap().to_owned();
    let mut dx = Array4::<f64>::zeros(xv.dim());
    let mut dw = Array2::<f64>::zeros((ci, co * kh * kw));
    for ni in 0..n {
        // dcols[(co,ky,kx), (i,j)] = grad[co, i*s+ky, j*s+kx]
        let dcols = im2col(gv.slice(s![ni, .., .., ..]), kh, kw, stride, 0);
        let dxn = wr.dot(&dcols);
        dx.slice_mut(s![ni, .., .., ..])
            .assign(&dxn.to_shape((ci, h, wd)).unwrap());
        let xs = xv
            .slice(s![ni, .., .., ..])
            .to_shape((ci, h * wd))
            .unwrap()
            .to_owned();
        dw += &xs.dot(&dcols.t());
    }
    let dw = dw.to_shape((ci, co, kh, kw)).unwrap().to_owned();
    sink(x, dx.into_dyn());
    sink(w, dw.into_dyn());
}

pub(crate) fn avg_pool2d_bwd(g: &Graph, x: NodeId, k: usize, stride: usize, grad: &ArrayD<f64>, sink: Sink) {
    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, ho, wo) = gv.dim();
    let mut dx = ArrayD::<f64>::zeros(g.value(x).raw_dim());
    let mut dxv = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
    let inv = 1.0 / (k * k) as f64;
    for ni in 0..n {
        for ci in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let gd = gv[[ni, ci, oy, ox]] * inv;
                    for ky in 0..k {
                        for kx in 0..k {
                            dxv[[ni, ci, oy * stride + ky, ox * stride + kx]] += gd;
                        }
                    }
                }
            }
        }
    }
    sink(x, dx);
}

pub(crate) fn adaptive_avg_pool2d_bwd(
    g: &Graph,
    x: NodeId,
    out_h: usize,
    out_w: usize,
    grad: &ArrayD<f64>,
    sink: Sink,
) {
    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
    let shape = g.value(x).raw_dim();
    let (h, w) = (shape[2], shape[3]);
    let (n, c) = (shape[0], shape[1]);
    let mut dx = ArrayD::<f64>::zeros(shape.clone());
    let mut dxv = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
    for oy in 0..out_h {
        let (y0, y1) = bin_bounds(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1) = bin_bounds(ox, out_w, w);
            let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
            for ni in 0..n {
                for ci in 0..c {
                    let gd = gv[[ni, ci, oy, ox]] * inv;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            dxv[[ni, ci, iy, ix]] += gd;
                        }
                    }
                }
            }
        }
    }
    sink(x, dx);
}

pub(crate) fn resize_bilinear_bwd(
    g: &Graph,
    x: NodeId,
    out_h: usize,
    out_w: usize,
    grad: &ArrayD<f64>,
    sink: Sink,
) {
    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
    let shape = g.value(x).raw_dim();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let mut dx = ArrayD::<f64>::zeros(shape.clone());
    let mut dxv = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
    for oy in 0..out_h {
        let (y0, y1, ty) = src_coords(oy, out_h, h);
        for ox in 0..out_w {
            let (x0, x1, tx) = src_coords(ox, out_w, w);
            for ni in 0..n {
                for ci in 0..c {
                    let gd = gv[[ni, ci, oy, ox]];
                    dxv[[ni, ci, y0, x0]] += gd * (1.0 - ty) * (1.0 - tx);
                    dxv[[ni, ci, y0, x1]] += gd * (1.0 - ty) * tx;
                    dxv[[ni, ci, y1, x0]] += gd * ty * (1.0 - tx);
                    dxv[[ni, ci, y1, x1]] += gd * ty * tx;
                }
            }
        }
    }
    sink(x, dx);
}
