//! Modulated deformable 3x3 sampling with gradients for input, offsets,
//! and modulation scalars. Out-of-range sample locations contribute zeros.

use ndarray::{Array4, ArrayD, ArrayView2, Ix4};

use crate::{Graph, NodeId, Op};

type Sink<'a> = &'a mut dyn FnMut(NodeId, ArrayD<f64>);

pub(crate) const KERNEL: usize = 9; // 3x3 sample points

/// Bilinear lookup of a (H,W) plane at a real (y,x) point. Corner values
/// outside [0,H-1]x[0,W-1] contribute zero.
pub fn bilinear_sample(plane: ArrayView2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = plane.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let ty = y - y0;
    let tx = x - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0i64, 1.0 - ty), (1i64, ty)] {
        let iy = y0 as i64 + dy;
        if iy < 0 || iy >= h as i64 || wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - tx), (1i64, tx)] {
            let ix = x0 as i64 + dx;
            if ix < 0 || ix >= w as i64 || wx == 0.0 {
                continue;
            }
            acc += wy * wx * plane[[iy as usize, ix as usize]];
        }
    }
    acc
}

fn kernel_point(k: usize) -> (f64, f64) {
    ((k / 3) as f64 - 1.0, (k % 3) as f64 - 1.0)
}

impl Graph {
    /// out[n,c,p] = sum_k mod[n, g*9+k, p] * x[n,c] sampled at p + p_k + off,
    /// with g the channel group of c, p_k the 3x3 grid point, and
    /// off = offsets[n, (g*9+k)*2.., p] a fractional (dy,dx) shift.
    ///
    /// Shapes: x (N,C,H,W), offsets (N,2*G*9,H,W), modulation (N,G*9,H,W).
    pub fn deform_sample(&mut self, x: NodeId, offsets: NodeId, modulation: NodeId, groups: usize) -> NodeId {
        let xv = self.value(x).view().into_dimensionality::<Ix4>().unwrap();
        let ov = self.value(offsets).view().into_dimensionality::<Ix4>().unwrap();
        let mv = self.value(modulation).view().into_dimensionality::<Ix4>().unwrap();
        let (n, c, h, w) = xv.dim();
        assert_eq!(c % groups, 0, "deform_sample channels vs groups");
        assert_eq!(ov.dim(), (n, 2 * groups * KERNEL, h, w), "offsets shape");
        assert_eq!(mv.dim(), (n, groups * KERNEL, h, w), "modulation shape");
        let cg = c / groups;
        let mut out = Array4::<f64>::zeros((n, c, h, w));
        for ni in 0..n {
            for ci in 0..c {
                let g = ci / cg;
                let plane = xv.slice(ndarray::s![ni, ci, .., ..]);
                for py in 0..h {
                    for px in 0..w {
                        let mut acc = 0.0;
                        for k in 0..KERNEL {
                            let (ky, kx) = kernel_point(k);
                            let dy = ov[[ni, (g * KERNEL + k) * 2, py, px]];
                            let dx = ov[[ni, (g * KERNEL + k) * 2 + 1, py, px]];
                            let m = mv[[ni, g * KERNEL + k, py, px]];
                            acc += m * bilinear_sample(plane, py as f64 + ky + dy, px as f64 + kx + dx);
                        }
                        out[[ni, ci, py, px]] = acc;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(offsets) || self.needs(modulation);
        self.push(
            out.into_dyn(),
            Op::DeformSample {
                x,
                offsets,
                modulation,
                groups,
            },
            ng,
        )
    }
}

pub(crate) fn deform_sample_bwd(
    g: &Graph,
    x: NodeId,
    offsets: NodeId,
    modulation: NodeId,
    groups: usize,
    grad: &ArrayD<f64>,
    sink: Sink,
) {
    let xv = g.value(x).view().into_dimensionality::<Ix4>().unwrap();
    let ov = g.value(offsets).view().into_dimensionality::<Ix4>().unwrap();
    let mv = g.value(modulation).view().into_dimensionality::<Ix4>().unwrap();
    let gv = grad.view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = xv.dim();
    let cg = c / groups;
    let mut dx = Array4::<f64>::zeros(xv.dim());
    let mut doff = Array4::<f64>::zeros(ov.dim());
    let mut dmod = Array4::<f64>::zeros(mv.dim());
    for ni in 0..n {
        for ci in 0..c {
            let gi = ci / cg;
            for py in 0..h {
                for px in 0..w {
                    let go = gv[[ni, ci, py, px]];
                    if go == 0.0 {
                        continue;
                    }
                    for k in 0..KERNEL {
                        let (ky, kx) = kernel_point(k);
                        let dyo = ov[[ni, (gi * KERNEL + k) * 2, py, px]];
                        let dxo = ov[[ni, (gi * KERNEL + k) * 2 + 1, py, px]];
                        let m = mv[[ni, gi * KERNEL + k, py, px]];
                        let sy = py as f64 + ky + dyo;
                        let sx = px as f64 + kx + dxo;
                        let y0 = sy.floor();
                        let x0 = sx.floor();
                        let ty = sy - y0;
                        let tx = sx - x0;
                        // Corner values with zero outside; also accumulate the
                        // sampled value and its derivative w.r.t. (y, x).
                        let mut val = 0.0;
                        let mut d_dy = 0.0;
                        let mut d_dx = 0.0;
                        for (dy, wy, dwy) in [(0i64, 1.0 - ty, -1.0), (1i64, ty, 1.0)] {
                            let iy = y0 as i64 + dy;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for (ddx, wx, dwx) in [(0i64, 1.0 - tx, -1.0), (1i64, tx, 1.0)] {
                                let ix = x0 as i64 + ddx;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                let v = xv[[ni, ci, iy as usize, ix as usize]];
                                val += wy * wx * v;
                                d_dy += dwy * wx * v;
                                d_dx += wy * dwx * v;
                                dx[[ni, ci, iy as usize, ix as usize]] += go * m * wy * wx;
                            }
                        }
                        dmod[[ni, gi * KERNEL + k, py, px]] += go * val;
                        doff[[ni, (gi * KERNEL + k) * 2, py, px]] += go * m * d_dy;
                        doff[[ni, (gi * KERNEL + k) * 2 + 1, py, px]] += go * m * d_dx;
                    }
                }
            }
        }
    }
    sink(x, dx.into_dyn());
    sink(offsets, doff.into_dyn());
    sink(modulation, dmod.into_dyn());
}
