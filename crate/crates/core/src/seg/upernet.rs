//! UperNet decoder: pyramid pooling on the deepest level, top-down FPN
//! fusion with lateral projections, concatenation at stride 4, and a
//! per-pixel classifier upsampled to the input resolution.

use rand_chacha::ChaCha8Rng;

use morsel_autograd::param::{he_normal, zeros};
use morsel_autograd::{Graph, NodeId, ParamId, ParamStore};

use crate::error::{Error, Result};

pub const PPM_SCALES: [usize; 4] = [1, 2, 3, 6];

struct ConvParams {
    w: ParamId,
    b: ParamId,
}

fn conv(
    ps: &mut ParamStore,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> ConvParams {
    ConvParams {
        w: ps.register(format!("{name}.weight"), he_normal(&[cout, cin, k, k], cin * k * k, rng)),
        b: ps.register(format!("{name}.bias"), zeros(&[cout])),
    }
}

fn apply_conv(g: &mut Graph, ps: &ParamStore, c: &ConvParams, x: NodeId, pad: usize) -> NodeId {
    let w = g.param(ps, c.w);
    let y = g.conv2d(x, w, 1, 1, pad);
    let b = g.param(ps, c.b);
    let cout = g.shape(y)[1];
    let br = g.reshape(b, &[1, cout, 1, 1]);
    g.add(y, br)
}

pub struct UperNet {
    pub in_channels: [usize; 4],
    pub fpn_channels: usize,
    pub num_classes: usize,
    ppm_convs: Vec<ConvParams>,
    ppm_fuse: ConvParams,
    laterals: Vec<ConvParams>,
    fpn_convs: Vec<ConvParams>,
    fuse: ConvParams,
    classifier: ConvParams,
}

impl UperNet {
    pub fn new(
        in_channels: [usize; 4],
        fpn_channels: usize,
        num_classes: usize,
        prefix: &str,
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let deep = in_channels[3];
        let ppm_convs = (0..PPM_SCALES.len())
            .map(|i| conv(ps, &format!("{prefix}ppm.conv{i}"), deep, fpn_channels, 1, rng))
            .collect();
        let ppm_fuse = conv(
            ps,
            &format!("{prefix}ppm.fuse"),
            deep + PPM_SCALES.len() * fpn_channels,
            fpn_channels,
            3,
            rng,
        );
        let laterals = (0..3)
            .map(|i| conv(ps, &format!("{prefix}lateral{i}"), in_channels[i], fpn_channels, 1, rng))
            .collect();
        let fpn_convs = (0..3)
            .map(|i| conv(ps, &format!("{prefix}fpn{i}"), fpn_channels, fpn_channels, 3, rng))
            .collect();
        let fuse = conv(
            ps,
            &format!("{prefix}fuse"),
            4 * fpn_channels,
            fpn_channels,
            3,
            rng,
        );
        let classifier = conv(ps, &format!("{prefix}classifier"), fpn_channels, num_classes, 1, rng);
        Self {
            in_channels,
            fpn_channels,
            num_classes,
            ppm_convs,
            ppm_fuse,
            laterals,
            fpn_convs,
            fuse,
            classifier,
        }
    }

    /// Decode a 4-level pyramid (strides 4/8/16/32) to per-pixel logits at
    /// the given input resolution.
    pub fn decode(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        levels: &[NodeId; 4],
        out_hw: (usize, usize),
    ) -> Result<NodeId> {
        for (i, &l) in levels.iter().enumerate() {
            let shape = g.shape(l).to_vec();
            if shape.len() != 4 {
                return Err(Error::Shape(format!("level {i} is not an NCHW map")));
            }
            if shape[1] != self.in_channels[i] {
                return Err(Error::Shape(format!(
                    "level {i} has {} channels, decoder expects {}",
                    shape[1], self.in_channels[i]
                )));
            }
            if i > 0 {
                let prev = g.shape(levels[i - 1]).to_vec();
                if prev[2] != shape[2] * 2 || prev[3] != shape[3] * 2 {
                    return Err(Error::Shape(format!(
                        "level {i} must halve the previous level: {prev:?} -> {shape:?}"
                    )));
                }
            }
        }
        // Pyramid pooling on the deepest level.
        let deep = levels[3];
        let (dh, dw) = {
            let s = g.shape(deep);
            (s[2], s[3])
        };
        let mut cat = vec![deep];
        for (i, &scale) in PPM_SCALES.iter().enumerate() {
            let pooled = g.adaptive_avg_pool2d(deep, scale, scale);
            let projected = apply_conv(g, ps, &self.ppm_convs[i], pooled, 0);
            let act = g.relu(projected);
            cat.push(g.resize_bilinear(act, dh, dw));
        }
        let stacked = g.concat(&cat, 1);
        let fused = apply_conv(g, ps, &self.ppm_fuse, stacked, 1);
        let top = g.relu(fused);
        // Top-down FPN with lateral 1x1 projections.
        let mut merged = [top; 4];
        for i in (0..3).rev() {
            let lateral = apply_conv(g, ps, &self.laterals[i], levels[i], 0);
            let s = g.shape(lateral).to_vec();
            let upper = g.resize_bilinear(merged[i + 1], s[2], s[3]);
            merged[i] = g.add(lateral, upper);
        }
        let mut outs = [top; 4];
        for i in 0..3 {
            let c = apply_conv(g, ps, &self.fpn_convs[i], merged[i], 1);
            outs[i] = g.relu(c);
        }
        // Gather every level at stride 4 and fuse.
        let (h4, w4) = {
            let s = g.shape(outs[0]);
            (s[2], s[3])
        };
        let mut gathered = Vec::with_capacity(4);
        for (i, &o) in outs.iter().enumerate() {
            gathered.push(if i == 0 { o } else { g.resize_bilinear(o, h4, w4) });
        }
        let cat = g.concat(&gathered, 1);
        let fused = apply_conv(g, ps, &self.fuse, cat, 1);
        let fused = g.relu(fused);
        let logits = apply_conv(g, ps, &self.classifier, fused, 0);
        Ok(g.resize_bilinear(logits, out_hw.0, out_hw.1))
    }
}

/// Auxiliary FCN head: 3x3 conv + classifier on one pyramid level,
/// upsampled to the input resolution.
pub struct FcnAux {
    conv: ConvParams,
    classifier: ConvParams,
}

impl FcnAux {
    pub fn new(
        in_channels: usize,
        mid_channels: usize,
        num_classes: usize,
        prefix: &str,
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: conv(ps, &format!("{prefix}conv"), in_channels, mid_channels, 3, rng),
            classifier: conv(ps, &format!("{prefix}classifier"), mid_channels, num_classes, 1, rng),
        }
    }

    pub fn decode(&self, g: &mut Graph, ps: &ParamStore, level: NodeId, out_hw: (usize, usize)) -> NodeId {
        let h = apply_conv(g, ps, &self.conv, level, 1);
        let h = g.relu(h);
        let logits = apply_conv(g, ps, &self.classifier, h, 0);
        g.resize_bilinear(logits, out_hw.0, out_hw.1)
    }
}
