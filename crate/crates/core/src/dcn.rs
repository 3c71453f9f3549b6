//! Hierarchical convolutional backbone built on a modulated deformable 3x3
//! operation: per-location offsets and softmax-normalized modulation
//! scalars are predicted from the input by a lightweight branch, features
//! are bilinearly sampled at the shifted points, aggregated per group, and
//! projected. Four stages at strides 4/8/16/32.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use morsel_autograd::param::{he_normal, zeros};
use morsel_autograd::{Graph, NodeId, ParamId, ParamStore};

use crate::error::{Error, Result};
use crate::vit::LN_EPS;

const KERNEL: usize = 9; // 3x3 sample points

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DcnConfig {
    pub stage_channels: [usize; 4],
    pub stage_blocks: [usize; 4],
    pub groups: [usize; 4],
    pub mlp_ratio: usize,
    /// Clamp bound on predicted offsets, in sample-grid units. None leaves
    /// them unbounded (toy default).
    pub offset_scale: Option<f64>,
}

impl DcnConfig {
    pub fn toy() -> Self {
        Self {
            stage_channels: [32, 64, 128, 256],
            stage_blocks: [1, 1, 2, 1],
            groups: [2, 4, 8, 16],
            mlp_ratio: 4,
            offset_scale: None,
        }
    }

    /// Base preset sized to land near the published 128M-parameter class.
    /// Stage dims are a design choice; only the total is calibrated.
    pub fn base() -> Self {
        Self {
            stage_channels: [144, 288, 576, 1152],
            stage_blocks: [4, 4, 18, 4],
            groups: [9, 18, 36, 72],
            mlp_ratio: 4,
            offset_scale: Some(3.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (i, (&c, &g)) in self.stage_channels.iter().zip(self.groups.iter()).enumerate() {
            if g == 0 || c % g != 0 {
                return Err(Error::Config(format!(
                    "stage {i}: channels {c} not divisible by groups {g}"
                )));
            }
        }
        Ok(())
    }

    /// Total backbone parameter count, computed without allocating weights.
    pub fn param_count(&self) -> usize {
        let mut total = 0usize;
        // Stem: conv 3->C1/2 (k3) + LN + conv C1/2->C1 (k3) + LN.
        let c1 = self.stage_channels[0];
        let mid = c1 / 2;
        total += mid * 3 * 9 + mid; // conv1
        total += 2 * mid; // ln1
        total += c1 * mid * 9 + c1; // conv2
        total += 2 * c1; // ln2
        for s in 0..4 {
            let c = self.stage_channels[s];
            let g = self.groups[s];
            let r = self.mlp_ratio;
            let per_block = 2 * c                    // ln1
                + c * 9 + c                          // depthwise 3x3
                + c * (2 * g * KERNEL) + 2 * g * KERNEL // offset head
                + c * (g * KERNEL) + g * KERNEL      // modulation head
                + c * (c / g) + c                    // grouped value projection
                + c * c + c                          // output projection
                + 2 * c                              // ln2
                + c * (r * c) + r * c                // ffn in
                + (r * c) * c + c; // ffn out
            total += per_block * self.stage_blocks[s];
            if s < 3 {
                let cn = self.stage_channels[s + 1];
                total += cn * c * 9 + cn; // downsample conv 3x3 s2
                total += 2 * cn; // downsample ln
            }
        }
        total
    }
}

/// Four feature maps at strides 4, 8, 16, 32.
pub struct FeaturePyramid {
    pub levels: [NodeId; 4],
    pub channels: [usize; 4],
}

struct DcnBlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    dw_w: ParamId,
    dw_b: ParamId,
    off_w: ParamId,
    off_b: ParamId,
    mod_w: ParamId,
    mod_b: ParamId,
    val_w: ParamId,
    val_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

struct Downsample {
    w: ParamId,
    b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
}

/// Backbone bound to a `ParamStore` under the `dcn.` prefix.
pub struct DcnBackbone {
    pub config: DcnConfig,
    stem1_w: ParamId,
    stem1_b: ParamId,
    stem_ln1_g: ParamId,
    stem_ln1_b: ParamId,
    stem2_w: ParamId,
    stem2_b: ParamId,
    stem_ln2_g: ParamId,
    stem_ln2_b: ParamId,
    stages: Vec<Vec<DcnBlockParams>>,
    downs: Vec<Downsample>,
}

fn ln_pair(ps: &mut ParamStore, name: &str, c: usize) -> (ParamId, ParamId) {
    (
        ps.register(format!("{name}.gamma"), ndarray::ArrayD::ones(ndarray::IxDyn(&[c]))),
        ps.register(format!("{name}.beta"), zeros(&[c])),
    )
}

impl DcnBackbone {
    pub fn new(
        config: DcnConfig,
        prefix: &str,
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let c1 = config.stage_channels[0];
        let mid = c1 / 2;
        let stem1_w = ps.register(
            format!("{prefix}stem.conv1.weight"),
            he_normal(&[mid, 3, 3, 3], 27, rng),
        );
        let stem1_b = ps.register(format!("{prefix}stem.conv1.bias"), zeros(&[mid]));
        let (stem_ln1_g, stem_ln1_b) = ln_pair(ps, &format!("{prefix}stem.ln1"), mid);
        let stem2_w = ps.register(
            format!("{prefix}stem.conv2.weight"),
            he_normal(&[c1, mid, 3, 3], mid * 9, rng),
        );
        let stem2_b = ps.register(format!("{prefix}stem.conv2.bias"), zeros(&[c1]));
        let (stem_ln2_g, stem_ln2_b) = ln_pair(ps, &format!("{prefix}stem.ln2"), c1);
        let mut stages = Vec::new();
        for s in 0..4 {
            let c = config.stage_channels[s];
            let g = config.groups[s];
            let r = config.mlp_ratio;
            let mut blocks = Vec::new();
            for j in 0..config.stage_blocks[s] {
                let name = format!("{prefix}s{s}.b{j}");
                let (ln1_g, ln1_b) = ln_pair(ps, &format!("{name}.ln1"), c);
                let dw_w = ps.register(
                    format!("{name}.dcn.dw.weight"),
                    he_normal(&[c, 1, 3, 3], 9, rng),
                );
                let dw_b = ps.register(format!("{name}.dcn.dw.bias"), zeros(&[c]));
                // Offsets and modulation logits start at zero: the op
                // begins as a plain averaged 3x3 aggregation.
                let off_w = ps.register(
                    format!("{name}.dcn.offset.weight"),
                    zeros(&[2 * g * KERNEL, c, 1, 1]),
                );
                let off_b = ps.register(format!("{name}.dcn.offset.bias"), zeros(&[2 * g * KERNEL]));
                let mod_w = ps.register(
                    format!("{name}.dcn.mod.weight"),
                    zeros(&[g * KERNEL, c, 1, 1]),
                );
                let mod_b = ps.register(format!("{name}.dcn.mod.bias"), zeros(&[g * KERNEL]));
                let val_w = ps.register(
                    format!("{name}.dcn.value.weight"),
                    he_normal(&[c, c / g, 1, 1], c / g, rng),
                );
                let val_b = ps.register(format!("{name}.dcn.value.bias"), zeros(&[c]));
                let proj_w = ps.register(
                    format!("{name}.dcn.proj.weight"),
                    he_normal(&[c, c, 1, 1], c, rng),
                );
                let proj_b = ps.register(format!("{name}.dcn.proj.bias"), zeros(&[c]));
                let (ln2_g, ln2_b) = ln_pair(ps, &format!("{name}.ln2"), c);
                let fc1_w = ps.register(
                    format!("{name}.ffn.fc1.weight"),
                    he_normal(&[r * c, c, 1, 1], c, rng),
                );
                let fc1_b = ps.register(format!("{name}.ffn.fc1.bias"), zeros(&[r * c]));
                let fc2_w = ps.register(
                    format!("{name}.ffn.fc2.weight"),
                    he_normal(&[c, r * c, 1, 1], r * c, rng),
                );
                let fc2_b = ps.register(format!("{name}.ffn.fc2.bias"), zeros(&[c]));
                blocks.push(DcnBlockParams {
                    ln1_g,
                    ln1_b,
                    dw_w,
                    dw_b,
                    off_w,
                    off_b,
                    mod_w,
                    mod_b,
                    val_w,
                    val_b,
                    proj_w,
                    proj_b,
                    ln2_g,
                    ln2_b,
                    fc1_w,
                    fc1_b,
                    fc2_w,
                    fc2_b,
                });
            }
            stages.push(blocks);
        }
        let mut downs = Vec::new();
        for s in 0..3 {
            let c = config.stage_channels[s];
            let cn = config.stage_channels[s + 1];
            let w = ps.register(
                format!("{prefix}down{s}.conv.weight"),
                he_normal(&[cn, c, 3, 3], c * 9, rng),
            );
            let b = ps.register(format!("{prefix}down{s}.conv.bias"), zeros(&[cn]));
            let (ln_g, ln_b) = ln_pair(ps, &format!("{prefix}down{s}.ln"), cn);
            downs.push(Downsample { w, b, ln_g, ln_b });
        }
        Ok(Self {
            config,
            stem1_w,
            stem1_b,
            stem_ln1_g,
            stem_ln1_b,
            stem2_w,
            stem2_b,
            stem_ln2_g,
            stem_ln2_b,
            stages,
            downs,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bias(
        g: &mut Graph,
        ps: &ParamStore,
        x: NodeId,
        w: ParamId,
        b: ParamId,
        groups: usize,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        let wn = g.param(ps, w);
        let y = g.conv2d(x, wn, groups, stride, pad);
        let bn = g.param(ps, b);
        let c = g.shape(y)[1];
        let br = g.reshape(bn, &[1, c, 1, 1]);
        g.add(y, br)
    }

    fn channel_ln(g: &mut Graph, ps: &ParamStore, x: NodeId, gamma: ParamId, beta: ParamId) -> NodeId {
        let gn = g.param(ps, gamma);
        let bn = g.param(ps, beta);
        g.layer_norm(x, gn, bn, 1, LN_EPS)
    }

    /// The deformable aggregation: offsets and modulation logits come from
    /// a depthwise 3x3 + pointwise branch; modulation is softmax-normalized
    /// over the 9 sample points within each group; sampled features pass a
    /// grouped value projection and a full output projection.
    pub fn dcn_v3(&self, g: &mut Graph, ps: &ParamStore, stage: usize, block: usize, x: NodeId) -> NodeId {
        let bp = &self.stages[stage][block];
        let groups = self.config.groups[stage];
        let shape = g.shape(x).to_vec();
        let (n, _c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let branch = Self::conv_bias(g, ps, x, bp.dw_w, bp.dw_b, shape[1], 1, 1);
        let mut offsets = Self::conv_bias(g, ps, branch, bp.off_w, bp.off_b, 1, 1, 0);
        if let Some(bound) = self.config.offset_scale {
            offsets = g.clamp_abs(offsets, bound);
        }
        let logits = Self::conv_bias(g, ps, branch, bp.mod_w, bp.mod_b, 1, 1, 0);
        let logits = g.reshape(logits, &[n, groups, KERNEL, h, w]);
        let m = g.softmax(logits, 2);
        let m = g.reshape(m, &[n, groups * KERNEL, h, w]);
        let agg = g.deform_sample(x, offsets, m, groups);
        let val = Self::conv_bias(g, ps, agg, bp.val_w, bp.val_b, groups, 1, 0);
        Self::conv_bias(g, ps, val, bp.proj_w, bp.proj_b, 1, 1, 0)
    }

    fn ffn(&self, g: &mut Graph, ps: &ParamStore, stage: usize, block: usize, x: NodeId) -> NodeId {
        let bp = &self.stages[stage][block];
        let h = Self::conv_bias(g, ps, x, bp.fc1_w, bp.fc1_b, 1, 1, 0);
        let h = g.gelu(h);
        Self::conv_bias(g, ps, h, bp.fc2_w, bp.fc2_b, 1, 1, 0)
    }

    /// x += dcn(LN(x)); x += FFN(LN(x)). Residual around each sub-layer.
    pub fn basic_block(&self, g: &mut Graph, ps: &ParamStore, stage: usize, block: usize, x: NodeId) -> NodeId {
        let bp = &self.stages[stage][block];
        let normed = Self::channel_ln(g, ps, x, bp.ln1_g, bp.ln1_b);
        let d = self.dcn_v3(g, ps, stage, block, normed);
        let x = g.add(x, d);
        let normed = Self::channel_ln(g, ps, x, bp.ln2_g, bp.ln2_b);
        let f = self.ffn(g, ps, stage, block, normed);
        g.add(x, f)
    }

    /// Stem (stride 4), four stages with strided downsampling between them.
    pub fn forward(&self, g: &mut Graph, ps: &ParamStore, images: &Array4<f64>) -> Result<FeaturePyramid> {
        let (_, _, h, w) = images.dim();
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be divisible by 32"
            )));
        }
        let x = g.constant(images.clone().into_dyn());
        let x = Self::conv_bias(g, ps, x, self.stem1_w, self.stem1_b, 1, 2, 1);
        let x = Self::channel_ln(g, ps, x, self.stem_ln1_g, self.stem_ln1_b);
        let x = g.gelu(x);
        let x = Self::conv_bias(g, ps, x, self.stem2_w, self.stem2_b, 1, 2, 1);
        let mut x = Self::channel_ln(g, ps, x, self.stem_ln2_g, self.stem_ln2_b);
        let mut levels = Vec::with_capacity(4);
        for s in 0..4 {
            for j in 0..self.config.stage_blocks[s] {
                x = self.basic_block(g, ps, s, j, x);
            }
            levels.push(x);
            if s < 3 {
                let d = &self.downs[s];
                x = Self::conv_bias(g, ps, x, d.w, d.b, 1, 2, 1);
                x = Self::channel_ln(g, ps, x, d.ln_g, d.ln_b);
            }
        }
        Ok(FeaturePyramid {
            levels: [levels[0], levels[1], levels[2], levels[3]],
            channels: self.config.stage_channels,
        })
    }
}
