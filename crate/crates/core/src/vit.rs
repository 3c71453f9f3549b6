//! Vision Transformer encoder producing per-patch features. Backbone for
//! both the tokenizer and the segmentation encoder. No class token: the
//! per-patch features feed every downstream consumer directly.

use ndarray::{Array3, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use morsel_autograd::param::{normal, zeros};
use morsel_autograd::{Graph, NodeId, ParamId, ParamStore};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ViTConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Square input resolution the position grid is built for.
    pub img_size: usize,
}

impl ViTConfig {
    /// Tiny preset for desk-scale experiments.
    pub fn toy(img_size: usize) -> Self {
        Self {
            patch_size: 8,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            img_size,
        }
    }

    /// ViT-B/16.
    pub fn base(img_size: usize) -> Self {
        Self {
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
            img_size,
        }
    }

    /// ViT-L/16.
    pub fn large(img_size: usize) -> Self {
        Self {
            patch_size: 16,
            embed_dim: 1024,
            depth: 24,
            heads: 16,
            mlp_ratio: 4,
            img_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.img_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "resolution {} not divisible by patch_size {}",
                self.img_size, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.img_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }
}

/// Per-patch embeddings with their grid geometry and optional mask flags.
#[derive(Debug, Clone)]
pub struct PatchSequence {
    pub node: NodeId,
    /// (batch, grid_h, grid_w); node shape is (batch, grid_h*grid_w, dim).
    pub batch: usize,
    pub grid: (usize, usize),
    pub mask: Option<Vec<Vec<bool>>>,
}

impl PatchSequence {
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }
}

pub(crate) struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    pub(crate) q_w: ParamId,
    q_b: ParamId,
    pub(crate) k_w: ParamId,
    k_b: ParamId,
    pub(crate) v_w: ParamId,
    pub(crate) v_b: ParamId,
    pub(crate) o_w: ParamId,
    pub(crate) o_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    pub(crate) fc1_w: ParamId,
    fc1_b: ParamId,
    pub(crate) fc2_w: ParamId,
    fc2_b: ParamId,
}

/// A stack of pre-norm transformer blocks with a final layer norm, usable
/// standalone (tokenizer decoder) or inside a [`Vit`].
pub struct TransformerStack {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub depth: usize,
    pub(crate) blocks: Vec<BlockParams>,
    pub(crate) final_g: ParamId,
    pub(crate) final_b: ParamId,
}

impl TransformerStack {
    pub fn new(
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        depth: usize,
        prefix: &str,
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = dim;
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let b = format!("{prefix}block{i}");
            blocks.push(BlockParams {
                ln1_g: ps.register(format!("{b}.ln1.gamma"), ndarray::ArrayD::ones(IxDyn(&[d]))),
                ln1_b: ps.register(format!("{b}.ln1.beta"), zeros(&[d])),
                q_w: ps.register(format!("{b}.attn.q.weight"), normal(&[d, d], 0.02, rng)),
                q_b: ps.register(format!("{b}.attn.q.bias"), zeros(&[d])),
                k_w: ps.register(format!("{b}.attn.k.weight"), normal(&[d, d], 0.02, rng)),
                k_b: ps.register(format!("{b}.attn.k.bias"), zeros(&[d])),
                v_w: ps.register(format!("{b}.attn.v.weight"), normal(&[d, d], 0.02, rng)),
                v_b: ps.register(format!("{b}.attn.v.bias"), zeros(&[d])),
                o_w: ps.register(format!("{b}.attn.out.weight"), normal(&[d, d], 0.02, rng)),
                o_b: ps.register(format!("{b}.attn.out.bias"), zeros(&[d])),
                ln2_g: ps.register(format!("{b}.ln2.gamma"), ndarray::ArrayD::ones(IxDyn(&[d]))),
                ln2_b: ps.register(format!("{b}.ln2.beta"), zeros(&[d])),
                fc1_w: ps.register(
                    format!("{b}.mlp.fc1.weight"),
                    normal(&[d, d * mlp_ratio], 0.02, rng),
                ),
                fc1_b: ps.register(format!("{b}.mlp.fc1.bias"), zeros(&[d * mlp_ratio])),
                fc2_w: ps.register(
                    format!("{b}.mlp.fc2.weight"),
                    normal(&[d * mlp_ratio, d], 0.02, rng),
                ),
                fc2_b: ps.register(format!("{b}.mlp.fc2.bias"), zeros(&[d])),
            });
        }
        let final_g = ps.register(format!("{prefix}final_ln.gamma"), ndarray::ArrayD::ones(IxDyn(&[d])));
        let final_b = ps.register(format!("{prefix}final_ln.beta"), zeros(&[d]));
        Self {
            dim,
            heads,
            mlp_ratio,
            depth,
            blocks,
            final_g,
            final_b,
        }
    }

    /// Multi-head self-attention sublayer on (B,N,D) input.
    pub fn attention(&self, g: &mut Graph, ps: &ParamStore, block: usize, x: NodeId) -> NodeId {
        let bp = &self.blocks[block];
        let shape = g.shape(x).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let heads = self.heads;
        let dh = d / heads;
        let flat = g.reshape(x, &[b * n, d]);
        let proj = |w: ParamId, bias: ParamId, g: &mut Graph| -> NodeId {
            let wn = g.param(ps, w);
            let bn = g.param(ps, bias);
            let y = g.linear(flat, wn, bn);
            // (B,N,H,dh) -> (B,H,N,dh) -> (B*H,N,dh)
            let y = g.reshape(y, &[b, n, heads, dh]);
            let y = g.permute(y, &[0, 2, 1, 3]);
            g.reshape(y, &[b * heads, n, dh])
        };
        let q = proj(bp.q_w, bp.q_b, g);
        let k = proj(bp.k_w, bp.k_b, g);
        let v = proj(bp.v_w, bp.v_b, g);
        let kt = g.permute(k, &[0, 2, 1]);
        let scores = g.bmm(q, kt);
        let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(scaled, 2);
        let ctx = g.bmm(attn, v);
        let ctx = g.reshape(ctx, &[b, heads, n, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b * n, d]);
        let ow = g.param(ps, bp.o_w);
        let ob = g.param(ps, bp.o_b);
        let out = g.linear(ctx, ow, ob);
        g.reshape(out, &[b, n, d])
    }

    fn mlp(&self, g: &mut Graph, ps: &ParamStore, block: usize, x: NodeId) -> NodeId {
        let bp = &self.blocks[block];
        let shape = g.shape(x).to_vec();
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        let flat = g.reshape(x, &[b * n, d]);
        let w1 = g.param(ps, bp.fc1_w);
        let b1 = g.param(ps, bp.fc1_b);
        let h = g.linear(flat, w1, b1);
        let h = g.gelu(h);
        let w2 = g.param(ps, bp.fc2_w);
        let b2 = g.param(ps, bp.fc2_b);
        let y = g.linear(h, w2, b2);
        g.reshape(y, &[b, n, d])
    }

    /// One pre-norm block: x += attn(LN(x)); x += MLP(LN(x)).
    pub fn block(&self, g: &mut Graph, ps: &ParamStore, i: usize, x: NodeId) -> NodeId {
        let bp = &self.blocks[i];
        let g1 = g.param(ps, bp.ln1_g);
        let b1 = g.param(ps, bp.ln1_b);
        let normed = g.layer_norm(x, g1, b1, 2, LN_EPS);
        let att = self.attention(g, ps, i, normed);
        let x = g.add(x, att);
        let g2 = g.param(ps, bp.ln2_g);
        let b2 = g.param(ps, bp.ln2_b);
        let normed = g.layer_norm(x, g2, b2, 2, LN_EPS);
        let ff = self.mlp(g, ps, i, normed);
        g.add(x, ff)
    }

    pub fn final_norm(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let fg = g.param(ps, self.final_g);
        let fb = g.param(ps, self.final_b);
        g.layer_norm(x, fg, fb, 2, LN_EPS)
    }

    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        self.encode_taps(g, ps, x, &[]).0
    }

    /// Run all blocks, also returning post-block activations at the
    /// requested 1-based depths (for decoder feature taps).
    pub fn encode_taps(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        x: NodeId,
        taps: &[usize],
    ) -> (NodeId, Vec<NodeId>) {
        let mut x = x;
        let mut tapped = Vec::new();
        for i in 0..self.depth {
            x = self.block(g, ps, i, x);
            if taps.contains(&(i + 1)) {
                tapped.push(x);
            }
        }
        let out = self.final_norm(g, ps, x);
        (out, tapped)
    }

    pub fn param_names(&self, ps: &ParamStore) -> Vec<String> {
        let mut names = Vec::new();
        for b in &self.blocks {
            for id in [
                b.ln1_g, b.ln1_b, b.q_w, b.q_b, b.k_w, b.k_b, b.v_w, b.v_b, b.o_w, b.o_b, b.ln2_g,
                b.ln2_b, b.fc1_w, b.fc1_b, b.fc2_w, b.fc2_b,
            ] {
                names.push(ps.name(id).to_string());
            }
        }
        names.push(ps.name(self.final_g).to_string());
        names.push(ps.name(self.final_b).to_string());
        names
    }
}

/// ViT encoder bound to a [`ParamStore`]. Parameter names are stable:
/// `{prefix}patch_proj.{weight,bias}`, `{prefix}pos_embed`,
/// `{prefix}block{i}.{ln1,ln2}.{gamma,beta}`,
/// `{prefix}block{i}.attn.{q,k,v,out}.{weight,bias}`,
/// `{prefix}block{i}.mlp.{fc1,fc2}.{weight,bias}`,
/// `{prefix}final_ln.{gamma,beta}`.
pub struct Vit {
    pub config: ViTConfig,
    patch_w: ParamId,
    patch_b: ParamId,
    pos_embed: ParamId,
    pub stack: TransformerStack,
}

impl Vit {
    pub fn new(
        config: ViTConfig,
        prefix: &str,
        ps: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let p = config.patch_size;
        let n = config.num_patches();
        let patch_w = ps.register(format!("{prefix}patch_proj.weight"), normal(&[3 * p * p, d], 0.02, rng));
        let patch_b = ps.register(format!("{prefix}patch_proj.bias"), zeros(&[d]));
        let pos_embed = ps.register(format!("{prefix}pos_embed"), normal(&[1, n, d], 0.02, rng));
        let stack = TransformerStack::new(d, config.heads, config.mlp_ratio, config.depth, prefix, ps, rng);
        Ok(Self {
            config,
            patch_w,
            patch_b,
            pos_embed,
            stack,
        })
    }

    /// Flatten non-overlapping p x p x 3 patches of a batch of images into
    /// constant rows ordered [channel][py][px], raster patch order.
    pub fn extract_patches(&self, images: &ndarray::Array4<f64>) -> Result<ArrayD<f64>> {
        let (b, c, h, w) = images.dim();
        let p = self.config.patch_size;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "resolution {h}x{w} not divisible by patch_size {p} (no implicit padding)"
            )));
        }
        let (gh, gw) = (h / p, w / p);
        let mut out = Array3::<f64>::zeros((b, gh * gw, c * p * p));
        for n in 0..b {
            for gy in 0..gh {
                for gx in 0..gw {
                    let patch = gy * gw + gx;
                    for ch in 0..c {
                        for py in 0..p {
                            for px in 0..p {
                                out[[n, patch, (ch * p + py) * p + px]] =
                                    images[[n, ch, gy * p + py, gx * p + px]];
                            }
                        }
                    }
                }
            }
        }
        Ok(out.into_dyn())
    }

    /// Linear patch projection without position embeddings: (B,N,3p^2) -> (B,N,D).
    pub fn embed(&self, g: &mut Graph, ps: &ParamStore, patches: NodeId) -> NodeId {
        let shape = g.shape(patches).to_vec();
        let (b, n) = (shape[0], shape[1]);
        let flat = g.reshape(patches, &[b * n, shape[2]]);
        let w = g.param(ps, self.patch_w);
        let bias = g.param(ps, self.patch_b);
        let y = g.linear(flat, w, bias);
        g.reshape(y, &[b, n, self.config.embed_dim])
    }

    /// Add learned absolute position embeddings for the native grid.
    pub fn add_pos(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        let pos = g.param(ps, self.pos_embed);
        g.add(x, pos)
    }

    /// Patchify + project + position embeddings.
    pub fn patchify_embed(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        images: &ndarray::Array4<f64>,
    ) -> Result<PatchSequence> {
        let (b, _, h, w) = images.dim();
        if h != self.config.img_size || w != self.config.img_size {
            return Err(Error::Shape(format!(
                "input {h}x{w} does not match configured resolution {}",
                self.config.img_size
            )));
        }
        let patches = self.extract_patches(images)?;
        let node = g.constant(patches);
        let emb = self.embed(g, ps, node);
        let node = self.add_pos(g, ps, emb);
        Ok(PatchSequence {
            node,
            batch: b,
            grid: (h / self.config.patch_size, w / self.config.patch_size),
            mask: None,
        })
    }

    /// Multi-head self-attention sublayer on (B,N,D) input.
    pub fn attention(&self, g: &mut Graph, ps: &ParamStore, block: usize, x: NodeId) -> NodeId {
        self.stack.attention(g, ps, block, x)
    }

    /// One pre-norm block: x += attn(LN(x)); x += MLP(LN(x)).
    pub fn block(&self, g: &mut Graph, ps: &ParamStore, i: usize, x: NodeId) -> NodeId {
        self.stack.block(g, ps, i, x)
    }

    pub fn final_norm(&self, g: &mut Graph, ps: &ParamStore, x: NodeId) -> NodeId {
        self.stack.final_norm(g, ps, x)
    }

    /// Full stack of pre-norm blocks plus final LN on embedded patches.
    pub fn encode(&self, g: &mut Graph, ps: &ParamStore, patches: NodeId) -> NodeId {
        self.stack.encode(g, ps, patches)
    }

    /// Like `encode` but also returns the post-block activations at the
    /// requested 1-based depths (for decoder feature taps).
    pub fn encode_taps(
        &self,
        g: &mut Graph,
        ps: &ParamStore,
        patches: NodeId,
        taps: &[usize],
    ) -> (NodeId, Vec<NodeId>) {
        self.stack.encode_taps(g, ps, patches, taps)
    }

    /// Parameter names owned by this encoder, in registration order.
    pub fn param_names(&self, ps: &ParamStore) -> Vec<String> {
        let mut names = vec![
            ps.name(self.patch_w).to_string(),
            ps.name(self.patch_b).to_string(),
            ps.name(self.pos_embed).to_string(),
        ];
        names.extend(self.stack.param_names(ps));
        names
    }

    pub fn pos_embed_id(&self) -> ParamId {
        self.pos_embed
    }
}

/// Keys cubic convolution kernel (a = -0.5): reproduces constants and
/// interpolates sample points exactly.
fn cubic_weight(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic 2-D interpolation of a (gh, gw, D) embedding grid to a new grid,
/// channel-wise, with corner-aligned coordinates so a same-size resize is
/// the identity. The source grid must be square.
pub fn interpolate_pos_embed(pos: &Array3<f64>, new_grid: (usize, usize)) -> Result<Array3<f64>> {
    let (gh, gw, d) = pos.dim();
    if gh != gw {
        return Err(Error::Shape(format!("source grid must be square, got {gh}x{gw}")));
    }
    let (nh, nw) = new_grid;
    if (nh, nw) == (gh, gw) {
        return Ok(pos.clone());
    }
    let map = |o: usize, out: usize, input: usize| -> f64 {
        if out == 1 {
            0.0
        } else {
            o as f64 * (input as f64 - 1.0) / (out as f64 - 1.0)
        }
    };
    let mut out = Array3::<f64>::zeros((nh, nw, d));
    for oy in 0..nh {
        let sy = map(oy, nh, gh);
        let y0 = sy.floor() as isize;
        let ty = sy - y0 as f64;
        for ox in 0..nw {
            let sx = map(ox, nw, gw);
            let x0 = sx.floor() as isize;
            let tx = sx - x0 as f64;
            let mut wsum = 0.0;
            let mut acc = vec![0.0; d];
            for dy in -1..=2isize {
                let iy = (y0 + dy).clamp(0, gh as isize - 1) as usize;
                let wy = cubic_weight(dy as f64 - ty);
                for dx in -1..=2isize {
                    let ix = (x0 + dx).clamp(0, gw as isize - 1) as usize;
                    let w = wy * cubic_weight(dx as f64 - tx);
                    if w == 0.0 {
                        continue;
                    }
                    wsum += w;
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a += w * pos[[iy, ix, k]];
                    }
                }
            }
            for (k, a) in acc.iter().enumerate() {
                out[[oy, ox, k]] = a / wsum;
            }
        }
    }
    Ok(out)
}

/// Resize a stored `(1, n, d)` position-embedding parameter to a new square
/// grid in place. Used once at checkpoint load when fine-tuning resolution
/// differs from pretraining resolution.
pub fn resize_pos_embed_param(
    ps: &mut ParamStore,
    id: ParamId,
    new_grid: (usize, usize),
) -> Result<()> {
    let value = ps.value(id).clone();
    let shape = value.shape().to_vec();
    let n = shape[1];
    let d = shape[2];
    let g = (n as f64).sqrt() as usize;
    if g * g != n {
        return Err(Error::Shape(format!("pos embed length {n} is not a square grid")));
    }
    let grid = value
        .into_dimensionality::<ndarray::Ix3>()
        .unwrap()
        .index_axis(Axis(0), 0)
        .to_owned()
        .into_shape_with_order((g, g, d))
        .unwrap();
    let resized = interpolate_pos_embed(&grid, new_grid)?;
    let (nh, nw, _) = resized.dim();
    let flat = resized.into_shape_with_order((1, nh * nw, d)).unwrap();
    *ps.value_mut(id) = flat.into_dyn();
    Ok(())
}

/// Convert per-patch (B,N,D) features to (B,D,gh,gw) maps.
pub fn tokens_to_map(g: &mut Graph, x: NodeId, grid: (usize, usize)) -> NodeId {
    let shape = g.shape(x).to_vec();
    let (b, _, d) = (shape[0], shape[1], shape[2]);
    let y = g.reshape(x, &[b, grid.0, grid.1, d]);
    g.permute(y, &[0, 3, 1, 2])
}
