//! End-to-end segmentation model: a ViT or deformable-conv backbone, tap
//! adapters building a 4-level pyramid, the UperNet decoder, and an
//! optional auxiliary head on the stride-16 level.

use ndarray::{Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

use morsel_autograd::param::{normal, zeros};
use morsel_autograd::{Graph, NodeId, ParamId, ParamStore};

use crate::dataset::augment::{normalize_image, IMAGENET_MEAN, IMAGENET_STD};
use crate::dcn::{DcnBackbone, DcnConfig};
use crate::error::{Error, Result};
use crate::eval::LogitModel;
use crate::seg::upernet::{FcnAux, UperNet};
use crate::util::{self, derive_rng};
use crate::vit::{tokens_to_map, ViTConfig, Vit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    Vit,
    Dcn,
}

impl std::str::FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vit" => Ok(BackboneKind::Vit),
            "dcn" => Ok(BackboneKind::Dcn),
            other => Err(Error::Config(format!("unknown backbone '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SegModelConfig {
    pub backbone: BackboneKind,
    pub vit: Option<ViTConfig>,
    pub dcn: Option<DcnConfig>,
    pub decoder_channels: usize,
    pub num_classes: usize,
    pub aux_enabled: bool,
    pub crop: usize,
}

struct UpAdapter {
    convs: Vec<(ParamId, ParamId)>, // conv_transpose k2 s2 weight+bias pairs
}

/// Resampling of ViT tokens to the four pyramid strides: transposed convs
/// upsample, average pooling downsamples, identity where strides match.
enum TapAdapter {
    Up(UpAdapter),
    Identity,
    Down(usize),
}

pub struct SegModel {
    pub config: SegModelConfig,
    pub ps: ParamStore,
    vit: Option<Vit>,
    vit_taps: Vec<usize>,
    adapters: Vec<TapAdapter>,
    dcn: Option<DcnBackbone>,
    decoder: UperNet,
    aux: Option<FcnAux>,
}

impl SegModel {
    pub fn new(config: SegModelConfig, seed: u64) -> Result<Self> {
        let mut ps = ParamStore::new();
        let mut rng = derive_rng(seed, &[0x5E6]);
        let (vit, vit_taps, adapters, dcn, in_channels) = match config.backbone {
            BackboneKind::Vit => {
                let mut vcfg = config
                    .vit
                    .clone()
                    .ok_or_else(|| Error::Config("vit backbone needs a vit config".into()))?;
                vcfg.img_size = config.crop;
                let vit = Vit::new(vcfg.clone(), "vit.", &mut ps, &mut rng)?;
                let depth = vcfg.depth;
                let taps = vec![
                    depth.div_ceil(4),
                    depth.div_ceil(2),
                    (3 * depth).div_ceil(4),
                    depth,
                ];
                let d = vcfg.embed_dim;
                let mut adapters = Vec::new();
                for (i, &stride) in [4usize, 8, 16, 32].iter().enumerate() {
                    let p = vcfg.patch_size;
                    let adapter = if stride < p {
                        let mut factor = p / stride;
                        if !factor.is_power_of_two() {
                            return Err(Error::Config(format!(
                                "patch size {p} incompatible with stride {stride}"
                            )));
                        }
                        let mut convs = Vec::new();
                        let mut j = 0;
                        while factor > 1 {
                            let w = ps.register(
                                format!("adapter.l{i}.up{j}.weight"),
                                normal(&[d, d, 2, 2], 0.02, &mut rng),
                            );
                            let b = ps.register(format!("adapter.l{i}.up{j}.bias"), zeros(&[d]));
                            convs.push((w, b));
                            factor /= 2;
                            j += 1;
                        }
                        TapAdapter::Up(UpAdapter { convs })
                    } else if stride == p {
                        TapAdapter::Identity
                    } else {
                        TapAdapter::Down(stride / p)
                    };
                    adapters.push(adapter);
                }
                (Some(vit), taps, adapters, None, [d, d, d, d])
            }
            BackboneKind::Dcn => {
                let dcfg = config
                    .dcn
                    .clone()
                    .ok_or_else(|| Error::Config("dcn backbone needs a dcn config".into()))?;
                let channels = dcfg.stage_channels;
                let dcn = DcnBackbone::new(dcfg, "dcn.", &mut ps, &mut rng)?;
                (None, Vec::new(), Vec::new(), Some(dcn), channels)
            }
        };
        let decoder = UperNet::new(
            in_channels,
            config.decoder_channels,
            config.num_classes,
            "decoder.",
            &mut ps,
            &mut rng,
        );
        let aux = if config.aux_enabled {
            Some(FcnAux::new(
                in_channels[2],
                config.decoder_channels / 2,
                config.num_classes,
                "aux.",
                &mut ps,
                &mut rng,
            ))
        } else {
            None
        };
        Ok(Self {
            config,
            ps,
            vit,
            vit_taps,
            adapters,
            dcn,
            decoder,
            aux,
        })
    }

    fn apply_adapter(&self, g: &mut Graph, adapter: &TapAdapter, x: NodeId) -> NodeId {
        match adapter {
            TapAdapter::Up(up) => {
                let mut y = x;
                for (idx, (w, b)) in up.convs.iter().enumerate() {
                    let wn = g.param(&self.ps, *w);
                    y = g.conv_transpose2d(y, wn, 2);
                    let bn = g.param(&self.ps, *b);
                    let c = g.shape(y)[1];
                    let br = g.reshape(bn, &[1, c, 1, 1]);
                    y = g.add(y, br);
                    if idx + 1 < up.convs.len() {
                        y = g.gelu(y);
                    }
                }
                y
            }
            TapAdapter::Identity => x,
            TapAdapter::Down(f) => g.avg_pool2d(x, *f, *f),
        }
    }

    /// Forward a normalized (N,3,H,W) batch to (main logits, aux logits).
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        images: &Array4<f64>,
    ) -> Result<(NodeId, Option<NodeId>)> {
        let (_, _, h, w) = images.dim();
        let levels: [NodeId; 4] = match self.config.backbone {
            BackboneKind::Vit => {
                let vit = self.vit.as_ref().unwrap();
                let seq = vit.patchify_embed(g, &self.ps, images)?;
                let (_, taps) = vit.encode_taps(g, &self.ps, seq.node, &self.vit_taps);
                if taps.len() != 4 {
                    return Err(Error::Shape(format!(
                        "expected 4 feature taps, got {}",
                        taps.len()
                    )));
                }
                let mut levels = Vec::with_capacity(4);
                for (i, &tap) in taps.iter().enumerate() {
                    let map = tokens_to_map(g, tap, seq.grid);
                    levels.push(self.apply_adapter(g, &self.adapters[i], map));
                }
                [levels[0], levels[1], levels[2], levels[3]]
            }
            BackboneKind::Dcn => {
                let dcn = self.dcn.as_ref().unwrap();
                let pyr = dcn.forward(g, &self.ps, images)?;
                pyr.levels
            }
        };
        let logits = self.decoder.decode(g, &self.ps, &levels, (h, w))?;
        let aux = self
            .aux
            .as_ref()
            .map(|a| a.decode(g, &self.ps, levels[2], (h, w)));
        Ok((logits, aux))
    }

    /// Parameter prefix of the backbone inside checkpoints.
    pub fn backbone_prefix(&self) -> &'static str {
        match self.config.backbone {
            BackboneKind::Vit => "vit.",
            BackboneKind::Dcn => "dcn.",
        }
    }

    pub fn vit_pos_embed(&self) -> Option<morsel_autograd::ParamId> {
        self.vit.as_ref().map(|v| v.pos_embed_id())
    }
}

/// Per-pixel cross-entropy, plus a weighted auxiliary term when an aux
/// head is configured. Masks are (N,H,W) class ids aligned with logits.
pub fn seg_loss(
    g: &mut Graph,
    logits: NodeId,
    aux_logits: Option<NodeId>,
    masks: &[Array2<u8>],
    num_classes: usize,
    aux_weight: f64,
) -> Result<NodeId> {
    let shape = g.shape(logits).to_vec();
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if masks.len() != n {
        return Err(Error::Shape(format!("{} masks for a batch of {n}", masks.len())));
    }
    let mut targets = Vec::with_capacity(n * h * w);
    for mask in masks {
        if mask.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "mask {:?} does not align with logits {h}x{w}",
                mask.dim()
            )));
        }
        for &v in mask.iter() {
            if (v as usize) >= num_classes {
                return Err(Error::Invalid(format!(
                    "mask value {v} >= num_classes {num_classes}"
                )));
            }
            targets.push(v as usize);
        }
    }
    let flatten = |g: &mut Graph, l: NodeId| {
        let p = g.permute(l, &[0, 2, 3, 1]);
        g.reshape(p, &[n * h * w, c])
    };
    let main_flat = flatten(g, logits);
    let mut loss = g.cross_entropy_mean(main_flat, &targets);
    if let Some(aux) = aux_logits {
        if aux_weight > 0.0 {
            let aux_flat = flatten(g, aux);
            let aux_loss = g.cross_entropy_mean(aux_flat, &targets);
            let weighted = g.scale(aux_loss, aux_weight);
            loss = g.add(loss, weighted);
        }
    }
    Ok(loss)
}

impl LogitModel for SegModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn logits(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
        let normalized = normalize_image(image, &IMAGENET_MEAN, &IMAGENET_STD);
        let batch = util::to_nchw(&[normalized]);
        let mut g = Graph::new();
        let (logits, _) = self.forward_batch(&mut g, &batch)?;
        let shape = g.shape(logits).to_vec();
        let flat = g
            .value(logits)
            .view()
            .to_shape((shape[1], shape[2] * shape[3]))
            .unwrap()
            .to_owned();
        Ok(flat
            .into_shape_with_order((shape[1], shape[2], shape[3]))
            .unwrap())
    }
}

/// Whole-image inference: resize to the training crop, forward once, and
/// resize the argmax mask back with nearest-neighbour sampling.
pub fn predict_whole(model: &SegModel, image: &Array3<f64>) -> Result<Array2<u8>> {
    let crop = model.config.crop;
    let (h, w, _) = image.dim();
    let resized = util::resize_bilinear_hwc(image, crop, crop);
    let logits = model.logits(&resized)?;
    let mut mask = Array2::<u8>::zeros((crop, crop));
    for y in 0..crop {
        for x in 0..crop {
            let mut best = 0usize;
            let mut bv = f64::NEG_INFINITY;
            for c in 0..model.config.num_classes {
                if logits[[c, y, x]] > bv {
                    bv = logits[[c, y, x]];
                    best = c;
                }
            }
            mask[[y, x]] = best as u8;
        }
    }
    Ok(util::resize_nearest_mask(&mask, h, w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy_config(kind: BackboneKind, crop: usize, classes: usize) -> SegModelConfig {
        SegModelConfig {
            backbone: kind,
            vit: Some(ViTConfig::toy(crop)),
            dcn: Some(DcnConfig::toy()),
            decoder_channels: 32,
            num_classes: classes,
            aux_enabled: true,
            crop,
        }
    }

    #[test]
    fn vit_path_produces_full_resolution_logits() {
        let model = SegModel::new(toy_config(BackboneKind::Vit, 64, 5), 1).unwrap();
        let mut rng = derive_rng(2, &[1]);
        let images = Array4::from_shape_simple_fn((2, 3, 64, 64), || rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let (logits, aux) = model.forward_batch(&mut g, &images).unwrap();
        assert_eq!(g.shape(logits), &[2, 5, 64, 64]);
        assert_eq!(g.shape(aux.unwrap()), &[2, 5, 64, 64]);
    }

    #[test]
    fn dcn_path_produces_full_resolution_logits() {
        let model = SegModel::new(toy_config(BackboneKind::Dcn, 64, 5), 1).unwrap();
        let mut rng = derive_rng(3, &[1]);
        let images = Array4::from_shape_simple_fn((1, 3, 64, 64), || rng.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let (logits, _) = model.forward_batch(&mut g, &images).unwrap();
        assert_eq!(g.shape(logits), &[1, 5, 64, 64]);
    }

    #[test]
    fn seg_loss_analytics() {
        // Uniform logits over 5 classes -> ln 5.
        let mut g = Graph::new();
        let logits = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 5, 4, 4])));
        let mask = Array2::<u8>::zeros((4, 4));
        let loss = seg_loss(&mut g, logits, None, std::slice::from_ref(&mask), 5, 0.4).unwrap();
        assert!((g.scalar(loss) - 5f64.ln()).abs() < 1e-12);
        // Perfect one-hot logits -> ~0.
        let mut arr = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 5, 4, 4]));
        for y in 0..4 {
            for x in 0..4 {
                arr[[0, 0, y, x]] = 1e4;
            }
        }
        let mut g = Graph::new();
        let logits = g.constant(arr);
        let loss = seg_loss(&mut g, logits, None, std::slice::from_ref(&mask), 5, 0.4).unwrap();
        assert!(g.scalar(loss) < 1e-3);
        // aux_weight = 0 equals primary-only loss.
        let mut g = Graph::new();
        let mut rng = derive_rng(4, &[2]);
        let arr = ndarray::ArrayD::from_shape_simple_fn(ndarray::IxDyn(&[1, 5, 4, 4]), || {
            rng.gen_range(-1.0..1.0)
        });
        let logits = g.constant(arr.clone());
        let aux = g.constant(arr.mapv(|v| v * 0.5));
        let with_zero_aux = seg_loss(&mut g, logits, Some(aux), std::slice::from_ref(&mask), 5, 0.0).unwrap();
        let mut g2 = Graph::new();
        let logits2 = g2.constant(arr);
        let primary_only = seg_loss(&mut g2, logits2, None, &[mask], 5, 0.0).unwrap();
        assert_eq!(g.scalar(with_zero_aux), g2.scalar(primary_only));
    }

    #[test]
    fn out_of_range_mask_value_is_rejected() {
        let mut g = Graph::new();
        let logits = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 3, 2, 2])));
        let mask = Array2::<u8>::from_elem((2, 2), 7);
        assert!(seg_loss(&mut g, logits, None, &[mask], 3, 0.0).is_err());
    }
}
