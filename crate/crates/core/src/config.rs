//! Named run presets with every hyperparameter explicit, plus the run
//! manifest emitted at the start of each fine-tuning run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::AugmentConfig;
use crate::dcn::DcnConfig;
use crate::error::{Error, Result};
use crate::eval::InferenceMode;
use crate::seg::model::{BackboneKind, SegModel, SegModelConfig};
use crate::vit::ViTConfig;

pub const FOODSEG103_CLASSES: usize = 104; // 103 ingredients + background

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: String,
    pub model: SegModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub total_iters: u64,
    pub warmup_iters: u64,
    pub poly_power: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub aux_weight: f64,
    pub eval_every: u64,
    pub eval_stride: usize,
    pub eval_mode: InferenceMode,
    pub early_stop_miou: Option<f64>,
    pub deterministic: bool,
    pub augment: AugmentConfig,
}

impl RunConfig {
    /// Desk-scale ViT + UperNet overfitting preset (5-class toy data).
    pub fn toy_vit() -> Self {
        let crop = 64;
        Self {
            preset: "toy_vit".into(),
            model: SegModelConfig {
                backbone: BackboneKind::Vit,
                vit: Some(ViTConfig::toy(crop)),
                dcn: None,
                decoder_channels: 32,
                num_classes: 5,
                aux_enabled: true,
                crop,
            },
            lr: 1e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            total_iters: 2000,
            warmup_iters: 100,
            poly_power: 0.9,
            batch_size: 8,
            seed: 1,
            aux_weight: 0.4,
            eval_every: 100,
            eval_stride: 64,
            eval_mode: InferenceMode::SlidingWindow,
            early_stop_miou: None,
            deterministic: true,
            augment: AugmentConfig::deterministic(crop),
        }
    }

    /// Desk-scale deformable-conv + UperNet overfitting preset.
    pub fn toy_dcn() -> Self {
        let crop = 64;
        Self {
            preset: "toy_dcn".into(),
            model: SegModelConfig {
                backbone: BackboneKind::Dcn,
                vit: None,
                dcn: Some(DcnConfig::toy()),
                decoder_channels: 32,
                num_classes: 5,
                aux_enabled: true,
                crop,
            },
            lr: 1e-3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            total_iters: 2000,
            warmup_iters: 100,
            poly_power: 0.9,
            batch_size: 8,
            seed: 1,
            aux_weight: 0.4,
            eval_every: 100,
            eval_stride: 64,
            eval_mode: InferenceMode::SlidingWindow,
            early_stop_miou: None,
            deterministic: true,
            augment: AugmentConfig::deterministic(crop),
        }
    }

    /// Published large-encoder recipe on FoodSeg103: 512x512 crops, AdamW
    /// at 3e-5 with weight decay 0.05, 160K iterations. Documented target,
    /// far beyond desk scale.
    pub fn beit_large_foodseg103() -> Self {
        let crop = 512;
        Self {
            preset: "beit_large_foodseg103".into(),
            model: SegModelConfig {
                backbone: BackboneKind::Vit,
                vit: Some(ViTConfig::large(crop)),
                dcn: None,
                decoder_channels: 512,
                num_classes: FOODSEG103_CLASSES,
                aux_enabled: true,
                crop,
            },
            lr: 3e-5,
            weight_decay: 0.05,
            betas: (0.9, 0.999),
            total_iters: 160_000,
            warmup_iters: 1500,
            poly_power: 0.9,
            batch_size: 8,
            seed: 1,
            aux_weight: 0.4,
            eval_every: 4000,
            eval_stride: 341,
            eval_mode: InferenceMode::SlidingWindow,
            early_stop_miou: None,
            deterministic: false,
            augment: AugmentConfig::training(crop),
        }
    }

    /// Base-size encoder variant of the published recipe.
    pub fn beit_base_foodseg103() -> Self {
        let mut cfg = Self::beit_large_foodseg103();
        cfg.preset = "beit_base_foodseg103".into();
        cfg.model.vit = Some(ViTConfig::base(512));
        cfg.model.decoder_channels = 512;
        cfg
    }

    /// Published deformable-conv recipe on FoodSeg103: AdamW at 6e-5, no
    /// weight decay, 160K iterations, 512x512 crops.
    pub fn internimage_b_foodseg103() -> Self {
        let crop = 512;
        Self {
            preset: "internimage_b_foodseg103".into(),
            model: SegModelConfig {
                backbone: BackboneKind::Dcn,
                vit: None,
                dcn: Some(DcnConfig::base()),
                decoder_channels: 512,
                num_classes: FOODSEG103_CLASSES,
                aux_enabled: true,
                crop,
            },
            lr: 6e-5,
            weight_decay: 0.0,
            betas: (0.9, 0.999),
            total_iters: 160_000,
            warmup_iters: 1500,
            poly_power: 0.9,
            batch_size: 8,
            seed: 1,
            aux_weight: 0.4,
            eval_every: 4000,
            eval_stride: 341,
            eval_mode: InferenceMode::SlidingWindow,
            early_stop_miou: None,
            deterministic: false,
            augment: AugmentConfig::training(crop),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy_vit" => Ok(Self::toy_vit()),
            "toy_dcn" => Ok(Self::toy_dcn()),
            "beit_base_foodseg103" => Ok(Self::beit_base_foodseg103()),
            "beit_large_foodseg103" => Ok(Self::beit_large_foodseg103()),
            "internimage_b_foodseg103" => Ok(Self::internimage_b_foodseg103()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (available: toy_vit, toy_dcn, beit_base_foodseg103, beit_large_foodseg103, internimage_b_foodseg103)"
            ))),
        }
    }

    /// Invariants: lr > 0, betas in [0,1), iterations beyond warmup,
    /// non-empty batches.
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        if self.total_iters <= self.warmup_iters {
            return Err(Error::Config(format!(
                "total_iters {} must exceed warmup_iters {}",
                self.total_iters, self.warmup_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Emit the resolved run manifest (every hyperparameter plus model
    /// size) next to the run outputs.
    pub fn write_manifest(&self, out_dir: &Path, model: &SegModel) -> Result<()> {
        let manifest = serde_json::json!({
            "config": self,
            "parameters": model.ps.num_elements(),
            "backbone": model.backbone_prefix().trim_end_matches('.'),
        });
        let path = out_dir.join("run_manifest.json");
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn at_scale_preset_pins_published_hyperparameters() {
        let cfg = RunConfig::beit_large_foodseg103();
        assert_eq!(cfg.lr, 3e-5);
        assert_eq!(cfg.weight_decay, 0.05);
        assert_eq!(cfg.betas, (0.9, 0.999));
        assert_eq!(cfg.total_iters, 160_000);
        assert_eq!(cfg.model.crop, 512);
        assert_eq!(cfg.model.num_classes, 104);
        let vit = cfg.model.vit.unwrap();
        assert_eq!(vit.embed_dim, 1024);
        assert_eq!(vit.depth, 24);
        assert_eq!(vit.heads, 16);
        assert_eq!(vit.patch_size, 16);

        let dcn_cfg = RunConfig::internimage_b_foodseg103();
        assert_eq!(dcn_cfg.lr, 6e-5);
        assert_eq!(dcn_cfg.weight_decay, 0.0);
        assert_eq!(dcn_cfg.total_iters, 160_000);
    }

    #[test]
    fn config_file_round_trip() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("run.json");
        let cfg = RunConfig::toy_vit();
        cfg.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(back.preset, "toy_vit");
        assert_eq!(back.lr, cfg.lr);
        assert_eq!(back.augment, cfg.augment);
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(RunConfig::preset("nope").is_err());
    }

    #[test]
    fn invariants_are_enforced() {
        for name in [
            "toy_vit",
            "toy_dcn",
            "beit_base_foodseg103",
            "beit_large_foodseg103",
            "internimage_b_foodseg103",
        ] {
            RunConfig::preset(name).unwrap().validate().unwrap();
        }
        let mut bad = RunConfig::toy_vit();
        bad.lr = 0.0;
        assert!(bad.validate().is_err());
        let mut bad = RunConfig::toy_vit();
        bad.betas.1 = 1.0;
        assert!(bad.validate().is_err());
        let mut bad = RunConfig::toy_vit();
        bad.warmup_iters = bad.total_iters;
        assert!(bad.validate().is_err());
    }
}
