//! End-to-end fine-tuning shared by both backbones: augmented batches,
//! per-pixel cross-entropy with an optional auxiliary head, AdamW under a
//! warmup + poly schedule, periodic mIoU evaluation, and best-checkpoint
//! retention.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{augment, DatasetManifest};
use crate::error::{Error, Result};
use crate::eval::{evaluate_dataset, InferenceMode};
use crate::seg::model::{predict_whole, seg_loss, SegModel};
use crate::seg::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::util::{derive_rng, shuffle, to_nchw};
use crate::vit::resize_pos_embed_param;

pub struct FinetuneSummary {
    pub best_miou: f64,
    pub best_iter: u64,
    pub iterations: u64,
    pub losses: Vec<f64>,
}

/// Restore backbone weights from a pretraining or segmentation checkpoint.
/// Position embeddings whose grid differs from the fine-tuning grid are
/// bicubically resized at load.
pub fn restore_backbone(model: &mut SegModel, path: &Path) -> Result<usize> {
    let ck = Checkpoint::load(path)?;
    if ck.kind != "mim" && ck.kind != "seg" {
        return Err(Error::Checkpoint(format!(
            "cannot restore a backbone from a '{}' checkpoint",
            ck.kind
        )));
    }
    let prefix = model.backbone_prefix();
    let mut applied = 0usize;
    for (name, value) in &ck.arrays {
        if !name.starts_with(prefix) {
            continue;
        }
        if name == "vit.pos_embed" {
            let pid = model.vit_pos_embed().expect("vit prefix implies vit model");
            if model.ps.value(pid).shape() != value.shape() {
                // Stash the source grid then interpolate to the target.
                let target_n = model.ps.value(pid).shape()[1];
                let g = (target_n as f64).sqrt() as usize;
                *model.ps.value_mut(pid) = value.clone();
                resize_pos_embed_param(&mut model.ps, pid, (g, g))?;
                applied += 1;
                continue;
            }
        }
        model
            .ps
            .set(name, value.clone())
            .map_err(Error::Checkpoint)?;
        applied += 1;
    }
    if applied == 0 {
        return Err(Error::Checkpoint(format!(
            "checkpoint {} holds nothing under '{prefix}'",
            path.display()
        )));
    }
    Ok(applied)
}

fn eval_miou(model: &SegModel, manifest: &DatasetManifest, config: &RunConfig) -> Result<f64> {
    match config.eval_mode {
        InferenceMode::SlidingWindow => Ok(evaluate_dataset(
            model,
            manifest,
            config.model.crop,
            config.eval_stride,
            None,
        )?
        .miou),
        InferenceMode::WholeImage => {
            let mut matrix = crate::eval::ConfusionMatrix::new(manifest.num_classes);
            for i in 0..manifest.len() {
                let sample = manifest.load_sample(i)?;
                let pred = predict_whole(model, &sample.image)?;
                matrix.update(&pred, &sample.mask)?;
            }
            Ok(crate::eval::miou(&matrix, &manifest.class_names)?.miou)
        }
    }
}

/// Run the fine-tuning loop. Emits `run_manifest.json`, `metrics.csv`,
/// `best.ckpt`, and `last.ckpt` under `out_dir`.
pub fn finetune_loop(
    config: &RunConfig,
    train: &DatasetManifest,
    val: &DatasetManifest,
    pretrained: Option<&Path>,
    out_dir: &Path,
) -> Result<FinetuneSummary> {
    config.validate()?;
    if train.num_classes != config.model.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the model head expects {}",
            train.num_classes, config.model.num_classes
        )));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut model = SegModel::new(config.model.clone(), config.seed)?;
    if let Some(path) = pretrained {
        let n = restore_backbone(&mut model, path)?;
        eprintln!("restored {n} backbone arrays from {}", path.display());
    }
    config.write_manifest(out_dir, &model)?;
    let metrics_path = out_dir.join("metrics.csv");
    let mut log = BufWriter::new(File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    writeln!(log, "iteration,loss,lr,val_miou").map_err(|e| Error::io(&metrics_path, e))?;

    let mut opt = AdamW::new(AdamWConfig {
        beta1: config.betas.0,
        beta2: config.betas.1,
        weight_decay: config.weight_decay,
    });
    let schedule = LrSchedule {
        base: config.lr,
        warmup: config.warmup_iters,
        total: config.total_iters,
        power: config.poly_power,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_rng = derive_rng(config.seed, &[0xF17E]);
    let mut cursor = 0usize;
    let mut losses = Vec::new();
    let mut best_miou = f64::NEG_INFINITY;
    let mut best_iter = 0u64;
    let mut iterations = 0u64;

    for t in 0..config.total_iters {
        let mut images = Vec::with_capacity(config.batch_size);
        let mut masks = Vec::with_capacity(config.batch_size);
        for slot in 0..config.batch_size {
            if cursor == 0 {
                shuffle(&mut order, &mut epoch_rng);
            }
            let sample = train.load_sample(order[cursor])?;
            cursor = (cursor + 1) % order.len();
            let mut rng = derive_rng(config.seed, &[0xA06, t, slot as u64]);
            let augmented = augment(&sample, &config.augment, &mut rng);
            images.push(augmented.image);
            masks.push(augmented.mask);
        }
        let batch = to_nchw(&images);
        let mut g = morsel_autograd::Graph::new();
        let (logits, aux) = model.forward_batch(&mut g, &batch)?;
        let loss = seg_loss(
            &mut g,
            logits,
            aux,
            &masks,
            config.model.num_classes,
            config.aux_weight,
        )?;
        let loss_value = g.scalar(loss);
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                what: "training loss".into(),
                step: t,
            });
        }
        g.backward(loss);
        let grads = g.param_grads();
        let lr = schedule.at(t);
        opt.step(&mut model.ps, &grads, lr)?;
        losses.push(loss_value);
        iterations = t + 1;

        let do_eval = config.eval_every > 0
            && ((t + 1) % config.eval_every == 0 || t + 1 == config.total_iters);
        let mut miou_field = String::new();
        if do_eval {
            let miou = eval_miou(&model, val, config)?;
            miou_field = format!("{miou:.6}");
            if miou > best_miou {
                best_miou = miou;
                best_iter = t + 1;
                save_model(&model, config, out_dir.join("best.ckpt").as_path())?;
            }
        }
        writeln!(log, "{},{loss_value:.12e},{lr:.12e},{miou_field}", t + 1)
            .map_err(|e| Error::io(&metrics_path, e))?;
        if do_eval {
            if let Some(target) = config.early_stop_miou {
                if best_miou >= target {
                    break;
                }
            }
        }
    }
    log.flush().map_err(|e| Error::io(&metrics_path, e))?;
    save_model(&model, config, out_dir.join("last.ckpt").as_path())?;
    if best_miou == f64::NEG_INFINITY {
        best_miou = f64::NAN;
    }
    Ok(FinetuneSummary {
        best_miou,
        best_iter,
        iterations,
        losses,
    })
}

pub fn save_model(model: &SegModel, config: &RunConfig, path: &Path) -> Result<()> {
    let meta = serde_json::json!({ "run": config, "model": model.config });
    Checkpoint::from_params("seg", meta, &model.ps).save(path)
}

pub fn load_model(path: &Path) -> Result<(SegModel, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind("seg")?;
    let run: RunConfig = serde_json::from_value(ck.meta["run"].clone())
        .map_err(|e| Error::Checkpoint(format!("bad run config: {e}")))?;
    let mut model = SegModel::new(run.model.clone(), 0)?;
    for (name, value) in &ck.arrays {
        model.ps.set(name, value.clone()).map_err(Error::Checkpoint)?;
    }
    Ok((model, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_toy_dataset, ToyDatasetSpec};
    use crate::seg::model::seg_loss;
    use crate::util::to_nchw;

    #[test]
    fn loss_on_fixed_batch_strictly_decreases_over_first_20_steps() {
        let dir = tempfile::TempDir::new().unwrap();
        let train = generate_toy_dataset(
            &ToyDatasetSpec { seed: 1, n_images: 4, n_classes: 4, size: 64 },
            dir.path(),
        )
        .unwrap();
        let mut config = RunConfig::toy_vit();
        config.model.num_classes = 4;
        let mut model = SegModel::new(config.model.clone(), config.seed).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            beta1: config.betas.0,
            beta2: config.betas.1,
            weight_decay: 0.0,
        });
        // One fixed batch, identity-normalized augmentation.
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for i in 0..train.len() {
            let s = train.load_sample(i).unwrap();
            let mut rng = derive_rng(3, &[i as u64]);
            let a = augment(&s, &config.augment, &mut rng);
            images.push(a.image);
            masks.push(a.mask);
        }
        let batch = to_nchw(&images);
        let mut prev = f64::INFINITY;
        for _ in 0..20 {
            let mut g = morsel_autograd::Graph::new();
            let (logits, aux) = model.forward_batch(&mut g, &batch).unwrap();
            let loss = seg_loss(&mut g, logits, aux, &masks, 4, config.aux_weight).unwrap();
            let value = g.scalar(loss);
            assert!(value < prev, "loss must strictly decrease: {prev} -> {value}");
            prev = value;
            g.backward(loss);
            let grads = g.param_grads();
            opt.step(&mut model.ps, &grads, 1e-3).unwrap();
        }
    }

    #[test]
    fn class_count_mismatch_fails_at_startup() {
        let dir = tempfile::TempDir::new().unwrap();
        let train = generate_toy_dataset(
            &ToyDatasetSpec { seed: 2, n_images: 2, n_classes: 3, size: 64 },
            dir.path().join("d").as_path(),
        )
        .unwrap();
        let config = RunConfig::toy_vit(); // head expects 5 classes
        let out = dir.path().join("out");
        let err = finetune_loop(&config, &train, &train, None, &out);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn pos_embed_resizes_when_restoring_across_resolutions() {
        // Pretrain grid 4x4 (32px, patch 8), fine-tune grid 8x8 (64px).
        let dir = tempfile::TempDir::new().unwrap();
        let mim_model = crate::mim::MimModel::new(
            crate::mim::MimConfig {
                encoder: crate::vit::ViTConfig::toy(32),
                mask_ratio: 0.4,
                codebook_size: 16,
            },
            4,
        )
        .unwrap();
        let ckpt = dir.path().join("enc.ckpt");
        mim_model.save(&ckpt).unwrap();
        let config = RunConfig::toy_vit();
        let mut model = SegModel::new(config.model.clone(), 9).unwrap();
        let applied = restore_backbone(&mut model, &ckpt).unwrap();
        assert!(applied > 0);
        let pid = model.vit_pos_embed().unwrap();
        assert_eq!(model.ps.value(pid).shape(), &[1, 64, 64]); // 8x8 grid, D=64
    }
}
