use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use morsel::config::RunConfig;
use morsel::dataset::{
    self, class_frequency_report, generate_class_folders, generate_toy_dataset, load_dataset,
    ImageFolder, ToyDatasetSpec,
};
use morsel::eval::{
    class_palette, evaluate_dataset, predict_sliding, render_report, InferenceMode,
    REFERENCE_RESULTS,
};
use morsel::mim::{pretrain, PretrainConfig};
use morsel::seg::{finetune_loop, load_model, predict_whole};
use morsel::tokenizer::{
    token_iou_matrix, train_tokenizer, write_iou_matrix_csv, TokenizerTrainConfig, VqkdTokenizer,
};
use morsel::util;

#[derive(Parser)]
#[command(name = "morsel", version, about = "Desk-scale semantic segmentation lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dataset utilities: generation and class-balance statistics
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Tokenizer training, encoding, and similarity analysis
    Tokenizer {
        #[command(subcommand)]
        command: TokenizerCommand,
    },
    /// Masked-patch pretraining of the ViT encoder
    Pretrain(PretrainArgs),
    /// Fine-tune a segmentation model
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Render input | prediction | ground-truth panels
    Render(RenderArgs),
    /// Print a named preset as a JSON run config
    Config {
        /// toy_vit, toy_dcn, beit_base_foodseg103, beit_large_foodseg103,
        /// internimage_b_foodseg103
        preset: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Emit per-class frequency statistics as CSV plus a long-tail summary
    Stats {
        root: PathBuf,
        /// Long-tail threshold on train image count
        #[arg(long, default_value_t = dataset::DEFAULT_LONG_TAIL_THRESHOLD)]
        threshold: usize,
        /// Output CSV path (stdout when omitted)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a deterministic synthetic segmentation dataset
    Gen {
        root: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        images: usize,
        #[arg(long, default_value_t = 5)]
        classes: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Also write a classification-style folder layout per class
        #[arg(long)]
        class_folders: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum TokenizerCommand {
    /// Train a tokenizer on an image folder against a frozen random teacher
    Train {
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        steps: u64,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
        #[arg(long, default_value_t = 64)]
        codebook: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Tokenize one image and emit its codes as CSV
    Encode {
        checkpoint: PathBuf,
        image: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pairwise token-IoU matrix over a set of images, as CSV
    Similarity {
        checkpoint: PathBuf,
        images: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print 1.0 on the diagonal instead of '-'
        #[arg(long)]
        self_as_one: bool,
    },
}

#[derive(Args)]
struct PretrainArgs {
    /// Image folder (class subdirectories optional)
    data: PathBuf,
    /// Frozen tokenizer checkpoint providing the code targets
    #[arg(long)]
    tokenizer: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON PretrainConfig file; flags below are ignored when given
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    steps: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.4)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.05)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct FinetuneArgs {
    /// Dataset root (images/, masks/, dataset.json)
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Preset name (toy_vit, toy_dcn, beit_base_foodseg103,
    /// beit_large_foodseg103, internimage_b_foodseg103)
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// JSON run-config file overriding any preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Backbone sanity check: vit | dcn (must match the config)
    #[arg(long)]
    backbone: Option<String>,
    /// Pretrained backbone checkpoint to restore before fine-tuning
    #[arg(long)]
    pretrained: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, default_value = "test")]
    val_split: String,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// sliding_window | whole_image
    #[arg(long, default_value = "sliding_window")]
    mode: String,
    /// Sliding-window stride (defaults to 2/3 of the crop)
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print published reference rows alongside the summary
    #[arg(long)]
    references: bool,
}

#[derive(Args)]
struct RenderArgs {
    checkpoint: PathBuf,
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Sample ids to render (all when omitted)
    #[arg(long)]
    ids: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

fn writer_or_stdout(path: &Option<PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Dataset { command } => match command {
            DatasetCommand::Stats { root, threshold, out } => {
                let train = load_dataset(&root, "train")?;
                let test = load_dataset(&root, "test")?;
                let report = class_frequency_report(&train, &test, threshold)?;
                let mut w = writer_or_stdout(&out)?;
                report.write_csv(&mut w)?;
                w.flush()?;
                let tail = report.long_tail_classes();
                eprintln!(
                    "{} classes, {} in the long tail (train image count <= {threshold}):",
                    report.classes.len(),
                    tail.len()
                );
                for c in tail {
                    eprintln!(
                        "  {} ({}): {} train / {} test images",
                        c.class_name, c.class_id, c.train_images, c.test_images
                    );
                }
            }
            DatasetCommand::Gen {
                root,
                seed,
                images,
                classes,
                size,
                class_folders,
            } => {
                let manifest = generate_toy_dataset(
                    &ToyDatasetSpec {
                        seed,
                        n_images: images,
                        n_classes: classes,
                        size,
                    },
                    &root,
                )?;
                eprintln!(
                    "wrote {} train samples (+ test split) under {}",
                    manifest.len(),
                    root.display()
                );
                if let Some(folder_root) = class_folders {
                    let folders =
                        generate_class_folders(seed, &folder_root, classes - 1, images, size)?;
                    eprintln!(
                        "wrote {} class folders under {}",
                        folders.len(),
                        folder_root.display()
                    );
                }
            }
        },
        Command::Tokenizer { command } => match command {
            TokenizerCommand::Train {
                data,
                out,
                steps,
                batch_size,
                resolution,
                codebook,
                lr,
                seed,
            } => {
                let folder = ImageFolder::open(&data)?;
                let mut config = TokenizerTrainConfig::toy(resolution);
                config.steps = steps;
                config.batch_size = batch_size;
                config.vqkd.codebook_size = codebook;
                config.lr = lr;
                config.seed = seed;
                std::fs::create_dir_all(&out)?;
                let log_path = out.join("loss.csv");
                let mut log = BufWriter::new(File::create(&log_path)?);
                let (model, summary) = train_tokenizer(&config, &folder, Some(&mut log))?;
                log.flush()?;
                let ckpt = out.join("tokenizer.ckpt");
                model.save(&ckpt)?;
                let manifest = serde_json::json!({
                    "config": config,
                    "codes_used": summary.codes_used,
                    "codebook_size": summary.codebook_size,
                    "final_loss": summary.losses.last(),
                });
                std::fs::write(
                    out.join("run_manifest.json"),
                    serde_json::to_string_pretty(&manifest)?,
                )?;
                eprintln!(
                    "tokenizer saved to {} ({} of {} codes in use)",
                    ckpt.display(),
                    summary.codes_used,
                    summary.codebook_size
                );
            }
            TokenizerCommand::Encode { checkpoint, image, out } => {
                let model = VqkdTokenizer::load(&checkpoint)?;
                let img = image::open(&image)
                    .with_context(|| format!("opening {}", image.display()))?
                    .to_rgb8();
                let arr = util::image_to_array(&img);
                let size = model.config.encoder.img_size;
                let resized = util::resize_bilinear_hwc(&arr, size, size);
                let seq = model.tokenize_image(&resized)?;
                let mut w = writer_or_stdout(&out)?;
                writeln!(w, "patch_index,row,col,code")?;
                for (i, &code) in seq.codes.iter().enumerate() {
                    writeln!(w, "{i},{},{},{code}", i / seq.grid.1, i % seq.grid.1)?;
                }
                w.flush()?;
            }
            TokenizerCommand::Similarity {
                checkpoint,
                images,
                out,
                self_as_one,
            } => {
                if images.len() < 2 {
                    bail!("similarity needs at least two images");
                }
                let model = VqkdTokenizer::load(&checkpoint)?;
                let size = model.config.encoder.img_size;
                let mut seqs = Vec::new();
                let mut names = Vec::new();
                for path in &images {
                    let img = image::open(path)
                        .with_context(|| format!("opening {}", path.display()))?
                        .to_rgb8();
                    let arr = util::image_to_array(&img);
                    let resized = util::resize_bilinear_hwc(&arr, size, size);
                    seqs.push(model.tokenize_image(&resized)?);
                    names.push(
                        path.file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| path.display().to_string()),
                    );
                }
                let matrix = token_iou_matrix(&seqs)?;
                let mut w = writer_or_stdout(&out)?;
                write_iou_matrix_csv(&matrix, &names, self_as_one, &mut w)?;
                w.flush()?;
            }
        },
        Command::Pretrain(args) => {
            let folder = ImageFolder::open(&args.data)?;
            let tokenizer = VqkdTokenizer::load(&args.tokenizer)?;
            let config = match &args.config {
                Some(path) => PretrainConfig::load(path)?,
                None => PretrainConfig {
                    encoder: tokenizer.config.encoder.clone(),
                    mask_ratio: args.mask_ratio,
                    steps: args.steps,
                    batch_size: args.batch_size,
                    lr: args.lr,
                    weight_decay: args.weight_decay,
                    betas: (0.9, 0.999),
                    seed: args.seed,
                    checkpoint_every: 100,
                },
            };
            std::fs::create_dir_all(&args.out)?;
            let log_path = args.out.join("loss.csv");
            let mut log = BufWriter::new(File::create(&log_path)?);
            let (model, losses) = pretrain(&config, &folder, &tokenizer, Some(&mut log), Some(&args.out))?;
            log.flush()?;
            let ckpt = args.out.join("encoder.ckpt");
            model.save(&ckpt)?;
            std::fs::write(
                args.out.join("run_manifest.json"),
                serde_json::to_string_pretty(&serde_json::json!({ "config": config }))?,
            )?;
            eprintln!(
                "encoder saved to {} (final loss {:.4})",
                ckpt.display(),
                losses.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Finetune(args) => {
            let mut config = match (&args.config, &args.preset) {
                (Some(path), _) => RunConfig::load(path)?,
                (None, Some(name)) => RunConfig::preset(name)?,
                (None, None) => bail!("pass --preset or --config"),
            };
            if let Some(kind) = &args.backbone {
                let kind: morsel::seg::BackboneKind = kind.parse()?;
                if kind != config.model.backbone {
                    bail!("--backbone {kind:?} conflicts with the selected config");
                }
            }
            if let Some(iters) = args.iterations {
                config.total_iters = iters;
            }
            if let Some(seed) = args.seed {
                config.seed = seed;
            }
            let train = load_dataset(&args.data, &args.train_split)?;
            let val = load_dataset(&args.data, &args.val_split)?;
            let summary = finetune_loop(
                &config,
                &train,
                &val,
                args.pretrained.as_deref(),
                &args.out,
            )?;
            eprintln!(
                "finished after {} iterations; best val mIoU {:.4} at iteration {}",
                summary.iterations, summary.best_miou, summary.best_iter
            );
        }
        Command::Eval(args) => {
            let (model, run) = load_model(&args.checkpoint)?;
            let manifest = load_dataset(&args.data, &args.split)?;
            let mode = match args.mode.as_str() {
                "sliding_window" => InferenceMode::SlidingWindow,
                "whole_image" => InferenceMode::WholeImage,
                other => bail!("unknown mode '{other}'"),
            };
            let crop = model.config.crop;
            let stride = args.stride.unwrap_or(crop * 2 / 3);
            let frequency = match load_dataset(&args.data, "train") {
                Ok(train) => Some(class_frequency_report(
                    &train,
                    &manifest,
                    dataset::DEFAULT_LONG_TAIL_THRESHOLD,
                )?),
                Err(_) => None,
            };
            let report = match mode {
                InferenceMode::SlidingWindow => {
                    evaluate_dataset(&model, &manifest, crop, stride, frequency.as_ref())?
                }
                InferenceMode::WholeImage => {
                    let mut matrix = morsel::eval::ConfusionMatrix::new(manifest.num_classes);
                    for i in 0..manifest.len() {
                        let sample = manifest.load_sample(i)?;
                        let pred = predict_whole(&model, &sample.image)?;
                        matrix.update(&pred, &sample.mask)?;
                    }
                    let mut report = morsel::eval::miou(&matrix, &manifest.class_names)?;
                    if let Some(freq) = &frequency {
                        let counts = freq.train_image_counts();
                        for row in &mut report.per_class {
                            if let Some(&c) = counts.get(&row.class_id) {
                                row.train_images = Some(c);
                                row.long_tail = Some(c <= freq.threshold);
                            }
                        }
                    }
                    report
                }
            };
            let mut w = writer_or_stdout(&args.out)?;
            report.write_csv(&mut w)?;
            w.flush()?;
            eprintln!("preset {} | mode {mode:?} | {}", run.preset, report.summary());
            if args.references {
                eprintln!("published FoodSeg103 references (model, params, mIoU):");
                for (name, params, miou) in REFERENCE_RESULTS {
                    eprintln!("  {name}: {params} params, mIoU {miou}");
                }
            }
        }
        Command::Config { preset, out } => {
            let config = RunConfig::preset(&preset)?;
            let mut w = writer_or_stdout(&out)?;
            writeln!(w, "{}", serde_json::to_string_pretty(&config)?)?;
            w.flush()?;
        }
        Command::Render(args) => {
            let (model, _) = load_model(&args.checkpoint)?;
            let manifest = load_dataset(&args.data, &args.split)?;
            std::fs::create_dir_all(&args.out)?;
            let palette = class_palette(manifest.num_classes);
            let crop = model.config.crop;
            for i in 0..manifest.len() {
                let entry_id = manifest.entries[i].id.clone();
                if !args.ids.is_empty() && !args.ids.contains(&entry_id) {
                    continue;
                }
                let sample = manifest.load_sample(i)?;
                let pred = predict_sliding(&model, &sample.image, crop, crop * 2 / 3)?;
                let path = args.out.join(format!("{entry_id}.png"));
                render_report(&sample.image, &pred, &sample.mask, &palette, &path)?;
                eprintln!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
