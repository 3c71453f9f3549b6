//! Deterministic synthetic datasets: colored geometric regions whose mask
//! ids match, with per-class color distributions that overlap enough to
//! keep the task non-trivial.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::{self, derive_rng};

use super::{load_dataset, DatasetDescriptor, DatasetManifest};

#[derive(Debug, Clone, Copy)]
pub struct ToyDatasetSpec {
    pub seed: u64,
    pub n_images: usize,
    pub n_classes: usize,
    /// Square image side in pixels.
    pub size: usize,
}

/// Base color per class, shared across the whole dataset.
fn class_colors(seed: u64, n_classes: usize) -> Vec<[f64; 3]> {
    let mut rng = derive_rng(seed, &[0x000C_0105]);
    (0..n_classes)
        .map(|c| {
            if c == 0 {
                [0.18, 0.18, 0.2]
            } else {
                [
                    rng.gen_range(0.25..0.95),
                    rng.gen_range(0.25..0.95),
                    rng.gen_range(0.25..0.95),
                ]
            }
        })
        .collect()
}

fn jitter_color(base: [f64; 3], rng: &mut ChaCha8Rng) -> [f64; 3] {
    let mut out = base;
    for v in &mut out {
        *v = (*v + rng.gen_range(-0.08..0.08)).clamp(0.0, 1.0);
    }
    out
}

enum Shape {
    Disk { cy: f64, cx: f64, r: f64 },
    Rect { y0: usize, x0: usize, y1: usize, x1: usize },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Disk { cy, cx, r } => {
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                dy * dy + dx * dx <= r * r
            }
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
        }
    }
}

fn render_image(
    spec: &ToyDatasetSpec,
    colors: &[[f64; 3]],
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, Array2<u8>) {
    let s = spec.size;
    let mut image = Array3::<f64>::zeros((s, s, 3));
    let mut mask = Array2::<u8>::zeros((s, s));
    let bg = jitter_color(colors[0], rng);
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                image[[y, x, c]] = (bg[c] + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0);
            }
        }
    }
    let n_shapes = rng.gen_range(2..=4);
    for _ in 0..n_shapes {
        let class = rng.gen_range(1..spec.n_classes) as u8;
        let textured = rng.gen_bool(0.3);
        let shape = if rng.gen_bool(0.5) {
            Shape::Disk {
                cy: rng.gen_range(0.2 * s as f64..0.8 * s as f64),
                cx: rng.gen_range(0.2 * s as f64..0.8 * s as f64),
                r: rng.gen_range(0.12 * s as f64..0.3 * s as f64),
            }
        } else {
            let h = rng.gen_range(s / 5..s / 2);
            let w = rng.gen_range(s / 5..s / 2);
            let y0 = rng.gen_range(0..s - h);
            let x0 = rng.gen_range(0..s - w);
            Shape::Rect {
                y0,
                x0,
                y1: y0 + h,
                x1: x0 + w,
            }
        };
        let color = jitter_color(colors[class as usize], rng);
        for y in 0..s {
            for x in 0..s {
                if shape.contains(y, x) {
                    mask[[y, x]] = class;
                    let speckle = if textured { rng.gen_range(-0.12..0.12) } else { 0.0 };
                    for c in 0..3 {
                        image[[y, x, c]] =
                            (color[c] + speckle + rng.gen_range(-0.02..0.02)).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    (image, mask)
}

/// Write a toy segmentation dataset (train and test splits plus descriptor)
/// under `root` and return the freshly loaded train manifest. Byte-identical
/// for a fixed spec.
pub fn generate_toy_dataset(spec: &ToyDatasetSpec, root: &Path) -> Result<DatasetManifest> {
    if spec.n_classes < 2 {
        return Err(Error::Invalid(format!(
            "toy dataset needs background plus at least one class, got n_classes={}",
            spec.n_classes
        )));
    }
    if spec.n_classes > 256 {
        return Err(Error::Invalid("8-bit masks cap n_classes at 256".into()));
    }
    if spec.size < 32 {
        return Err(Error::Invalid(format!("size must be >= 32, got {}", spec.size)));
    }
    let colors = class_colors(spec.seed, spec.n_classes);
    let n_test = (spec.n_images / 4).max(2);
    for (split, count, stream) in [("train", spec.n_images, 1u64), ("test", n_test, 2u64)] {
        let img_dir = root.join("images").join(split);
        let mask_dir = root.join("masks").join(split);
        fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        for i in 0..count {
            let mut rng = derive_rng(spec.seed, &[stream, i as u64]);
            let (image, mask) = render_image(spec, &colors, &mut rng);
            let id = format!("toy_{split}_{i:04}");
            let img_path = img_dir.join(format!("{id}.png"));
            let mask_path = mask_dir.join(format!("{id}.png"));
            util::array_to_image(&image)
                .save(&img_path)
                .map_err(|e| Error::image(&img_path, e))?;
            util::mask_to_image(&mask)
                .save(&mask_path)
                .map_err(|e| Error::image(&mask_path, e))?;
        }
    }
    DatasetDescriptor {
        num_classes: spec.n_classes,
        class_names: (0..spec.n_classes)
            .map(|c| if c == 0 { "background".into() } else { format!("class_{c}") })
            .collect(),
    }
    .save(root)?;
    load_dataset(root, "train")
}

/// Classification-style layout: `root/<class_name>/img_NNNN.png`, each image
/// showing shapes of a single foreground class. Used to probe tokenizer
/// semantics with within- vs cross-class token overlap.
pub fn generate_class_folders(
    seed: u64,
    root: &Path,
    n_classes: usize,
    per_class: usize,
    size: usize,
) -> Result<Vec<(String, Vec<std::path::PathBuf>)>> {
    if n_classes < 2 {
        return Err(Error::Invalid("need at least two classes".into()));
    }
    let colors = class_colors(seed, n_classes + 1); // index 0 stays background
    let mut out = Vec::new();
    for class in 1..=n_classes {
        let name = format!("class_{class}");
        let dir = root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut paths = Vec::new();
        for i in 0..per_class {
            let mut rng = derive_rng(seed, &[0xF0_1D, class as u64, i as u64]);
            let spec = ToyDatasetSpec {
                seed,
                n_images: 1,
                n_classes: 2,
                size,
            };
            // Render with a palette that maps "class 1" to this class color.
            let palette = vec![colors[0], colors[class]];
            let (image, _) = render_image(&spec, &palette, &mut rng);
            let path = dir.join(format!("img_{i:04}.png"));
            util::array_to_image(&image)
                .save(&path)
                .map_err(|e| Error::image(&path, e))?;
            paths.push(path);
        }
        out.push((name, paths));
    }
    Ok(out)
}
