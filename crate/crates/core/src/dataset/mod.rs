//! Segmentation dataset ingestion and statistics.
//!
//! Directory convention: `root/{images,masks}/{train,test}/<id>.<ext>`,
//! masks are single-channel 8-bit images whose pixel value is the class id
//! (0 = background), and a `dataset.json` descriptor at the root binds
//! `num_classes` and class names.

pub mod augment;
mod gen;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

pub use augment::{augment, AugmentConfig};
pub use gen::{generate_class_folders, generate_toy_dataset, ToyDatasetSpec};

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// An RGB image with an aligned per-pixel class-id mask.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub id: String,
    /// (H,W,3) values in [0,1].
    pub image: Array3<f64>,
    /// (H,W) class ids, each < num_classes of the owning dataset.
    pub mask: Array2<u8>,
}

/// Root-level descriptor file (`dataset.json`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub num_classes: usize,
    #[serde(default)]
    pub class_names: Vec<String>,
}

impl DatasetDescriptor {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("dataset.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut desc: DatasetDescriptor =
            serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if desc.num_classes < 1 {
            return Err(Error::Dataset("num_classes must be >= 1".into()));
        }
        if desc.class_names.is_empty() {
            desc.class_names = (0..desc.num_classes)
                .map(|c| if c == 0 { "background".into() } else { format!("class_{c}") })
                .collect();
        }
        if desc.class_names.len() != desc.num_classes {
            return Err(Error::Dataset(format!(
                "descriptor lists {} class names for {} classes",
                desc.class_names.len(),
                desc.num_classes
            )));
        }
        Ok(desc)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join("dataset.json");
        let text = serde_json::to_string_pretty(self).expect("descriptor serializes");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct SampleEntry {
    pub id: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Validated listing of one split. Iteration order is sorted by id.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub entries: Vec<SampleEntry>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Decode one sample to arrays.
    pub fn load_sample(&self, index: usize) -> Result<ImageSample> {
        let entry = &self.entries[index];
        load_pair(entry, self.num_classes)
    }
}

fn load_pair(entry: &SampleEntry, num_classes: usize) -> Result<ImageSample> {
    let img = image::open(&entry.image_path)
        .map_err(|e| Error::image(&entry.image_path, e))?
        .to_rgb8();
    let mask_img = image::open(&entry.mask_path)
        .map_err(|e| Error::image(&entry.mask_path, e))?
        .to_luma8();
    if img.dimensions() != mask_img.dimensions() {
        return Err(Error::MaskSizeMismatch {
            id: entry.id.clone(),
            img_w: img.width(),
            img_h: img.height(),
            mask_w: mask_img.width(),
            mask_h: mask_img.height(),
        });
    }
    let mask = util::mask_to_array(&mask_img);
    if let Some(&bad) = mask.iter().find(|&&v| (v as usize) >= num_classes) {
        return Err(Error::MaskValueOutOfRange {
            id: entry.id.clone(),
            value: bad,
            num_classes,
        });
    }
    Ok(ImageSample {
        id: entry.id.clone(),
        image: util::image_to_array(&img),
        mask,
    })
}

/// Build and validate a manifest for `root` and `split`.
///
/// Every image must have a mask with the same stem; masks are decoded once
/// here to verify sizes and class-id ranges against the descriptor.
pub fn load_dataset(root: &Path, split: &str) -> Result<DatasetManifest> {
    let desc = DatasetDescriptor::load(root)?;
    let image_dir = root.join("images").join(split);
    let mask_dir = root.join("masks").join(split);
    if !image_dir.is_dir() {
        return Err(Error::Dataset(format!(
            "image directory not found: {}",
            image_dir.display()
        )));
    }
    if !mask_dir.is_dir() {
        return Err(Error::MaskDirNotFound(mask_dir));
    }

    let mut entries = Vec::new();
    let dir = fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    for item in dir {
        let item = item.map_err(|e| Error::io(&image_dir, e))?;
        let path = item.path();
        let Some(ext) = path.extension().and_then(|e| e.to_str()) else {
            continue;
        };
        if !IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Dataset(format!("unreadable file name {}", path.display())))?
            .to_string();
        let mask_path = IMAGE_EXTENSIONS
            .iter()
            .map(|e| mask_dir.join(format!("{id}.{e}")))
            .find(|p| p.is_file())
            .ok_or_else(|| Error::MissingMask(id.clone()))?;
        entries.push(SampleEntry {
            id,
            image_path: path,
            mask_path,
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));

    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        split: split.to_string(),
        num_classes: desc.num_classes,
        class_names: desc.class_names,
        entries,
    };
    // Full validation pass: sizes and value ranges are hard errors.
    for i in 0..manifest.len() {
        manifest.load_sample(i)?;
    }
    Ok(manifest)
}

/// Per-class frequency row of a [`ClassFrequencyReport`].
#[derive(Debug, Clone, Serialize)]
pub struct ClassFrequency {
    pub class_id: usize,
    pub class_name: String,
    pub train_images: usize,
    pub test_images: usize,
    pub train_pixels: u64,
    pub long_tail: bool,
}

/// Class-balance audit over a train manifest and its test companion.
#[derive(Debug, Clone, Serialize)]
pub struct ClassFrequencyReport {
    pub threshold: usize,
    pub classes: Vec<ClassFrequency>,
}

pub const DEFAULT_LONG_TAIL_THRESHOLD: usize = 10;

/// Count, per class, how many images contain it and how many train pixels
/// carry it. A class counts once per image regardless of pixel count.
pub fn class_frequency_report(
    train: &DatasetManifest,
    test: &DatasetManifest,
    threshold: usize,
) -> Result<ClassFrequencyReport> {
    if train.num_classes != test.num_classes {
        return Err(Error::Dataset(format!(
            "manifests disagree on num_classes: {} vs {}",
            train.num_classes, test.num_classes
        )));
    }
    let c = train.num_classes;
    let mut train_images = vec![0usize; c];
    let mut test_images = vec![0usize; c];
    let mut train_pixels = vec![0u64; c];
    for i in 0..train.len() {
        let sample = train.load_sample(i)?;
        let mut seen = vec![false; c];
        for &v in sample.mask.iter() {
            train_pixels[v as usize] += 1;
            seen[v as usize] = true;
        }
        for (cls, &s) in seen.iter().enumerate() {
            if s {
                train_images[cls] += 1;
            }
        }
    }
    for i in 0..test.len() {
        let sample = test.load_sample(i)?;
        let mut seen = vec![false; c];
        for &v in sample.mask.iter() {
            seen[v as usize] = true;
        }
        for (cls, &s) in seen.iter().enumerate() {
            if s {
                test_images[cls] += 1;
            }
        }
    }
    let classes = (0..c)
        .map(|cls| ClassFrequency {
            class_id: cls,
            class_name: train.class_names[cls].clone(),
            train_images: train_images[cls],
            test_images: test_images[cls],
            train_pixels: train_pixels[cls],
            long_tail: train_images[cls] <= threshold,
        })
        .collect();
    Ok(ClassFrequencyReport { threshold, classes })
}

impl ClassFrequencyReport {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "class_id,class_name,train_images,test_images,train_pixels,long_tail"
        )?;
        for c in &self.classes {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.class_id, c.class_name, c.train_images, c.test_images, c.train_pixels, c.long_tail
            )?;
        }
        Ok(())
    }

    pub fn long_tail_classes(&self) -> Vec<&ClassFrequency> {
        self.classes.iter().filter(|c| c.long_tail).collect()
    }

    /// train_images keyed by class id, for joining into eval reports.
    pub fn train_image_counts(&self) -> BTreeMap<usize, usize> {
        self.classes
            .iter()
            .map(|c| (c.class_id, c.train_images))
            .collect()
    }
}

/// Flat recursive listing of images under `root`, optionally labelled by the
/// first path component (class-folder layout). Used for tokenizer and
/// encoder pretraining corpora where no masks exist.
#[derive(Debug, Clone)]
pub struct ImageFolder {
    pub root: PathBuf,
    pub entries: Vec<(PathBuf, Option<String>)>,
}

impl ImageFolder {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Dataset(format!(
                "image folder not found: {}",
                root.display()
            )));
        }
        let mut entries = Vec::new();
        collect_images(root, root, &mut entries)?;
        entries.sort();
        if entries.is_empty() {
            return Err(Error::Dataset(format!(
                "no images under {}",
                root.display()
            )));
        }
        Ok(Self {
            root: root.to_path_buf(),
            entries: entries
                .into_iter()
                .map(|(rel, path)| {
                    let label = rel
                        .parent()
                        .filter(|p| !p.as_os_str().is_empty())
                        .and_then(|p| p.iter().next())
                        .map(|s| s.to_string_lossy().into_owned());
                    (path, label)
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Load an image resized to `size` x `size`, values in [0,1].
    pub fn load_resized(&self, index: usize, size: usize) -> Result<Array3<f64>> {
        let (path, _) = &self.entries[index];
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let arr = util::image_to_array(&img);
        Ok(util::resize_bilinear_hwc(&arr, size, size))
    }

    pub fn label(&self, index: usize) -> Option<&str> {
        self.entries[index].1.as_deref()
    }
}

fn collect_images(root: &Path, dir: &Path, out: &mut Vec<(PathBuf, PathBuf)>) -> Result<()> {
    let rd = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for item in rd {
        let item = item.map_err(|e| Error::io(dir, e))?;
        let path = item.path();
        if path.is_dir() {
            collect_images(root, &path, out)?;
        } else if let Some(ext) = path.extension().and_then(|e| e.to_str()) {
            if IMAGE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.push((rel, path));
            }
        }
    }
    Ok(())
}
