//! Confusion-matrix evaluation (mIoU, per-class IoU), sliding-window
//! inference, long-tail cross-referencing, and overlay rendering.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassFrequencyReport, DatasetManifest};
use crate::error::{Error, Result};
use crate::util;

/// C x C counts; rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate per-pixel counts from a prediction/ground-truth pair.
    pub fn update(&mut self, pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!(
                "prediction {:?} vs ground truth {:?}",
                pred.dim(),
                gt.dim()
            )));
        }
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let (p, g) = (p as usize, g as usize);
            if p >= self.num_classes || g >= self.num_classes {
                return Err(Error::Invalid(format!(
                    "class id out of range: pred {p}, gt {g}, C {}",
                    self.num_classes
                )));
            }
            self.counts[g * self.num_classes + p] += 1;
        }
        Ok(())
    }

    /// Commutative merge for parallel evaluation.
    pub fn add(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|p| self.get(c, p)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|g| self.get(g, c)).sum()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassIou {
    pub class_id: usize,
    pub class_name: String,
    /// None when the class appears in neither ground truth nor prediction.
    pub iou: Option<f64>,
    pub gt_pixels: u64,
    pub train_images: Option<usize>,
    pub long_tail: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    /// Mean IoU over classes present in gt or pred, background included.
    pub miou: f64,
    /// Same mean with class 0 excluded.
    pub miou_no_background: f64,
    pub per_class: Vec<ClassIou>,
    pub pixels: u64,
}

/// IoU_c = M[c][c] / (row_c + col_c - M[c][c]); classes absent from both
/// sides are excluded from the mean.
pub fn miou(matrix: &ConfusionMatrix, class_names: &[String]) -> Result<EvalReport> {
    if matrix.total() == 0 {
        return Err(Error::Invalid("empty confusion matrix".into()));
    }
    let c = matrix.num_classes;
    let mut per_class = Vec::with_capacity(c);
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut sum_nb = 0.0;
    let mut n_nb = 0usize;
    for cls in 0..c {
        let row = matrix.row_sum(cls);
        let col = matrix.col_sum(cls);
        let tp = matrix.get(cls, cls);
        let denom = row + col - tp;
        let iou = if denom == 0 {
            None
        } else {
            Some(tp as f64 / denom as f64)
        };
        if let Some(v) = iou {
            sum += v;
            n += 1;
            if cls != 0 {
                sum_nb += v;
                n_nb += 1;
            }
        }
        per_class.push(ClassIou {
            class_id: cls,
            class_name: class_names.get(cls).cloned().unwrap_or_else(|| format!("class_{cls}")),
            iou,
            gt_pixels: row,
            train_images: None,
            long_tail: None,
        });
    }
    Ok(EvalReport {
        miou: if n > 0 { sum / n as f64 } else { 0.0 },
        miou_no_background: if n_nb > 0 { sum_nb / n_nb as f64 } else { 0.0 },
        per_class,
        pixels: matrix.total(),
    })
}

/// Anything that maps a raw [0,1] (H,W,3) image to (C,h,w) class logits.
pub trait LogitModel: Sync {
    fn num_classes(&self) -> usize;
    fn logits(&self, image: &Array3<f64>) -> Result<Array3<f64>>;
}

/// Window origins covering `len` with the given crop and stride: multiples
/// of `stride` clamped so the final window ends exactly at `len`.
pub fn window_origins(len: usize, crop: usize, stride: usize) -> Vec<usize> {
    assert!(stride <= crop, "stride must not exceed crop");
    if len <= crop {
        return vec![0];
    }
    let mut out = Vec::new();
    let mut y = 0usize;
    loop {
        out.push(y);
        if y + crop >= len {
            break;
        }
        y = (y + stride).min(len - crop);
    }
    out
}

/// Accumulate logits over overlapping crop-sized windows, average by
/// coverage, argmax. Images smaller than the crop are zero-padded and the
/// result un-padded.
pub fn predict_sliding(
    model: &dyn LogitModel,
    image: &Array3<f64>,
    crop: usize,
    stride: usize,
) -> Result<Array2<u8>> {
    if stride > crop {
        return Err(Error::Invalid(format!(
            "stride {stride} exceeds crop {crop}"
        )));
    }
    let (h, w, _) = image.dim();
    let (ph, pw) = (h.max(crop), w.max(crop));
    let mut padded = Array3::<f64>::zeros((ph, pw, 3));
    padded.slice_mut(ndarray::s![..h, ..w, ..]).assign(image);
    let c = model.num_classes();
    let mut acc = Array3::<f64>::zeros((c, ph, pw));
    let mut coverage = Array2::<f64>::zeros((ph, pw));
    for &oy in &window_origins(ph, crop, stride) {
        for &ox in &window_origins(pw, crop, stride) {
            let window = padded
                .slice(ndarray::s![oy..oy + crop, ox..ox + crop, ..])
                .to_owned();
            let logits = model.logits(&window)?;
            if logits.dim() != (c, crop, crop) {
                return Err(Error::Shape(format!(
                    "model returned {:?}, expected ({c},{crop},{crop})",
                    logits.dim()
                )));
            }
            let mut slot = acc.slice_mut(ndarray::s![.., oy..oy + crop, ox..ox + crop]);
            slot += &logits;
            let mut cov = coverage.slice_mut(ndarray::s![oy..oy + crop, ox..ox + crop]);
            cov += 1.0;
        }
    }
    let mut mask = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let cov = coverage[[y, x]];
            debug_assert!(cov >= 1.0, "coverage must be >= 1 everywhere");
            let mut best = 0usize;
            let mut best_v = f64::NEG_INFINITY;
            for cls in 0..c {
                let v = acc[[cls, y, x]] / cov;
                if v > best_v {
                    best_v = v;
                    best = cls;
                }
            }
            mask[[y, x]] = best as u8;
        }
    }
    Ok(mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    SlidingWindow,
    WholeImage,
}

/// Evaluate a model over a manifest. `frequency` joins train-image counts
/// and long-tail flags into the per-class rows.
pub fn evaluate_dataset(
    model: &dyn LogitModel,
    manifest: &DatasetManifest,
    crop: usize,
    stride: usize,
    frequency: Option<&ClassFrequencyReport>,
) -> Result<EvalReport> {
    if model.num_classes() != manifest.num_classes {
        return Err(Error::Config(format!(
            "model predicts {} classes, dataset has {}",
            model.num_classes(),
            manifest.num_classes
        )));
    }
    // Per-image confusion matrices reduce by commutative addition, so
    // parallel evaluation is deterministic.
    let matrices: Vec<ConfusionMatrix> = (0..manifest.len())
        .into_par_iter()
        .map(|i| -> Result<ConfusionMatrix> {
            let sample = manifest.load_sample(i)?;
            let pred = predict_sliding(model, &sample.image, crop, stride)?;
            let mut m = ConfusionMatrix::new(manifest.num_classes);
            m.update(&pred, &sample.mask)?;
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfusionMatrix::new(manifest.num_classes);
    for m in &matrices {
        total.add(m);
    }
    let mut report = miou(&total, &manifest.class_names)?;
    if let Some(freq) = frequency {
        let counts: BTreeMap<usize, usize> = freq.train_image_counts();
        for row in &mut report.per_class {
            if let Some(&c) = counts.get(&row.class_id) {
                row.train_images = Some(c);
                row.long_tail = Some(c <= freq.threshold);
            }
        }
    }
    Ok(report)
}

impl EvalReport {
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(
            w,
            "class_id,class_name,iou,gt_pixels,train_images,long_tail"
        )?;
        for c in &self.per_class {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                c.class_id,
                c.class_name,
                c.iou.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
                c.gt_pixels,
                c.train_images.map(|v| v.to_string()).unwrap_or_default(),
                c.long_tail.map(|v| v.to_string()).unwrap_or_default(),
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        format!(
            "mIoU {:.4} (background included) | mIoU {:.4} (background excluded) | {} pixels",
            self.miou, self.miou_no_background, self.pixels
        )
    }
}

/// Published FoodSeg103 reference rows (model, params, mIoU) shipped as
/// static context for report output; none of these are desk-scale targets.
pub const REFERENCE_RESULTS: [(&str, u64, f64); 6] = [
    ("BEiT v2 Large", 441_000_000, 49.4),
    ("InternImage-B", 128_000_000, 41.1),
    ("SeTR-MLA", 711_000_000, 45.1),
    ("SeTR-Naive", 723_000_000, 43.9),
    ("Swin-S", 931_000_000, 41.6),
    ("CCNet", 381_000_000, 35.5),
];

/// Deterministic class palette: golden-ratio hue stepping, background black.
pub fn class_palette(num_classes: usize) -> Vec<[u8; 3]> {
    let mut out = Vec::with_capacity(num_classes);
    for c in 0..num_classes {
        if c == 0 {
            out.push([0, 0, 0]);
            continue;
        }
        let h = (c as f64 * 0.618_033_988_749_895).fract();
        out.push(hsv_to_rgb(h, 0.65, 0.95));
    }
    out
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round() as u8,
        (g * 255.0).round() as u8,
        (b * 255.0).round() as u8,
    ]
}

pub const PANEL_GUTTER: usize = 4;

/// Side-by-side panel: input | prediction | ground truth, with white
/// gutters. Width is 3*W + 2*PANEL_GUTTER.
pub fn render_panel(
    image: &Array3<f64>,
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    palette: &[[u8; 3]],
) -> Result<image::RgbImage> {
    let (h, w, _) = image.dim();
    if pred.dim() != (h, w) || gt.dim() != (h, w) {
        return Err(Error::Shape("panel inputs must share a shape".into()));
    }
    let total_w = 3 * w + 2 * PANEL_GUTTER;
    let mut out = image::RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([255, 255, 255]));
    let put_mask = |out: &mut image::RgbImage, mask: &Array2<u8>, x0: usize| {
        for y in 0..h {
            for x in 0..w {
                let color = palette[mask[[y, x]] as usize];
                out.put_pixel((x0 + x) as u32, y as u32, image::Rgb(color));
            }
        }
    };
    let img = util::array_to_image(image);
    for y in 0..h {
        for x in 0..w {
            out.put_pixel(x as u32, y as u32, *img.get_pixel(x as u32, y as u32));
        }
    }
    put_mask(&mut out, pred, w + PANEL_GUTTER);
    put_mask(&mut out, gt, 2 * w + 2 * PANEL_GUTTER);
    Ok(out)
}

pub fn render_report(
    image: &Array3<f64>,
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    palette: &[[u8; 3]],
    path: &Path,
) -> Result<()> {
    let panel = render_panel(image, pred, gt, palette)?;
    panel.save(path).map_err(|e| Error::image(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::derive_rng;
    use rand::Rng;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_predictions_have_unit_miou() {
        let mut m = ConfusionMatrix::new(3);
        let gt = Array2::from_shape_fn((8, 8), |(y, x)| ((y + x) % 3) as u8);
        m.update(&gt.clone(), &gt).unwrap();
        let r = miou(&m, &names(3)).unwrap();
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn hand_computed_two_class_case() {
        // [[3,1],[1,3]] -> IoU_0 = 3/5, IoU_1 = 3/5, mIoU = 0.6
        let mut m = ConfusionMatrix::new(2);
        let gt = Array2::from_shape_vec((2, 4), vec![0, 0, 0, 0, 1, 1, 1, 1]).unwrap();
        let pred = Array2::from_shape_vec((2, 4), vec![0, 0, 0, 1, 1, 1, 1, 0]).unwrap();
        m.update(&pred, &gt).unwrap();
        assert_eq!(m.get(0, 0), 3);
        assert_eq!(m.get(0, 1), 1);
        assert_eq!(m.get(1, 0), 1);
        assert_eq!(m.get(1, 1), 3);
        let r = miou(&m, &names(2)).unwrap();
        assert!((r.miou - 0.6).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_excluded_from_the_mean() {
        let mut m = ConfusionMatrix::new(4);
        let gt = Array2::from_shape_vec((1, 4), vec![0, 0, 1, 1]).unwrap();
        let pred = gt.clone();
        m.update(&pred, &gt).unwrap();
        let r = miou(&m, &names(4)).unwrap();
        assert!(r.per_class[2].iou.is_none());
        assert!(r.per_class[3].iou.is_none());
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn single_pixel_update() {
        let mut m = ConfusionMatrix::new(5);
        let gt = Array2::from_elem((1, 1), 2u8);
        let pred = Array2::from_elem((1, 1), 3u8);
        m.update(&pred, &gt).unwrap();
        assert_eq!(m.get(2, 3), 1);
        assert_eq!(m.total(), 1);
    }

    #[test]
    fn split_update_equals_full_update() {
        let mut rng = derive_rng(1, &[0xEA]);
        let gt = Array2::from_shape_fn((8, 6), |_| rng.gen_range(0..4) as u8);
        let pred = Array2::from_shape_fn((8, 6), |_| rng.gen_range(0..4) as u8);
        let mut full = ConfusionMatrix::new(4);
        full.update(&pred, &gt).unwrap();
        let mut half = ConfusionMatrix::new(4);
        half.update(
            &pred.slice(ndarray::s![..4, ..]).to_owned(),
            &gt.slice(ndarray::s![..4, ..]).to_owned(),
        )
        .unwrap();
        let mut other = ConfusionMatrix::new(4);
        other
            .update(
                &pred.slice(ndarray::s![4.., ..]).to_owned(),
                &gt.slice(ndarray::s![4.., ..]).to_owned(),
            )
            .unwrap();
        half.add(&other);
        assert_eq!(half, full);
    }

    #[test]
    fn relabeling_invariance() {
        let mut rng = derive_rng(2, &[0xEA]);
        let c = 5;
        let gt = Array2::from_shape_fn((10, 10), |_| rng.gen_range(0..c) as u8);
        let pred = Array2::from_shape_fn((10, 10), |_| rng.gen_range(0..c) as u8);
        let mut base = ConfusionMatrix::new(c);
        base.update(&pred, &gt).unwrap();
        let base_miou = miou(&base, &names(c)).unwrap().miou;
        for trial in 0..20 {
            let mut perm: Vec<u8> = (0..c as u8).collect();
            let mut prng = derive_rng(3, &[trial]);
            for i in (1..c).rev() {
                let j = prng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let gt_p = gt.mapv(|v| perm[v as usize]);
            let pred_p = pred.mapv(|v| perm[v as usize]);
            let mut m = ConfusionMatrix::new(c);
            m.update(&pred_p, &gt_p).unwrap();
            let r = miou(&m, &names(c)).unwrap();
            assert!((r.miou - base_miou).abs() < 1e-12);
        }
    }

    struct StripeModel {
        classes: usize,
    }

    impl LogitModel for StripeModel {
        fn num_classes(&self) -> usize {
            self.classes
        }

        // Logits depend on absolute pixel content so overlapping windows
        // agree and the sliding average is testable.
        fn logits(&self, image: &Array3<f64>) -> Result<Array3<f64>> {
            let (h, w, _) = image.dim();
            let mut out = Array3::<f64>::zeros((self.classes, h, w));
            for y in 0..h {
                for x in 0..w {
                    let v = image[[y, x, 0]];
                    for c in 0..self.classes {
                        out[[c, y, x]] = -((v * self.classes as f64) - c as f64).abs();
                    }
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn window_origins_cover_and_clamp() {
        assert_eq!(window_origins(768, 512, 341), vec![0, 256]);
        assert_eq!(window_origins(512, 512, 341), vec![0]);
        assert_eq!(window_origins(96, 64, 32), vec![0, 32]);
        let origins = window_origins(1000, 512, 341);
        assert_eq!(*origins.last().unwrap(), 488);
    }

    #[test]
    fn single_window_equals_whole_image_forward() {
        let model = StripeModel { classes: 3 };
        let mut rng = derive_rng(4, &[0xEA]);
        let image = Array3::from_shape_simple_fn((32, 32, 3), || rng.gen_range(0.0..1.0));
        let via_sliding = predict_sliding(&model, &image, 32, 32).unwrap();
        let logits = model.logits(&image).unwrap();
        let direct = Array2::from_shape_fn((32, 32), |(y, x)| {
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for c in 0..3 {
                if logits[[c, y, x]] > bv {
                    bv = logits[[c, y, x]];
                    best = c;
                }
            }
            best as u8
        });
        assert_eq!(via_sliding, direct);
    }

    #[test]
    fn sliding_matches_dense_accumulation_oracle() {
        // 96x96 image, crop 64, stride 32: compare against a brute-force
        // per-pixel average of all covering windows.
        let model = StripeModel { classes: 4 };
        let mut rng = derive_rng(5, &[0xEA]);
        let image = Array3::from_shape_simple_fn((96, 96, 3), || rng.gen_range(0.0..1.0));
        let got = predict_sliding(&model, &image, 64, 32).unwrap();
        let mut acc = Array3::<f64>::zeros((4, 96, 96));
        let mut cov = Array2::<f64>::zeros((96, 96));
        for &oy in &[0usize, 32] {
            for &ox in &[0usize, 32] {
                let window = image.slice(ndarray::s![oy..oy + 64, ox..ox + 64, ..]).to_owned();
                let logits = model.logits(&window).unwrap();
                for c in 0..4 {
                    for y in 0..64 {
                        for x in 0..64 {
                            acc[[c, oy + y, ox + x]] += logits[[c, y, x]];
                        }
                    }
                }
                for y in 0..64 {
                    for x in 0..64 {
                        cov[[oy + y, ox + x]] += 1.0;
                    }
                }
            }
        }
        let want = Array2::from_shape_fn((96, 96), |(y, x)| {
            let mut best = 0;
            let mut bv = f64::NEG_INFINITY;
            for c in 0..4 {
                let v = acc[[c, y, x]] / cov[[y, x]];
                if v > bv {
                    bv = v;
                    best = c;
                }
            }
            best as u8
        });
        assert_eq!(got, want);
    }

    #[test]
    fn non_overlapping_tiling_equals_per_tile_forward() {
        let model = StripeModel { classes: 3 };
        let mut rng = derive_rng(6, &[0xEA]);
        let image = Array3::from_shape_simple_fn((64, 64, 3), || rng.gen_range(0.0..1.0));
        let tiled = predict_sliding(&model, &image, 32, 32).unwrap();
        for oy in [0usize, 32] {
            for ox in [0usize, 32] {
                let window = image.slice(ndarray::s![oy..oy + 32, ox..ox + 32, ..]).to_owned();
                let tile = predict_sliding(&model, &window, 32, 32).unwrap();
                assert_eq!(
                    tiled.slice(ndarray::s![oy..oy + 32, ox..ox + 32]),
                    tile.view()
                );
            }
        }
    }

    #[test]
    fn panel_layout_and_determinism() {
        let mut rng = derive_rng(7, &[0xEA]);
        let image = Array3::from_shape_simple_fn((16, 20, 3), || rng.gen_range(0.0..1.0));
        let mask = Array2::from_shape_fn((16, 20), |(y, _)| (y % 3) as u8);
        let palette = class_palette(3);
        let p1 = render_panel(&image, &mask, &mask, &palette).unwrap();
        assert_eq!(p1.width() as usize, 3 * 20 + 2 * PANEL_GUTTER);
        assert_eq!(p1.height(), 16);
        // identical pred and gt panels are pixel-identical
        for y in 0..16u32 {
            for x in 0..20u32 {
                let a = p1.get_pixel(20 + PANEL_GUTTER as u32 + x, y);
                let b = p1.get_pixel(2 * (20 + PANEL_GUTTER as u32) + x, y);
                assert_eq!(a, b);
            }
        }
        assert_eq!(class_palette(10), class_palette(10));
    }
}
