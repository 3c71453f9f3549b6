//! Image/array conversions, plain resampling, and seeding helpers.

use ndarray::{Array2, Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// (H,W,3) array in [0,1] from an RGB image.
pub fn image_to_array(img: &image::RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((h as usize, w as usize, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
        }
    }
    out
}

pub fn array_to_image(arr: &Array3<f64>) -> image::RgbImage {
    let (h, w, _) = arr.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (arr[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
        image::Rgb([px(0), px(1), px(2)])
    })
}

pub fn mask_to_array(img: &image::GrayImage) -> Array2<u8> {
    let (w, h) = img.dimensions();
    Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0]
    })
}

pub fn mask_to_image(mask: &Array2<u8>) -> image::GrayImage {
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([mask[[y as usize, x as usize]]])
    })
}

/// Bilinear resize of an (H,W,3) image with half-pixel centers.
pub fn resize_bilinear_hwc(img: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (h, w, c) = img.dim();
    if (h, w) == (oh, ow) {
        return img.clone();
    }
    let mut out = Array3::<f64>::zeros((oh, ow, c));
    for oy in 0..oh {
        let sy = ((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = sy - y0 as f64;
        for ox in 0..ow {
            let sx = ((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = sx - x0 as f64;
            for ch in 0..c {
                out[[oy, ox, ch]] = img[[y0, x0, ch]] * (1.0 - ty) * (1.0 - tx)
                    + img[[y0, x1, ch]] * (1.0 - ty) * tx
                    + img[[y1, x0, ch]] * ty * (1.0 - tx)
                    + img[[y1, x1, ch]] * ty * tx;
            }
        }
    }
    out
}

/// Nearest-neighbour resize for class-id masks.
pub fn resize_nearest_mask(mask: &Array2<u8>, oh: usize, ow: usize) -> Array2<u8> {
    let (h, w) = mask.dim();
    if (h, w) == (oh, ow) {
        return mask.clone();
    }
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let sy = (((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).round() as i64).clamp(0, h as i64 - 1);
        let sx = (((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).round() as i64).clamp(0, w as i64 - 1);
        mask[[sy as usize, sx as usize]]
    })
}

/// Stack (H,W,3) images into an (N,3,H,W) batch.
pub fn to_nchw(images: &[Array3<f64>]) -> Array4<f64> {
    assert!(!images.is_empty());
    let (h, w, c) = images[0].dim();
    let mut out = Array4::<f64>::zeros((images.len(), c, h, w));
    for (n, img) in images.iter().enumerate() {
        assert_eq!(img.dim(), (h, w, c), "batch images must share a shape");
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[n, ch, y, x]] = img[[y, x, ch]];
                }
            }
        }
    }
    out
}

/// Deterministic sub-stream rng derived from a base seed and stream labels.
pub fn derive_rng(seed: u64, stream: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x9e37_79b9_7f4a_7c15;
    for &s in stream {
        state = splitmix(state ^ s);
    }
    ChaCha8Rng::seed_from_u64(state)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// In-place Fisher-Yates shuffle driven by an explicit rng.
pub fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    use rand::Rng;
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
