//! Property-based checks over the evaluation and tokenization primitives.

use std::collections::BTreeSet;

use ndarray::Array2;
use proptest::prelude::*;

use morsel::eval::{miou, window_origins, ConfusionMatrix};
use morsel::mim::sample_mask;
use morsel::tokenizer::{token_iou, TokenSequence};
use morsel::util::derive_rng;

fn seq(codes: Vec<usize>) -> TokenSequence {
    let n = codes.len();
    TokenSequence {
        codes,
        grid: (1, n),
        codebook_size: 4096,
    }
}

proptest! {
    #[test]
    fn token_iou_is_symmetric_bounded_and_unit_on_equal_sets(
        a in prop::collection::vec(0usize..64, 1..40),
        b in prop::collection::vec(0usize..64, 1..40),
    ) {
        let sa = seq(a.clone());
        let sb = seq(b.clone());
        let ab = token_iou(&sa, &sb).unwrap();
        let ba = token_iou(&sb, &sa).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(token_iou(&sa, &sa).unwrap(), 1.0);
        let equal_sets = a.iter().collect::<BTreeSet<_>>() == b.iter().collect::<BTreeSet<_>>();
        prop_assert_eq!(ab == 1.0, equal_sets);
    }

    #[test]
    fn confusion_accumulation_is_order_independent(
        pixels in prop::collection::vec((0u8..5, 0u8..5), 1..200),
        split in 0usize..200,
    ) {
        let split = split.min(pixels.len());
        let as_masks = |slice: &[(u8, u8)]| {
            let gt = Array2::from_shape_vec((1, slice.len()), slice.iter().map(|p| p.0).collect()).unwrap();
            let pred = Array2::from_shape_vec((1, slice.len()), slice.iter().map(|p| p.1).collect()).unwrap();
            (gt, pred)
        };
        let mut whole = ConfusionMatrix::new(5);
        let (gt, pred) = as_masks(&pixels);
        whole.update(&pred, &gt).unwrap();
        let mut parts = ConfusionMatrix::new(5);
        for chunk in [&pixels[..split], &pixels[split..]] {
            if chunk.is_empty() {
                continue;
            }
            let (gt, pred) = as_masks(chunk);
            let mut m = ConfusionMatrix::new(5);
            m.update(&pred, &gt).unwrap();
            parts.add(&m);
        }
        prop_assert_eq!(whole, parts);
    }

    #[test]
    fn miou_stays_in_unit_interval(
        pixels in prop::collection::vec((0u8..6, 0u8..6), 1..300),
    ) {
        let gt = Array2::from_shape_vec((1, pixels.len()), pixels.iter().map(|p| p.0).collect()).unwrap();
        let pred = Array2::from_shape_vec((1, pixels.len()), pixels.iter().map(|p| p.1).collect()).unwrap();
        let mut m = ConfusionMatrix::new(6);
        m.update(&pred, &gt).unwrap();
        let names: Vec<String> = (0..6).map(|i| format!("c{i}")).collect();
        let r = miou(&m, &names).unwrap();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        prop_assert!((0.0..=1.0).contains(&r.miou_no_background));
    }

    #[test]
    fn window_origins_always_cover(len in 1usize..2000, crop in 1usize..600, stride_frac in 1usize..100) {
        let stride = (crop * stride_frac / 100).max(1).min(crop);
        let origins = window_origins(len, crop, stride);
        prop_assert_eq!(origins[0], 0);
        if len > crop {
            prop_assert_eq!(*origins.last().unwrap() + crop, len, "last window must end at len");
        }
        for pair in origins.windows(2) {
            prop_assert!(pair[1] > pair[0]);
            prop_assert!(pair[1] - pair[0] <= stride, "gaps never exceed the stride");
        }
    }

    #[test]
    fn mask_plans_have_exact_counts(n in 1usize..400, r_millis in 0usize..=1000, seed in 0u64..500) {
        let r = r_millis as f64 / 1000.0;
        let mut rng = derive_rng(seed, &[0xF00]);
        let plan = sample_mask(n, r, &mut rng);
        prop_assert_eq!(plan.masked_count(), (r * n as f64).floor() as usize);
    }
}
