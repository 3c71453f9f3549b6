//! Checks against the real FoodSeg103 distribution. These run only when
//! FOODSEG103_ROOT points at a dataset root laid out in the repository
//! convention (images/, masks/, dataset.json with num_classes 104);
//! otherwise they print a skip notice and pass vacuously.

use morsel::dataset::{class_frequency_report, load_dataset, DEFAULT_LONG_TAIL_THRESHOLD};

fn root() -> Option<std::path::PathBuf> {
    match std::env::var_os("FOODSEG103_ROOT") {
        Some(p) => Some(std::path::PathBuf::from(p)),
        None => {
            eprintln!("FOODSEG103_ROOT not set; skipping dataset-distribution checks");
            None
        }
    }
}

#[test]
fn split_totals_sum_to_published_count() {
    let Some(root) = root() else { return };
    let train = load_dataset(&root, "train").unwrap();
    let test = load_dataset(&root, "test").unwrap();
    assert_eq!(train.len() + test.len(), 7118);
    assert_eq!(train.num_classes, 104);
}

#[test]
fn long_tail_counts_match_published_examples() {
    let Some(root) = root() else { return };
    let train = load_dataset(&root, "train").unwrap();
    let test = load_dataset(&root, "test").unwrap();
    let report = class_frequency_report(&train, &test, DEFAULT_LONG_TAIL_THRESHOLD).unwrap();
    let by_name = |name: &str| {
        report
            .classes
            .iter()
            .find(|c| c.class_name.eq_ignore_ascii_case(name))
            .unwrap_or_else(|| panic!("class '{name}' not in descriptor"))
    };
    let hamburger = by_name("hamburger");
    assert_eq!(hamburger.train_images, 7);
    assert_eq!(hamburger.test_images, 1);
    assert!(hamburger.long_tail);
    let kelp = by_name("kelp");
    assert_eq!(kelp.train_images, 4);
    assert_eq!(kelp.test_images, 5);
    assert!(kelp.long_tail);
    let pudding = by_name("pudding");
    assert_eq!(pudding.train_images, 5);
    assert_eq!(pudding.test_images, 1);
}
