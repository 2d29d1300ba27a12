//! Checks against the bundled official MNIST archives. Expected values
//! were computed independently of this crate's parser (numpy over the
//! published files).

use std::path::{Path, PathBuf};

use blankprobe::dataset::{parse_idx_images, parse_idx_labels, read_idx_file, LabeledImageSet};

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

#[test]
fn official_train_images_parse_with_expected_checksum() {
    let bytes = read_idx_file(&data_dir().join("train-images-idx3-ubyte.gz")).unwrap();
    let raw = parse_idx_images(&bytes).unwrap();
    assert_eq!((raw.count, raw.rows, raw.cols), (60_000, 28, 28));
    let checksum: u64 = raw.pixels.iter().map(|&v| v as u64).sum();
    assert_eq!(checksum, 1_567_298_545);
}

#[test]
fn official_test_labels_match_published_histogram() {
    let bytes = read_idx_file(&data_dir().join("t10k-labels-idx1-ubyte.gz")).unwrap();
    let labels = parse_idx_labels(&bytes).unwrap();
    assert_eq!(labels.len(), 10_000);
    let mut histogram = [0usize; 10];
    for &label in &labels {
        histogram[label as usize] += 1;
    }
    assert_eq!(
        histogram,
        [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]
    );
}

#[test]
fn official_sets_load_and_normalize() {
    let dir = data_dir();
    let set = LabeledImageSet::load(
        &dir.join("t10k-images-idx3-ubyte.gz"),
        &dir.join("t10k-labels-idx1-ubyte.gz"),
        10,
    )
    .unwrap();
    assert_eq!(set.len(), 10_000);
    assert_eq!(set.image_shape(), vec![1, 28, 28]);
    let first = set.image(0);
    assert!(first.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    // The first test digit is the well-known 7.
    assert_eq!(set.label(0), 7);
}
