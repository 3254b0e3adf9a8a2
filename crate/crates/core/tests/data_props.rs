use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use ncdg::data::idx::{encode_images, encode_labels, IMAGES_MAGIC, LABELS_MAGIC};
use ncdg::data::{batches, intensity_reverse, load_idx, preprocess, reverse_dataset, ImageDataset};
use ncdg::Error;
use proptest::prelude::*;

fn write_pair(dir: &Path, rows: usize, cols: usize, pixels: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
    let img = dir.join("images-idx3-ubyte");
    let lab = dir.join("labels-idx1-ubyte");
    fs::write(&img, encode_images(rows, cols, pixels)).unwrap();
    fs::write(&lab, encode_labels(labels)).unwrap();
    (img, lab)
}

#[test]
fn synthetic_pair_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..18).map(|i| (i * 14) as u8).collect();
    let (img, lab) = write_pair(dir.path(), 3, 3, &pixels, &[3, 7]);
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!((ds.len(), ds.height, ds.width, ds.channels), (2, 3, 3, 1));
    assert_eq!(ds.pixels, pixels);
    assert_eq!(ds.labels, vec![3, 7]);
}

#[test]
fn image_file_passed_as_labels_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, _) = write_pair(dir.path(), 3, 3, &[0; 18], &[0, 1]);
    let err = load_idx(&img, &img).unwrap_err();
    assert!(
        matches!(
            err,
            Error::BadMagic {
                expected: LABELS_MAGIC,
                found: IMAGES_MAGIC,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn count_mismatch_and_bad_labels_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let (img, lab) = write_pair(dir.path(), 3, 3, &[0; 18], &[0, 1, 2]);
    assert!(matches!(load_idx(&img, &lab), Err(Error::SizeMismatch { .. })));
    let (img, lab) = write_pair(dir.path(), 3, 3, &[0; 18], &[0, 10]);
    assert!(matches!(
        load_idx(&img, &lab),
        Err(Error::LabelOutOfRange { label: 10, .. })
    ));
}

#[test]
fn missing_file_names_the_path() {
    let err = load_idx(Path::new("/nonexistent/imgs"), Path::new("/nonexistent/labs")).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/imgs"), "{err}");
}

proptest! {
    #[test]
    fn every_header_mutation_is_rejected(
        pos in 0usize..16,
        xor in 1u8..=255,
        labels_side in any::<bool>(),
    ) {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_pair(dir.path(), 3, 3, &[7; 18], &[1, 2]);
        let target = if labels_side { &lab } else { &img };
        let mut bytes = fs::read(target).unwrap();
        let pos = if labels_side { pos % 8 } else { pos };
        bytes[pos] ^= xor;
        fs::write(target, &bytes).unwrap();
        prop_assert!(load_idx(&img, &lab).is_err());
    }

    #[test]
    fn truncation_is_rejected(cut in 1usize..34, labels_side in any::<bool>()) {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = write_pair(dir.path(), 3, 3, &[7; 18], &[1, 2]);
        let target = if labels_side { &lab } else { &img };
        let bytes = fs::read(target).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        fs::write(target, &bytes[..keep]).unwrap();
        prop_assert!(load_idx(&img, &lab).is_err());
    }

    #[test]
    fn preprocessed_batches_stay_in_unit_interval_and_reverse_exactly(
        (h, w) in (1usize..12, 1usize..12),
        pixels in prop::collection::vec(any::<u8>(), 5 * 11 * 11),
        seed in any::<u64>(),
    ) {
        let n = 5;
        let ds = ImageDataset::new("p", (h, w, 1), pixels[..n * h * w].to_vec(), vec![0, 1, 2, 3, 4], 10).unwrap();
        let ds = preprocess(&ds, 32).unwrap();
        let rev = reverse_dataset(&ds);
        let raw = batches(&ds, 2, seed, 0).unwrap();
        let aug = batches(&rev, 2, seed, 0).unwrap();
        for (r, a) in raw.iter().zip(&aug) {
            prop_assert!(r.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert_eq!(&r.indices, &a.indices);
            prop_assert_eq!(&r.labels, &a.labels);
            prop_assert!(intensity_reverse(a).images.bit_eq(&r.images));
            prop_assert!(intensity_reverse(&intensity_reverse(r)).images.bit_eq(&r.images));
        }
    }
}

fn data_root() -> PathBuf {
    std::env::var_os("NCDG_DATA_ROOT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"))
}

/// Minimal reader that shares no code with the library parser.
fn reference_idx(path: &Path) -> (Vec<u32>, Vec<u8>) {
    let mut f = fs::File::open(path).unwrap();
    let mut word = [0u8; 4];
    f.read_exact(&mut word).unwrap();
    let ndim = word[3] as usize;
    let mut dims = Vec::new();
    for _ in 0..ndim {
        f.read_exact(&mut word).unwrap();
        dims.push(u32::from_be_bytes(word));
    }
    let mut rest = Vec::new();
    f.read_to_end(&mut rest).unwrap();
    (dims, rest)
}

#[test]
fn mnist_test_split_matches_reference_reader() {
    let dir = data_root().join("mnist");
    let img = dir.join("t10k-images-idx3-ubyte");
    let lab = dir.join("t10k-labels-idx1-ubyte");
    if !img.exists() || !lab.exists() {
        eprintln!("MNIST not found under {}; skipping", dir.display());
        return;
    }
    let ds = load_idx(&img, &lab).unwrap();
    assert_eq!((ds.len(), ds.height, ds.width, ds.channels), (10_000, 28, 28, 1));
    let (dims, px) = reference_idx(&img);
    let (ldims, labels) = reference_idx(&lab);
    assert_eq!(dims, vec![10_000, 28, 28]);
    assert_eq!(ldims, vec![10_000]);
    assert_eq!(ds.pixels, px);
    assert_eq!(ds.labels, labels.iter().map(|&l| l as usize).collect::<Vec<_>>());
    // Computed with numpy over the same files.
    let mut hist = [0usize; 10];
    for &l in &ds.labels {
        hist[l] += 1;
    }
    assert_eq!(hist, [980, 1135, 1032, 1010, 982, 892, 958, 1028, 974, 1009]);
    assert_eq!(ds.pixels.iter().map(|&p| p as u64).sum::<u64>(), 264_923_200);
    assert_eq!(&ds.labels[..10], &[7, 2, 1, 0, 4, 1, 4, 9, 5, 9]);
}
