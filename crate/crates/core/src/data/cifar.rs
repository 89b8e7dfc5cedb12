//! CIFAR-100 binary reader.
//!
//! Each record is 3,074 bytes: coarse label, fine label, then 1,024 red,
//! 1,024 green and 1,024 blue bytes of a 32x32 image in row-major order.
//! The fine label is used.

use std::fs;
use std::path::Path;

use super::{Dataset, ImageShape};
use crate::{Error, Result};

pub const CIFAR_RECORD_BYTES: usize = 2 + 3 * 32 * 32;
const CIFAR_CLASSES: usize = 100;

/// Decodes one binary file into `(pixels in [0, 1], fine labels)`.
pub fn read_cifar100_file(path: &Path) -> Result<(Vec<f32>, Vec<usize>)> {
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD_BYTES != 0 {
        return Err(Error::corrupt(
            path,
            format!(
                "length {} is not a positive multiple of {CIFAR_RECORD_BYTES}",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD_BYTES - 2));
    let mut labels = Vec::with_capacity(n);
    for record in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let fine = record[1] as usize;
        if fine >= CIFAR_CLASSES {
            return Err(Error::corrupt(path, format!("fine label {fine} out of range")));
        }
        labels.push(fine);
        images.extend(record[2..].iter().map(|&b| b as f32 / 255.0));
    }
    Ok((images, labels))
}

/// Loads `train.bin` and `test.bin` from `root`.
pub fn load_cifar100(root: &Path) -> Result<Dataset> {
    let train = read_cifar100_file(&root.join("train.bin"))?;
    let test = read_cifar100_file(&root.join("test.bin"))?;
    let mut ds = Dataset::new(
        "cifar100",
        ImageShape::new(3, 32, 32),
        CIFAR_CLASSES,
        train,
        test,
    )?
    .with_default_augment(true);
    if let Ok(names) = fs::read_to_string(root.join("fine_label_names.txt")) {
        let names: Vec<String> = names
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        if names.len() == CIFAR_CLASSES {
            ds = ds.with_class_names(names);
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(coarse: u8, fine: u8, seed: u8) -> Vec<u8> {
        let mut r = vec![coarse, fine];
        r.extend((0..3072).map(|i| (i as u32 * 7 + seed as u32) as u8));
        r
    }

    #[test]
    fn single_record_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.bin");
        fs::write(&path, record(3, 7, 0)).unwrap();
        let (_, labels) = read_cifar100_file(&path).unwrap();
        assert_eq!(labels, vec![7]);
    }

    #[test]
    fn two_records_plane_major_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two.bin");
        let (a, b) = (record(1, 10, 0), record(2, 99, 5));
        let mut bytes = a.clone();
        bytes.extend(&b);
        fs::write(&path, &bytes).unwrap();
        let (images, labels) = read_cifar100_file(&path).unwrap();
        assert_eq!(labels, vec![10, 99]);
        for (k, rec) in [a, b].iter().enumerate() {
            for ch in 0..3 {
                for y in 0..32 {
                    for x in 0..32 {
                        let expected = rec[2 + ch * 1024 + y * 32 + x] as f32 / 255.0;
                        let got = images[k * 3072 + ch * 1024 + y * 32 + x];
                        assert_eq!(got, expected);
                    }
                }
            }
        }
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.bin");
        fs::write(&path, vec![0u8; 3073]).unwrap();
        assert!(matches!(
            read_cifar100_file(&path),
            Err(Error::CorruptFile { .. })
        ));
    }

    #[test]
    fn missing_file_is_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_cifar100(dir.path()),
            Err(Error::Ingestion { .. })
        ));
    }

    #[test]
    fn full_layout_counts() {
        // 100 classes x 5 records each stands in for the 50,000-record file;
        // the count pass is identical.
        let dir = tempfile::tempdir().unwrap();
        let mut train = Vec::new();
        for c in 0..100u8 {
            for k in 0..5u8 {
                train.extend(record(c / 5, c, k));
            }
        }
        fs::write(dir.path().join("train.bin"), &train).unwrap();
        fs::write(dir.path().join("test.bin"), record(0, 0, 0)).unwrap();
        let ds = load_cifar100(dir.path()).unwrap();
        assert_eq!(ds.num_train(), 500);
        assert_eq!(ds.num_test(), 1);
        let mut counts = [0usize; 100];
        for i in 0..ds.num_train() {
            counts[ds.label(i)] += 1;
        }
        assert!(counts.iter().all(|&n| n == 5));
        assert!(ds.default_augment);
    }
}
