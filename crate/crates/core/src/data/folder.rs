//! Generic `root/<class>/<image>` reader.
//!
//! When `root/train` and `root/test` both exist they are read as the two
//! splits; otherwise a seeded per-class fraction of each folder is held out
//! as the test split.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape};
use crate::rng::rng_for;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageFolderOptions {
    pub height: usize,
    pub width: usize,
    /// Held-out fraction per class for single-level layouts.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl Default for ImageFolderOptions {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            test_fraction: default_test_fraction(),
            seed: 0,
        }
    }
}

type ClassFiles = BTreeMap<String, Vec<PathBuf>>;

fn list_classes(root: &Path) -> Result<ClassFiles> {
    let entries = fs::read_dir(root).map_err(|e| Error::ingestion(root, e.to_string()))?;
    let mut classes = ClassFiles::new();
    for entry in entries {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(entry.path())?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.path())
            .collect();
        files.sort();
        classes.insert(name, files);
    }
    Ok(classes)
}

/// Assigns class ids by manifest order, or lexicographically without one.
fn class_order(classes: &ClassFiles, manifest: Option<&[String]>) -> Result<Vec<String>> {
    match manifest {
        None => Ok(classes.keys().cloned().collect()),
        Some(list) => {
            if let Some(extra) = classes.keys().find(|k| !list.contains(k)) {
                return Err(Error::Validation(format!(
                    "class folder '{extra}' is not listed in the manifest"
                )));
            }
            if let Some(missing) = list.iter().find(|k| !classes.contains_key(*k)) {
                return Err(Error::Validation(format!(
                    "manifest class '{missing}' has no folder"
                )));
            }
            Ok(list.to_vec())
        }
    }
}

fn decode(path: &Path, opts: &ImageFolderOptions, out: &mut Vec<f32>) -> Result<()> {
    let img = image::open(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let img = img
        .resize_exact(opts.width as u32, opts.height as u32, FilterType::Triangle)
        .to_rgb8();
    let plane = opts.width * opts.height;
    let start = out.len();
    out.resize(start + 3 * plane, 0.0);
    for (k, px) in img.pixels().enumerate() {
        for c in 0..3 {
            out[start + c * plane + k] = px[c] as f32 / 255.0;
        }
    }
    Ok(())
}

pub fn load_image_folder(
    root: &Path,
    manifest: Option<&[String]>,
    opts: &ImageFolderOptions,
) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::ingestion(root, "not a directory"));
    }
    let (train_dir, test_dir) = (root.join("train"), root.join("test"));
    let split_layout = train_dir.is_dir() && test_dir.is_dir();
    let train_classes = list_classes(if split_layout { &train_dir } else { root })?;
    let test_classes = if split_layout {
        list_classes(&test_dir)?
    } else {
        ClassFiles::new()
    };

    let mut names = class_order(&train_classes, manifest)?;
    names.retain(|name| {
        let empty = train_classes[name].is_empty();
        if empty {
            log::warn!("class folder '{name}' is empty and is excluded");
        }
        !empty
    });

    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for (label, name) in names.iter().enumerate() {
        let mut files = train_classes[name].clone();
        let mut held_out = test_classes.get(name).cloned().unwrap_or_default();
        if !split_layout {
            files.shuffle(&mut rng_for(opts.seed, &format!("folder/split/{name}")));
            let n_test = (files.len() as f64 * opts.test_fraction).round() as usize;
            held_out = files.drain(..n_test.min(files.len().saturating_sub(1))).collect();
            files.sort();
            held_out.sort();
        }
        for f in &files {
            decode(f, opts, &mut train.0)?;
            train.1.push(label);
        }
        for f in &held_out {
            decode(f, opts, &mut test.0)?;
            test.1.push(label);
        }
    }
    let dataset_name = root
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image_folder".into());
    Ok(Dataset::new(
        dataset_name,
        ImageShape::new(3, opts.height, opts.width),
        names.len(),
        train,
        test,
    )?
    .with_class_names(names)
    .with_default_augment(true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn write_png(path: &Path, value: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(4, 4, Rgb([value, value, value]))
            .save(path)
            .unwrap();
    }

    fn fixture(root: &Path) {
        for (k, class) in ["cat", "dog", "eel"].iter().enumerate() {
            for i in 0..2 {
                write_png(&root.join(class).join(format!("{i}.png")), (k * 100) as u8);
            }
        }
    }

    fn opts() -> ImageFolderOptions {
        ImageFolderOptions {
            height: 4,
            width: 4,
            test_fraction: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn enumerates_classes() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_image_folder(dir.path(), None, &opts()).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.num_classes, 3);
        assert_eq!(ds.class_names, vec!["cat", "dog", "eel"]);
    }

    #[test]
    fn manifest_controls_labels() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let manifest: Vec<String> = ["eel", "cat", "dog"].iter().map(|s| s.to_string()).collect();
        let ds = load_image_folder(dir.path(), Some(&manifest), &opts()).unwrap();
        assert_eq!(ds.class_names, manifest);
        // eel images were written with value 200 and must carry label 0.
        let eel: Vec<usize> = (0..ds.num_train())
            .filter(|&i| (ds.image(i)[0] - 200.0 / 255.0).abs() < 1e-6)
            .collect();
        assert_eq!(eel.len(), 2);
        assert!(eel.iter().all(|&i| ds.label(i) == 0));
    }

    #[test]
    fn folder_missing_from_manifest_is_named() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let manifest = vec!["cat".to_string(), "dog".to_string()];
        let err = load_image_folder(dir.path(), Some(&manifest), &opts()).unwrap_err();
        assert!(err.to_string().contains("eel"), "{err}");
    }

    #[test]
    fn empty_class_is_excluded() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::create_dir_all(dir.path().join("fox")).unwrap();
        let ds = load_image_folder(dir.path(), None, &opts()).unwrap();
        assert_eq!(ds.num_classes, 3);
    }

    #[test]
    fn undecodable_image_names_file() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        fs::write(dir.path().join("dog").join("broken.png"), b"not an image").unwrap();
        let err = load_image_folder(dir.path(), None, &opts()).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn held_out_split() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path());
        let ds = load_image_folder(
            dir.path(),
            None,
            &ImageFolderOptions {
                test_fraction: 0.5,
                ..opts()
            },
        )
        .unwrap();
        assert_eq!(ds.num_train(), 3);
        assert_eq!(ds.num_test(), 3);
    }
}
