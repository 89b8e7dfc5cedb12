//! Labeled image collections with a fixed train/test split.

mod augment;
mod cifar;
mod folder;
mod stats;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use augment::{augment_batch, Augmentation};
pub use cifar::{load_cifar100, read_cifar100_file, CIFAR_RECORD_BYTES};
pub use folder::{load_image_folder, ImageFolderOptions};
pub use stats::{class_stats, ClassStats, TailRule};
pub use synthetic::{
    load_synthetic_cache, make_synthetic, save_synthetic_cache, synthetic_means, SyntheticConfig,
};

use crate::protocol::LabelSource;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// One example, borrowed from its dataset.
#[derive(Debug, Clone, Copy)]
pub struct LabeledExample<'a> {
    /// Channel-major `channels x height x width` pixels.
    pub image: &'a [f32],
    pub label: usize,
    pub index: usize,
}

/// An immutable dataset. Indices are global: train examples come first,
/// test examples follow at `num_train()..`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub shape: ImageShape,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    /// Whether crop/flip augmentation applies to training batches by default.
    pub default_augment: bool,
    train_images: Vec<f32>,
    train_labels: Vec<usize>,
    test_images: Vec<f32>,
    test_labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        shape: ImageShape,
        num_classes: usize,
        train: (Vec<f32>, Vec<usize>),
        test: (Vec<f32>, Vec<usize>),
    ) -> Result<Self> {
        let (train_images, train_labels) = train;
        let (test_images, test_labels) = test;
        if train_images.len() != train_labels.len() * shape.len()
            || test_images.len() != test_labels.len() * shape.len()
        {
            return Err(Error::Contract(
                "image buffer length does not match label count x image size".into(),
            ));
        }
        if let Some(&bad) = train_labels
            .iter()
            .chain(test_labels.iter())
            .find(|&&l| l >= num_classes)
        {
            return Err(Error::Contract(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            name: name.into(),
            shape,
            num_classes,
            class_names: (0..num_classes).map(|c| c.to_string()).collect(),
            default_augment: false,
            train_images,
            train_labels,
            test_images,
            test_labels,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Self {
        debug_assert_eq!(names.len(), self.num_classes);
        self.class_names = names;
        self
    }

    pub fn with_default_augment(mut self, augment: bool) -> Self {
        self.default_augment = augment;
        self
    }

    pub fn num_train(&self) -> usize {
        self.train_labels.len()
    }

    pub fn num_test(&self) -> usize {
        self.test_labels.len()
    }

    pub fn len(&self) -> usize {
        self.train_labels.len() + self.test_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn label(&self, index: usize) -> usize {
        let n = self.train_labels.len();
        if index < n {
            self.train_labels[index]
        } else {
            self.test_labels[index - n]
        }
    }

    pub fn image(&self, index: usize) -> &[f32] {
        let n = self.train_labels.len();
        let d = self.shape.len();
        if index < n {
            &self.train_images[index * d..(index + 1) * d]
        } else {
            let k = index - n;
            &self.test_images[k * d..(k + 1) * d]
        }
    }

    pub fn example(&self, index: usize) -> LabeledExample<'_> {
        LabeledExample {
            image: self.image(index),
            label: self.label(index),
            index,
        }
    }

    pub fn train_images(&self) -> &[f32] {
        &self.train_images
    }

    pub fn test_images(&self) -> &[f32] {
        &self.test_images
    }

    /// Returns a copy with `normalizer` applied to every image of both splits.
    pub fn normalized(&self, normalizer: &Normalizer) -> Dataset {
        let mut out = self.clone();
        normalizer.apply(&mut out.train_images, self.shape);
        normalizer.apply(&mut out.test_images, self.shape);
        out
    }

    /// Keeps at most `fraction` of each class's training examples (at least
    /// `min_per_class`), chosen deterministically from the front of each class.
    pub fn subsample_train(&self, fraction: f64, min_per_class: usize) -> Dataset {
        if fraction >= 1.0 {
            return self.clone();
        }
        let mut per_class = vec![Vec::new(); self.num_classes];
        for (i, &l) in self.train_labels.iter().enumerate() {
            per_class[l].push(i);
        }
        let mut keep: Vec<usize> = per_class
            .iter()
            .flat_map(|idx| {
                let n = ((idx.len() as f64 * fraction).round() as usize)
                    .max(min_per_class)
                    .min(idx.len());
                idx[..n].to_vec()
            })
            .collect();
        keep.sort_unstable();
        let d = self.shape.len();
        let mut images = Vec::with_capacity(keep.len() * d);
        let mut labels = Vec::with_capacity(keep.len());
        for &i in &keep {
            images.extend_from_slice(&self.train_images[i * d..(i + 1) * d]);
            labels.push(self.train_labels[i]);
        }
        let mut out = self.clone();
        out.train_images = images;
        out.train_labels = labels;
        out
    }
}

impl LabelSource for Dataset {
    fn train_labels(&self) -> &[usize] {
        &self.train_labels
    }

    fn test_labels(&self) -> &[usize] {
        &self.test_labels
    }
}

/// Per-channel affine normalization, fitted once on the base-session
/// training split and frozen afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn fit(dataset: &Dataset, indices: &[usize]) -> Self {
        let shape = dataset.shape;
        let plane = shape.plane();
        let mut sum = vec![0.0f64; shape.channels];
        let mut sq = vec![0.0f64; shape.channels];
        for &i in indices {
            let img = dataset.image(i);
            for c in 0..shape.channels {
                for &v in &img[c * plane..(c + 1) * plane] {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (indices.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| {
                let var = (q / n - m * m).max(0.0);
                if var > 1e-12 {
                    var.sqrt() as f32
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, images: &mut [f32], shape: ImageShape) {
        let plane = shape.plane();
        for img in images.chunks_mut(shape.len()) {
            for c in 0..shape.channels {
                let (m, s) = (self.mean[c], self.std[c]);
                for v in &mut img[c * plane..(c + 1) * plane] {
                    *v = (*v - m) / s;
                }
            }
        }
    }
}
