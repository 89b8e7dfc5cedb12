//! Class-conditional Gaussian images for desk-scale experiments.
//!
//! Each class mean is `separation` times a seeded random unit vector in
//! pixel space; examples add isotropic Gaussian noise of scale `noise`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, ImageShape};
use crate::protocol::LabelSource;
use crate::rng::{rng_for, Rng};
use crate::util::write_atomic;
use crate::{Error, Result};

const CACHE_MAGIC: &[u8; 4] = b"FSYN";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    /// Training examples per class id; must cover every class.
    pub train_per_class: BTreeMap<usize, usize>,
    pub test_per_class: usize,
    pub shape: ImageShape,
    #[serde(default = "default_noise")]
    pub noise: f32,
    #[serde(default = "default_separation")]
    pub separation: f32,
    #[serde(default)]
    pub seed: u64,
}

fn default_noise() -> f32 {
    1.0
}

fn default_separation() -> f32 {
    4.0
}

impl SyntheticConfig {
    pub fn balanced(
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        shape: ImageShape,
        seed: u64,
    ) -> Self {
        Self {
            classes,
            train_per_class: (0..classes).map(|c| (c, train_per_class)).collect(),
            test_per_class,
            shape,
            noise: default_noise(),
            separation: default_separation(),
            seed,
        }
    }
}

/// Class means used by [`make_synthetic`], one row per class.
pub fn synthetic_means(cfg: &SyntheticConfig) -> Vec<Vec<f32>> {
    let d = cfg.shape.len();
    (0..cfg.classes)
        .map(|c| {
            let mut rng = rng_for(cfg.seed, &format!("synthetic/mean/{c}"));
            let v: Vec<f32> = (0..d).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
            v.iter().map(|x| x / norm * cfg.separation).collect()
        })
        .collect()
}

fn draw(means: &[Vec<f32>], class: usize, noise: f32, rng: &mut Rng, out: &mut Vec<f32>) {
    out.extend(
        means[class]
            .iter()
            .map(|m| m + noise * rng.sample::<f32, _>(StandardNormal)),
    );
}

pub fn make_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.classes == 0 || cfg.shape.is_empty() {
        return Err(Error::Validation(
            "synthetic data needs at least one class and a nonempty shape".into(),
        ));
    }
    for c in 0..cfg.classes {
        match cfg.train_per_class.get(&c) {
            Some(&n) if n > 0 => {}
            Some(_) => {
                return Err(Error::Validation(format!(
                    "class {c} has a nonpositive example count"
                )))
            }
            None => {
                return Err(Error::Validation(format!(
                    "train_per_class does not cover class {c}"
                )))
            }
        }
    }
    if let Some(extra) = cfg.train_per_class.keys().find(|&&c| c >= cfg.classes) {
        return Err(Error::Validation(format!(
            "train_per_class names class {extra} outside 0..{}",
            cfg.classes
        )));
    }
    if !(cfg.noise >= 0.0) {
        return Err(Error::Validation("noise must be nonnegative".into()));
    }
    let means = synthetic_means(cfg);
    let mut train = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    for c in 0..cfg.classes {
        let mut rng = rng_for(cfg.seed, &format!("synthetic/train/{c}"));
        for _ in 0..cfg.train_per_class[&c] {
            draw(&means, c, cfg.noise, &mut rng, &mut train.0);
            train.1.push(c);
        }
        let mut rng = rng_for(cfg.seed, &format!("synthetic/test/{c}"));
        for _ in 0..cfg.test_per_class {
            draw(&means, c, cfg.noise, &mut rng, &mut test.0);
            test.1.push(c);
        }
    }
    Dataset::new(
        format!("synthetic-{}", cfg.seed),
        cfg.shape,
        cfg.classes,
        train,
        test,
    )
}

/// Writes a dataset as a single blob: magic, version, shape, seed, class
/// count, split sizes, little-endian u32 labels, then f32 pixels.
pub fn save_synthetic_cache(dataset: &Dataset, seed: u64, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    for dim in [
        dataset.shape.channels,
        dataset.shape.height,
        dataset.shape.width,
    ] {
        buf.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(dataset.num_classes as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.num_train() as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.num_test() as u64).to_le_bytes());
    for &l in dataset.train_labels().iter().chain(dataset.test_labels()) {
        buf.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for &v in dataset.train_images().iter().chain(dataset.test_images()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    write_atomic(path, &buf)
}

/// Reads a blob written by [`save_synthetic_cache`]; returns the dataset and its seed.
pub fn load_synthetic_cache(path: &Path) -> Result<(Dataset, u64)> {
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    let mut r = ByteReader {
        bytes: &bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let shape = ImageShape::new(r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let seed = r.u64()?;
    let classes = r.u32()? as usize;
    let n_train = r.u64()? as usize;
    let n_test = r.u64()? as usize;
    let mut labels = Vec::with_capacity(n_train + n_test);
    for _ in 0..n_train + n_test {
        labels.push(r.u32()? as usize);
    }
    let mut pixels = Vec::with_capacity((n_train + n_test) * shape.len());
    for _ in 0..(n_train + n_test) * shape.len() {
        pixels.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
    }
    if r.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    let test_labels = labels.split_off(n_train);
    let test_pixels = pixels.split_off(n_train * shape.len());
    let ds = Dataset::new(
        format!("synthetic-{seed}"),
        shape,
        classes,
        (pixels, labels),
        (test_pixels, test_labels),
    )?;
    Ok((ds, seed))
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(self.path, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape() -> ImageShape {
        ImageShape::new(1, 4, 4)
    }

    #[test]
    fn zero_noise_nearest_mean_is_perfect() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            ..SyntheticConfig::balanced(10, 20, 5, shape(), 11)
        };
        let ds = make_synthetic(&cfg).unwrap();
        let means = synthetic_means(&cfg);
        let mut correct = 0;
        for i in 0..ds.len() {
            let img = ds.image(i);
            let pred = (0..10)
                .min_by(|&a, &b| {
                    let da: f32 = img.iter().zip(&means[a]).map(|(x, m)| (x - m).powi(2)).sum();
                    let db: f32 = img.iter().zip(&means[b]).map(|(x, m)| (x - m).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += (pred == ds.label(i)) as usize;
        }
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn deterministic_bytes() {
        let cfg = SyntheticConfig::balanced(3, 4, 2, shape(), 5);
        let a = make_synthetic(&cfg).unwrap();
        let b = make_synthetic(&cfg).unwrap();
        let bits = |d: &Dataset| -> Vec<u32> {
            d.train_images().iter().chain(d.test_images()).map(|v| v.to_bits()).collect()
        };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn requested_counts() {
        let cfg = SyntheticConfig {
            train_per_class: [(0, 100), (1, 5)].into_iter().collect(),
            ..SyntheticConfig::balanced(2, 1, 1, shape(), 0)
        };
        let ds = make_synthetic(&cfg).unwrap();
        let n0 = ds.train_labels().iter().filter(|&&l| l == 0).count();
        let n1 = ds.train_labels().iter().filter(|&&l| l == 1).count();
        assert_eq!((n0, n1), (100, 5));
    }

    #[test]
    fn rejects_zero_count() {
        let cfg = SyntheticConfig {
            train_per_class: [(0, 0), (1, 5)].into_iter().collect(),
            ..SyntheticConfig::balanced(2, 1, 1, shape(), 0)
        };
        assert!(matches!(make_synthetic(&cfg), Err(Error::Validation(_))));
    }

    #[test]
    fn cache_round_trip() {
        let cfg = SyntheticConfig::balanced(3, 7, 2, ImageShape::new(3, 2, 2), 9);
        let ds = make_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("syn.bin");
        save_synthetic_cache(&ds, 9, &path).unwrap();
        let (back, seed) = load_synthetic_cache(&path).unwrap();
        assert_eq!(seed, 9);
        assert_eq!(back.train_images(), ds.train_images());
        assert_eq!(back.test_images(), ds.test_images());
        assert_eq!(back.train_labels(), ds.train_labels());
        assert_eq!(back.test_labels(), ds.test_labels());
        assert_eq!(back.shape, ds.shape);

        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_synthetic_cache(&path), Err(Error::CorruptFile { .. })));
    }
}
