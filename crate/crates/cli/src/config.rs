//! Experiment config file (TOML).
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/imb_joint"
//!
//! [dataset]
//! kind = "synthetic"
//! classes = 10
//! train_per_class = 200
//! test_per_class = 100
//! shape = { channels = 1, height = 8, width = 8 }
//!
//! [protocol]
//! total_classes = 10
//! base_classes = 6
//! ways = 2
//! sessions = 2
//!
//! [train]
//! strategy = "joint_imbalance"
//! arch = { kind = "res_mlp", hidden = 64, blocks = 2 }
//! epochs = 30
//! batch_size = 64
//! plugins = [{ technique = "cmo" }, { technique = "balanced_softmax" }]
//! ```
//!
//! The top-level `seed` is the only required seed. Blocks that take a seed
//! (`protocol`, `train`, synthetic and image-folder datasets, `search`) get
//! one derived from it unless they set their own. Unknown keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fscil_core::data::{
    load_cifar100, load_image_folder, make_synthetic, Dataset, ImageFolderOptions, ImageShape,
    SyntheticConfig,
};
use fscil_core::imbalance::Technique;
use fscil_core::protocol::{build_protocol, FscilProtocol, ProtocolConfig};
use fscil_core::rng::derive_seed;
use fscil_core::search::{Dist, SearchSpace, SelectMetric};
use fscil_core::train::TrainConfig;
use fscil_core::util::sha256_hex;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Overrides the base directory of relative `output_dir` values.
pub const OUTPUT_ROOT_ENV: &str = "FSCIL_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search: Option<SearchConfig>,
    #[serde(default)]
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        classes: usize,
        train_per_class: usize,
        test_per_class: usize,
        shape: ImageShape,
        #[serde(default = "default_noise")]
        noise: f32,
        #[serde(default = "default_separation")]
        separation: f32,
        seed: u64,
    },
    Cifar100 {
        root: PathBuf,
    },
    ImageFolder {
        root: PathBuf,
        #[serde(default = "default_side")]
        height: usize,
        #[serde(default = "default_side")]
        width: usize,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
        /// Class directory names in label order; sorted names otherwise.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<Vec<String>>,
        seed: u64,
    },
}

fn default_noise() -> f32 {
    1.0
}

fn default_separation() -> f32 {
    4.0
}

fn default_side() -> usize {
    32
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    /// One independent search per technique.
    pub techniques: Vec<Technique>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub metric: SelectMetric,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Desk-scale reduction of epochs and training data, in (0, 1].
    #[serde(default = "default_scale")]
    pub scale: f64,
    /// Fewest training examples a class keeps when scaled down; defaults to
    /// twice the shot count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_per_class: Option<usize>,
    /// Replacement search spaces keyed by technique name.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub spaces: BTreeMap<String, BTreeMap<String, Dist>>,
    pub seed: u64,
}

fn default_trials() -> usize {
    30
}

fn default_top_k() -> usize {
    5
}

fn default_workers() -> usize {
    1
}

fn default_scale() -> f64 {
    1.0
}

impl SearchConfig {
    pub fn space(&self, technique: Technique) -> SearchSpace {
        match self.spaces.get(technique.name()) {
            Some(params) => SearchSpace {
                technique,
                params: params.clone(),
            },
            None => SearchSpace::default_for(technique),
        }
    }

    pub fn min_per_class(&self, protocol: &ProtocolConfig) -> usize {
        self.min_per_class.unwrap_or(2 * protocol.shots.max(1))
    }
}

/// Which report artifacts to emit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    #[serde(default = "yes")]
    pub table: bool,
    #[serde(default = "yes")]
    pub curves: bool,
    #[serde(default = "yes")]
    pub confusion: bool,
    /// Needs the final checkpoints and the dataset of every run.
    #[serde(default)]
    pub cka: bool,
}

fn yes() -> bool {
    true
}

impl Default for ReportConfig {
    fn default() -> Self {
        Self {
            table: true,
            curves: true,
            confusion: true,
            cka: false,
        }
    }
}

/// Seed for a block that did not set one. Kept below 2^63 so it survives a
/// TOML round trip.
pub fn block_seed(master: u64, purpose: &str) -> u64 {
    derive_seed(master, purpose) >> 1
}

fn fill_seed(table: &mut toml::Table, block: &str, master: u64) {
    if let Some(toml::Value::Table(t)) = table.get_mut(block) {
        let wants_seed = block != "dataset"
            || matches!(
                t.get("kind").and_then(|k| k.as_str()),
                Some("synthetic" | "image_folder")
            );
        if wants_seed && !t.contains_key("seed") {
            t.insert(
                "seed".into(),
                toml::Value::Integer(block_seed(master, block) as i64),
            );
        }
    }
}

pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    let master = match table.get("seed") {
        Some(toml::Value::Integer(s)) if *s >= 0 => *s as u64,
        Some(other) => {
            return Err(CliError::Config(format!(
                "seed must be a nonnegative integer, got {other}"
            )))
        }
        None => return Err(CliError::Config("missing top-level seed".into())),
    };
    for block in ["dataset", "protocol", "train", "search"] {
        fill_seed(&mut table, block, master);
    }
    let cfg: ExperimentConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text).map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn render_config(cfg: &ExperimentConfig) -> CliResult<String> {
    toml::to_string_pretty(cfg).map_err(|e| CliError::Config(e.to_string()))
}

impl ExperimentConfig {
    /// Schema-level checks; paths are checked when a command needs them.
    pub fn validate(&self) -> CliResult<()> {
        build_protocol(&self.protocol)?;
        self.train.validate()?;
        match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                ..
            } => {
                if *classes != self.protocol.total_classes {
                    return Err(CliError::Config(format!(
                        "dataset has {classes} classes but the protocol expects {}",
                        self.protocol.total_classes
                    )));
                }
                if *train_per_class == 0 || *test_per_class == 0 {
                    return Err(CliError::Config(
                        "synthetic datasets need train and test examples".into(),
                    ));
                }
            }
            DatasetConfig::ImageFolder {
                test_fraction,
                height,
                width,
                ..
            } => {
                if !(0.0..1.0).contains(test_fraction) || *height == 0 || *width == 0 {
                    return Err(CliError::Config(
                        "image folder needs test_fraction in [0, 1) and a nonzero size".into(),
                    ));
                }
            }
            DatasetConfig::Cifar100 { .. } => {}
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(CliError::Config("output_dir is empty".into()));
        }
        if let Some(s) = &self.search {
            s.validate()?;
        }
        Ok(())
    }

    /// Errors when a referenced input path is missing or the output
    /// location cannot be a directory.
    pub fn check_paths(&self, output: &Path) -> CliResult<()> {
        match &self.dataset {
            DatasetConfig::Cifar100 { root } | DatasetConfig::ImageFolder { root, .. } => {
                if !root.is_dir() {
                    return Err(CliError::Config(format!(
                        "dataset root {} is not a directory",
                        root.display()
                    )));
                }
            }
            DatasetConfig::Synthetic { .. } => {}
        }
        let mut p = Some(output);
        while let Some(dir) = p {
            if dir.exists() {
                if !dir.is_dir() {
                    return Err(CliError::Config(format!(
                        "output {} is blocked by a file at {}",
                        output.display(),
                        dir.display()
                    )));
                }
                break;
            }
            p = dir.parent();
        }
        Ok(())
    }

    /// Hash of the rendered config.
    pub fn hash(&self) -> CliResult<String> {
        Ok(sha256_hex(render_config(self)?.as_bytes()))
    }

    pub fn build_protocol(&self) -> CliResult<FscilProtocol> {
        Ok(build_protocol(&self.protocol)?)
    }

    pub fn load_dataset(&self) -> CliResult<Dataset> {
        let ds = match &self.dataset {
            DatasetConfig::Synthetic {
                classes,
                train_per_class,
                test_per_class,
                shape,
                noise,
                separation,
                seed,
            } => {
                let mut cfg =
                    SyntheticConfig::balanced(*classes, *train_per_class, *test_per_class, *shape, *seed);
                cfg.noise = *noise;
                cfg.separation = *separation;
                make_synthetic(&cfg)?
            }
            DatasetConfig::Cifar100 { root } => load_cifar100(root)?,
            DatasetConfig::ImageFolder {
                root,
                height,
                width,
                test_fraction,
                classes,
                seed,
            } => load_image_folder(
                root,
                classes.as_deref(),
                &ImageFolderOptions {
                    height: *height,
                    width: *width,
                    test_fraction: *test_fraction,
                    seed: *seed,
                },
            )?,
        };
        Ok(ds)
    }

    /// Where outputs go when `--output` is not given.
    pub fn resolved_output(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }
}

/// Joins relative `dir` onto the output-root override when it is set.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

impl SearchConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.techniques.is_empty() {
            return Err(CliError::Config("search.techniques is empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.techniques {
            if !seen.insert(*t) {
                return Err(CliError::Config(format!("{t} is listed twice in search.techniques")));
            }
        }
        if self.trials == 0 || self.top_k == 0 || self.workers == 0 {
            return Err(CliError::Config(
                "search.trials, top_k and workers must be at least 1".into(),
            ));
        }
        if !(self.scale > 0.0 && self.scale <= 1.0) {
            return Err(CliError::Config(format!(
                "search.scale must lie in (0, 1], got {}",
                self.scale
            )));
        }
        for name in self.spaces.keys() {
            let t = Technique::parse(name)?;
            if !self.techniques.contains(&t) {
                return Err(CliError::Config(format!(
                    "search.spaces.{name} is given but {name} is not searched"
                )));
            }
        }
        for t in &self.techniques {
            self.space(*t).validate()?;
        }
        Ok(())
    }
}
