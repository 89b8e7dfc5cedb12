//! Imbalance-handling plugins grouped into three categories: resampling,
//! reweighting and optimizer. At most one technique per category is active.

mod cmo;
mod imbsam;
mod loss;
mod sampler;

pub use cmo::{cmo_mix, cut_box, mix_with, paste_box, CutBox, MixedBatch};
pub use imbsam::{imbsam_step, plain_step, SplitObjective, StepInfo};
pub use loss::{
    balanced_softmax_loss, class_balanced_raw, class_balanced_weights, cross_entropy, LossFn,
    LossOutput, LossSpec, Targets,
};
pub use sampler::{BalancedBatchSampler, InverseFrequencySampler};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Resampling,
    Reweighting,
    Optimizer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Technique {
    Cmo,
    BalancedSampler,
    BalancedSoftmax,
    ClassBalanced,
    Imbsam,
}

/// One tunable hyperparameter with its default and admissible range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperParam {
    pub name: &'static str,
    pub default: f64,
    pub min: f64,
    pub max: f64,
    pub integer: bool,
}

const fn hp(name: &'static str, default: f64, min: f64, max: f64) -> HyperParam {
    HyperParam {
        name,
        default,
        min,
        max,
        integer: false,
    }
}

impl Technique {
    pub const ALL: [Technique; 5] = [
        Technique::Cmo,
        Technique::BalancedSampler,
        Technique::BalancedSoftmax,
        Technique::ClassBalanced,
        Technique::Imbsam,
    ];

    pub fn category(self) -> Category {
        match self {
            Technique::Cmo | Technique::BalancedSampler => Category::Resampling,
            Technique::BalancedSoftmax | Technique::ClassBalanced => Category::Reweighting,
            Technique::Imbsam => Category::Optimizer,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Technique::Cmo => "cmo",
            Technique::BalancedSampler => "balanced_sampler",
            Technique::BalancedSoftmax => "balanced_softmax",
            Technique::ClassBalanced => "class_balanced",
            Technique::Imbsam => "imbsam",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown imbalance technique {name:?}")))
    }

    pub fn schema(self) -> Vec<HyperParam> {
        match self {
            Technique::Cmo => vec![
                hp("beta", 1.0, 0.05, 10.0),
                hp("prob", 0.5, 0.0, 1.0),
                HyperParam {
                    integer: true,
                    ..hp("cooldown_epochs", 3.0, 0.0, 1000.0)
                },
            ],
            Technique::BalancedSampler | Technique::BalancedSoftmax => Vec::new(),
            Technique::ClassBalanced => vec![hp("beta", 0.999, 0.0, 0.999_999)],
            Technique::Imbsam => vec![hp("rho", 0.05, 0.0, 10.0)],
        }
    }
}

impl fmt::Display for Technique {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A configured technique. Missing hyperparameters take schema defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImbalancePlugin {
    pub technique: Technique,
    #[serde(default)]
    pub hyperparams: BTreeMap<String, f64>,
}

impl ImbalancePlugin {
    pub fn new(technique: Technique) -> Self {
        Self {
            technique,
            hyperparams: BTreeMap::new(),
        }
    }

    pub fn with(mut self, name: &str, value: f64) -> Self {
        self.hyperparams.insert(name.to_string(), value);
        self
    }

    pub fn category(&self) -> Category {
        self.technique.category()
    }

    pub fn validate(&self) -> Result<()> {
        let schema = self.technique.schema();
        for (k, &v) in &self.hyperparams {
            let Some(h) = schema.iter().find(|h| h.name == k) else {
                return Err(Error::Config(format!(
                    "{} has no hyperparameter {k:?}",
                    self.technique
                )));
            };
            if !(h.min..=h.max).contains(&v) || (h.integer && v.fract() != 0.0) {
                return Err(Error::Config(format!(
                    "{}.{k} = {v} outside [{}, {}]",
                    self.technique, h.min, h.max
                )));
            }
        }
        Ok(())
    }

    /// Value of `name`, falling back to the schema default.
    pub fn get(&self, name: &str) -> f64 {
        if let Some(&v) = self.hyperparams.get(name) {
            return v;
        }
        self.technique
            .schema()
            .iter()
            .find(|h| h.name == name)
            .map(|h| h.default)
            .unwrap_or_else(|| panic!("{} has no hyperparameter {name}", self.technique))
    }
}

/// The active plugins, at most one per category.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PluginSet {
    pub resampling: Option<ImbalancePlugin>,
    pub reweighting: Option<ImbalancePlugin>,
    pub optimizer: Option<ImbalancePlugin>,
}

impl PluginSet {
    pub fn from_plugins(plugins: Vec<ImbalancePlugin>) -> Result<Self> {
        let mut set = PluginSet::default();
        for p in plugins {
            p.validate()?;
            let slot = match p.category() {
                Category::Resampling => &mut set.resampling,
                Category::Reweighting => &mut set.reweighting,
                Category::Optimizer => &mut set.optimizer,
            };
            if let Some(prev) = slot {
                return Err(Error::Config(format!(
                    "{} and {} are both {:?} techniques; pick one",
                    prev.technique,
                    p.technique,
                    p.category()
                )));
            }
            *slot = Some(p);
        }
        Ok(set)
    }

    pub fn plugins(&self) -> impl Iterator<Item = &ImbalancePlugin> {
        [&self.resampling, &self.reweighting, &self.optimizer]
            .into_iter()
            .flatten()
    }

    pub fn has(&self, t: Technique) -> bool {
        self.plugins().any(|p| p.technique == t)
    }

    pub fn get(&self, t: Technique) -> Option<&ImbalancePlugin> {
        self.plugins().find(|p| p.technique == t)
    }

    pub fn is_empty(&self) -> bool {
        self.plugins().next().is_none()
    }

    /// The loss selected by the reweighting slot.
    pub fn loss_spec(&self) -> LossSpec {
        match &self.reweighting {
            Some(p) if p.technique == Technique::BalancedSoftmax => LossSpec::BalancedSoftmax,
            Some(p) if p.technique == Technique::ClassBalanced => LossSpec::ClassBalanced {
                beta: p.get("beta"),
            },
            _ => LossSpec::CrossEntropy,
        }
    }

    /// Short label such as `cmo+balanced_softmax`.
    pub fn label(&self) -> String {
        let names: Vec<&str> = self.plugins().map(|p| p.technique.name()).collect();
        if names.is_empty() {
            "none".into()
        } else {
            names.join("+")
        }
    }
}
