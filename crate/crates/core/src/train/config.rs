use serde::{Deserialize, Serialize};

use crate::data::TailRule;
use crate::imbalance::{ImbalancePlugin, PluginSet};
use crate::model::HeadKind;
use crate::nn::Architecture;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Retrain from scratch on all data seen so far, plain cross-entropy.
    JointStandard,
    /// Joint retraining with imbalance plugins.
    JointImbalance,
    /// Train on the base session, then append prototype rows with the
    /// backbone frozen.
    IncrPrototype,
    /// Train on the base session, then fine-tune everything on each
    /// session's few shots.
    IncrFinetune,
}

impl Strategy {
    pub fn is_joint(self) -> bool {
        matches!(self, Strategy::JointStandard | Strategy::JointImbalance)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::JointStandard => "joint_standard",
            Strategy::JointImbalance => "joint_imbalance",
            Strategy::IncrPrototype => "incr_prototype",
            Strategy::IncrFinetune => "incr_finetune",
        }
    }
}

/// Step decay: `lr = initial * gamma^(number of milestones already passed)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f32,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f32,
}

fn default_gamma() -> f32 {
    0.1
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.1,
            milestones: Vec::new(),
            gamma: 0.1,
        }
    }
}

impl LrSchedule {
    /// Rate used during 1-based `epoch`.
    pub fn at(&self, epoch: usize) -> f32 {
        let passed = self.milestones.iter().filter(|&&m| m < epoch).count();
        self.initial * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    /// Multiplier on the base learning rate.
    pub lr_scale: f32,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr_scale: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub arch: Architecture,
    /// Defaults to a linear head, or cosine for the prototype baseline.
    #[serde(default)]
    pub head: Option<HeadKind>,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub lr: LrSchedule,
    #[serde(default = "default_momentum")]
    pub momentum: f32,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f32,
    #[serde(default)]
    pub plugins: Vec<ImbalancePlugin>,
    #[serde(default)]
    pub tail_rule: TailRule,
    pub seed: u64,
    /// Epochs (1-based) after which a checkpoint is written and evaluated.
    #[serde(default)]
    pub checkpoint_epochs: Vec<usize>,
    /// Crop/flip augmentation; `None` follows the dataset default.
    #[serde(default)]
    pub augment: Option<bool>,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_momentum() -> f32 {
    0.9
}

fn default_weight_decay() -> f32 {
    5e-4
}

fn default_eval_batch() -> usize {
    256
}

impl TrainConfig {
    pub fn new(strategy: Strategy, arch: Architecture, epochs: usize, seed: u64) -> Self {
        Self {
            strategy,
            arch,
            head: None,
            epochs,
            batch_size: 64,
            lr: LrSchedule::default(),
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            plugins: Vec::new(),
            tail_rule: TailRule::default(),
            seed,
            checkpoint_epochs: Vec::new(),
            augment: None,
            finetune: FinetuneConfig::default(),
            eval_batch: default_eval_batch(),
        }
    }

    pub fn head_kind(&self) -> HeadKind {
        self.head.unwrap_or(match self.strategy {
            Strategy::IncrPrototype => HeadKind::cosine(),
            _ => HeadKind::linear(),
        })
    }

    pub fn plugin_set(&self) -> Result<PluginSet> {
        PluginSet::from_plugins(self.plugins.clone())
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.lr.initial >= 0.0 && self.lr.initial.is_finite()) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr.initial)));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight decay be nonnegative".into(),
            ));
        }
        if self.checkpoint_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(
                "checkpoint_epochs must be strictly ascending".into(),
            ));
        }
        if let Some(&e) = self
            .checkpoint_epochs
            .iter()
            .find(|&&e| e == 0 || e > self.epochs)
        {
            return Err(Error::Config(format!(
                "checkpoint epoch {e} outside 1..={}",
                self.epochs
            )));
        }
        let plugins = self.plugin_set()?;
        match self.strategy {
            Strategy::JointImbalance => {}
            Strategy::JointStandard if !plugins.is_empty() => {
                return Err(Error::Config(format!(
                    "joint_standard takes no imbalance plugins (got {}); use joint_imbalance",
                    plugins.label()
                )));
            }
            Strategy::IncrPrototype | Strategy::IncrFinetune if !plugins.is_empty() => {
                return Err(Error::Config(format!(
                    "imbalance plugins are only valid for joint strategies, not {}",
                    self.strategy.name()
                )));
            }
            _ => {}
        }
        if self.strategy == Strategy::IncrPrototype && !self.head_kind().is_cosine() {
            return Err(Error::Config("incr_prototype needs a cosine head".into()));
        }
        if self.strategy == Strategy::IncrFinetune && self.finetune.epochs == 0 {
            return Err(Error::Config("finetune.epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imbalance::Technique;

    fn cfg(strategy: Strategy) -> TrainConfig {
        TrainConfig::new(strategy, Architecture::res_mlp(8, 1), 5, 0)
    }

    #[test]
    fn step_schedule() {
        let s = LrSchedule {
            initial: 1.0,
            milestones: vec![2, 4],
            gamma: 0.5,
        };
        let lrs: Vec<f32> = (1..=5).map(|e| s.at(e)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn checkpoint_schedule_bounds() {
        let mut c = cfg(Strategy::JointStandard);
        c.checkpoint_epochs = vec![2, 4];
        c.validate().unwrap();
        c.checkpoint_epochs = vec![0];
        assert!(c.validate().is_err());
        c.checkpoint_epochs = vec![6];
        assert!(c.validate().is_err());
        c.checkpoint_epochs = vec![3, 2];
        assert!(c.validate().is_err());
    }

    #[test]
    fn plugins_need_joint_imbalance() {
        let mut c = cfg(Strategy::JointStandard);
        c.plugins = vec![ImbalancePlugin::new(Technique::Cmo)];
        assert!(c.validate().is_err());
        c.strategy = Strategy::IncrFinetune;
        assert!(c.validate().is_err());
        c.strategy = Strategy::JointImbalance;
        c.validate().unwrap();
        c.plugins.push(ImbalancePlugin::new(Technique::BalancedSampler));
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn prototype_defaults_to_cosine() {
        let mut c = cfg(Strategy::IncrPrototype);
        assert!(c.head_kind().is_cosine());
        c.validate().unwrap();
        c.head = Some(HeadKind::linear());
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_epochs_rejected() {
        let mut c = cfg(Strategy::JointStandard);
        c.epochs = 0;
        assert!(c.validate().is_err());
    }
}
