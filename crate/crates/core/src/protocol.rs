//! Session structure of a few-shot class-incremental benchmark and the
//! leakage-free views that trainers are allowed to see.
//!
//! Example indices are global over a source: `0..num_train` address the
//! training split and `num_train..num_train + num_test` the test split, so a
//! test index can never be confused with a training index.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::rng_for;
use crate::util::sha256_hex;
use crate::{Error, Result};

/// How class ids are assigned to sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClassOrdering {
    /// Base classes are `0..base`, then sessions take consecutive ids.
    #[default]
    Ascending,
    /// Class ids are shuffled with the protocol seed before assignment.
    Permuted,
}

/// Amount of training data an incremental session exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum IncrementalData {
    /// `shots_per_class` examples per new class.
    #[default]
    FewShot,
    /// Every training example of the new classes (the balanced CIL reference).
    Full,
}

/// Declarative protocol description, as read from an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    pub total_classes: usize,
    pub base_classes: usize,
    pub ways: usize,
    pub sessions: usize,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ordering: ClassOrdering,
    #[serde(default)]
    pub incremental_data: IncrementalData,
}

fn default_shots() -> usize {
    5
}

fn default_val_fraction() -> f64 {
    0.1
}

impl ProtocolConfig {
    /// 60 base classes followed by 8 sessions of 5 classes, 5 shots.
    pub fn cifar100() -> Self {
        Self {
            total_classes: 100,
            base_classes: 60,
            ways: 5,
            sessions: 8,
            shots: 5,
            val_fraction: 0.1,
            seed: 0,
            ordering: ClassOrdering::Ascending,
            incremental_data: IncrementalData::FewShot,
        }
    }

    /// Same split constants as CIFAR-100.
    pub fn mini_imagenet() -> Self {
        Self::cifar100()
    }

    /// 100 base classes followed by 10 sessions of 10 classes, 5 shots.
    pub fn cub200() -> Self {
        Self {
            total_classes: 200,
            base_classes: 100,
            ways: 10,
            sessions: 10,
            ..Self::cifar100()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FscilProtocol {
    pub total_classes: usize,
    pub base_classes: Vec<usize>,
    pub sessions: Vec<Vec<usize>>,
    pub shots_per_class: usize,
    pub val_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub incremental_data: IncrementalData,
}

pub fn build_protocol(config: &ProtocolConfig) -> Result<FscilProtocol> {
    let expected = config.base_classes + config.ways * config.sessions;
    if expected != config.total_classes {
        return Err(Error::Validation(format!(
            "class counts do not add up: base {} + ways {} x sessions {} = {} but total_classes = {}",
            config.base_classes, config.ways, config.sessions, expected, config.total_classes
        )));
    }
    if config.sessions > 0 && config.ways == 0 {
        return Err(Error::Validation(
            "incremental sessions need ways >= 1".into(),
        ));
    }
    let mut order: Vec<usize> = (0..config.total_classes).collect();
    if config.ordering == ClassOrdering::Permuted {
        order.shuffle(&mut rng_for(config.seed, "protocol/class-order"));
    }
    let base_classes = order[..config.base_classes].to_vec();
    let sessions = order[config.base_classes..]
        .chunks(config.ways.max(1))
        .map(<[usize]>::to_vec)
        .collect();
    let protocol = FscilProtocol {
        total_classes: config.total_classes,
        base_classes,
        sessions,
        shots_per_class: config.shots,
        val_fraction: config.val_fraction,
        seed: config.seed,
        incremental_data: config.incremental_data,
    };
    protocol.validate()?;
    Ok(protocol)
}

/// Read access to the labels of a dataset, in global index space.
pub trait LabelSource {
    fn train_labels(&self) -> &[usize];
    fn test_labels(&self) -> &[usize];

    fn num_train(&self) -> usize {
        self.train_labels().len()
    }

    fn is_test_index(&self, index: usize) -> bool {
        index >= self.num_train() && index < self.num_train() + self.test_labels().len()
    }
}

/// Indices visible at one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_index: usize,
    pub seen_classes: Vec<usize>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

impl FscilProtocol {
    pub fn validate(&self) -> Result<()> {
        if self.shots_per_class == 0 {
            return Err(Error::Validation("shots_per_class must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Validation(format!(
                "val_fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        let ways = self.sessions.first().map(Vec::len);
        let mut seen = BTreeSet::new();
        for (i, session) in std::iter::once(&self.base_classes)
            .chain(self.sessions.iter())
            .enumerate()
        {
            if i > 0 {
                if session.is_empty() {
                    return Err(Error::Validation(format!("session {i} is empty")));
                }
                if Some(session.len()) != ways {
                    return Err(Error::Validation(format!(
                        "session {i} has {} classes, expected {}",
                        session.len(),
                        ways.unwrap_or(0)
                    )));
                }
            }
            for &c in session {
                if c >= self.total_classes {
                    return Err(Error::Validation(format!(
                        "class id {c} in session {i} is outside 0..{}",
                        self.total_classes
                    )));
                }
                if !seen.insert(c) {
                    return Err(Error::Validation(format!(
                        "class id {c} appears in more than one session"
                    )));
                }
            }
        }
        if seen.len() != self.total_classes {
            return Err(Error::Validation(format!(
                "sessions cover {} classes but total_classes = {}",
                seen.len(),
                self.total_classes
            )));
        }
        Ok(())
    }

    /// Number of sessions including the base session.
    pub fn num_sessions(&self) -> usize {
        self.sessions.len() + 1
    }

    pub fn ways(&self) -> usize {
        self.sessions.first().map_or(0, Vec::len)
    }

    /// Classes introduced at session `i` (the base classes for `i = 0`).
    pub fn session_classes(&self, i: usize) -> &[usize] {
        if i == 0 {
            &self.base_classes
        } else {
            &self.sessions[i - 1]
        }
    }

    /// Base classes followed by every incremental session up to `i`.
    pub fn seen_classes(&self, i: usize) -> Vec<usize> {
        (0..=i.min(self.sessions.len()))
            .flat_map(|s| self.session_classes(s).iter().copied())
            .collect()
    }

    pub fn is_base_class(&self, class: usize) -> bool {
        self.base_classes.contains(&class)
    }

    fn check_session(&self, i: usize) -> Result<()> {
        if i > self.sessions.len() {
            return Err(Error::Contract(format!(
                "session index {i} out of range 0..={}",
                self.sessions.len()
            )));
        }
        Ok(())
    }

    /// Stable content hash; run directories refuse to mix protocols.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("protocol serializes");
        sha256_hex(&json)[..16].to_string()
    }

    /// Human-readable listing of every class id per session.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# protocol {}", self.hash());
        let _ = writeln!(out, "total_classes = {}", self.total_classes);
        let _ = writeln!(out, "shots_per_class = {}", self.shots_per_class);
        let _ = writeln!(out, "val_fraction = {}", self.val_fraction);
        let _ = writeln!(out, "seed = {}", self.seed);
        for i in 0..self.num_sessions() {
            let ids: Vec<String> = self
                .session_classes(i)
                .iter()
                .map(ToString::to_string)
                .collect();
            let _ = writeln!(out, "session {i}: {}", ids.join(" "));
        }
        out
    }

    /// Materializes session `i` against `source`.
    ///
    /// Session 0 splits every base class into train/val with a per-class
    /// seeded shuffle. Incremental sessions take the first
    /// `shots_per_class` indices of a per-class seeded shuffle.
    pub fn session_view(&self, source: &dyn LabelSource, i: usize) -> Result<SessionView> {
        self.check_session(i)?;
        let by_class = train_indices_by_class(source);
        let mut train = Vec::new();
        let mut val = Vec::new();
        if i == 0 {
            for &c in &self.base_classes {
                let mut idx = class_indices(&by_class, c);
                if idx.is_empty() {
                    return Err(Error::InsufficientData {
                        class: c,
                        needed: 1,
                        available: 0,
                    });
                }
                idx.shuffle(&mut rng_for(self.seed, &format!("protocol/val-split/{c}")));
                let n_val = (idx.len() as f64 * self.val_fraction).round() as usize;
                let n_val = n_val.min(idx.len() - 1);
                val.extend_from_slice(&idx[..n_val]);
                train.extend_from_slice(&idx[n_val..]);
            }
        } else {
            for &c in self.session_classes(i) {
                let mut idx = class_indices(&by_class, c);
                match self.incremental_data {
                    IncrementalData::FewShot => {
                        if idx.len() < self.shots_per_class {
                            return Err(Error::InsufficientData {
                                class: c,
                                needed: self.shots_per_class,
                                available: idx.len(),
                            });
                        }
                        idx.shuffle(&mut rng_for(self.seed, &format!("protocol/shots/{c}")));
                        train.extend_from_slice(&idx[..self.shots_per_class]);
                    }
                    IncrementalData::Full => {
                        if idx.is_empty() {
                            return Err(Error::InsufficientData {
                                class: c,
                                needed: 1,
                                available: 0,
                            });
                        }
                        train.extend_from_slice(&idx);
                    }
                }
            }
        }
        train.sort_unstable();
        val.sort_unstable();
        Ok(SessionView {
            session_index: i,
            seen_classes: self.seen_classes(i),
            train_indices: train,
            val_indices: val,
        })
    }

    /// Union of the training indices of sessions `0..=i` (joint training data).
    /// Validation indices are those of the base session.
    pub fn accumulated_train_set(&self, source: &dyn LabelSource, i: usize) -> Result<SessionView> {
        self.check_session(i)?;
        let base = self.session_view(source, 0)?;
        let mut train = base.train_indices;
        for s in 1..=i {
            train.extend(self.session_view(source, s)?.train_indices);
        }
        train.sort_unstable();
        Ok(SessionView {
            session_index: i,
            seen_classes: self.seen_classes(i),
            train_indices: train,
            val_indices: base.val_indices,
        })
    }

    /// Cumulative test set of session `i`: test examples of every seen class.
    /// Only evaluators call this.
    pub fn test_indices(&self, source: &dyn LabelSource, i: usize) -> Result<Vec<usize>> {
        self.check_session(i)?;
        let seen: BTreeSet<usize> = self.seen_classes(i).into_iter().collect();
        let offset = source.num_train();
        Ok(source
            .test_labels()
            .iter()
            .enumerate()
            .filter(|(_, l)| seen.contains(l))
            .map(|(k, _)| offset + k)
            .collect())
    }
}

fn train_indices_by_class(source: &dyn LabelSource) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, &label) in source.train_labels().iter().enumerate() {
        map.entry(label).or_default().push(idx);
    }
    map
}

fn class_indices(map: &BTreeMap<usize, Vec<usize>>, class: usize) -> Vec<usize> {
    map.get(&class).cloned().unwrap_or_default()
}
