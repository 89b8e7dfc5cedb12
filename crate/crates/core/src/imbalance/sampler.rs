//! Class-aware index samplers.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand::seq::SliceRandom;

use crate::rng::Rng;
use crate::{Error, Result};

/// Samples a class with probability proportional to `1 / n_c`, then an
/// example of that class uniformly. Feeds the CMO foreground.
#[derive(Debug, Clone)]
pub struct InverseFrequencySampler {
    classes: Vec<usize>,
    members: Vec<Vec<usize>>,
    cumulative: Vec<f64>,
}

impl InverseFrequencySampler {
    /// `by_class` maps class id to its training indices; empty classes are
    /// skipped.
    pub fn new(by_class: &BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let mut classes = Vec::new();
        let mut members = Vec::new();
        let mut cumulative = Vec::new();
        let mut acc = 0.0;
        for (&c, idx) in by_class {
            if idx.is_empty() {
                continue;
            }
            acc += 1.0 / idx.len() as f64;
            classes.push(c);
            members.push(idx.clone());
            cumulative.push(acc);
        }
        if classes.is_empty() {
            return Err(Error::Validation("sampler needs at least one nonempty class".into()));
        }
        Ok(Self {
            classes,
            members,
            cumulative,
        })
    }

    /// Probability of drawing each class, in ascending class order.
    pub fn class_probabilities(&self) -> Vec<(usize, f64)> {
        let total = *self.cumulative.last().unwrap();
        let mut prev = 0.0;
        self.classes
            .iter()
            .zip(&self.cumulative)
            .map(|(&c, &cum)| {
                let p = (cum - prev) / total;
                prev = cum;
                (c, p)
            })
            .collect()
    }

    pub fn sample(&self, rng: &mut Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let u = rng.random::<f64>() * total;
        let k = self
            .cumulative
            .partition_point(|&c| c <= u)
            .min(self.classes.len() - 1);
        let m = &self.members[k];
        m[rng.random_range(0..m.len())]
    }

    pub fn sample_batch(&self, n: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n).map(|_| self.sample(rng)).collect()
    }
}

/// Class-balanced sampling: every cycle visits each nonempty class once in
/// a fresh random order and picks one of its examples uniformly.
#[derive(Debug, Clone)]
pub struct BalancedBatchSampler {
    members: Vec<Vec<usize>>,
    order: Vec<usize>,
    pos: usize,
}

impl BalancedBatchSampler {
    pub fn new(by_class: &BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let mut members = Vec::new();
        for (&c, idx) in by_class {
            if idx.is_empty() {
                log::warn!("balanced sampler: class {c} has no training examples, excluded");
                continue;
            }
            members.push(idx.clone());
        }
        if members.is_empty() {
            return Err(Error::Validation("sampler needs at least one nonempty class".into()));
        }
        Ok(Self {
            order: Vec::new(),
            pos: 0,
            members,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    pub fn next_index(&mut self, rng: &mut Rng) -> usize {
        if self.pos == self.order.len() {
            self.order = (0..self.members.len()).collect();
            self.order.shuffle(rng);
            self.pos = 0;
        }
        let m = &self.members[self.order[self.pos]];
        self.pos += 1;
        m[rng.random_range(0..m.len())]
    }

    /// `n` draws, e.g. one epoch's worth of indices.
    pub fn draw(&mut self, n: usize, rng: &mut Rng) -> Vec<usize> {
        (0..n).map(|_| self.next_index(rng)).collect()
    }
}
