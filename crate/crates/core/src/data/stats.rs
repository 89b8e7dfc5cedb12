//! Per-class counts and the head/tail partition.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::protocol::{FscilProtocol, LabelSource, SessionView};

/// How classes are split into head (data-rich) and tail (data-poor).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "rule", content = "threshold")]
pub enum TailRule {
    /// Tail = classes introduced after the base session.
    #[default]
    BySession,
    /// Tail = classes with fewer than `t` training examples.
    ByThreshold(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClassStats {
    pub counts: BTreeMap<usize, usize>,
    pub head_classes: BTreeSet<usize>,
    pub tail_classes: BTreeSet<usize>,
}

impl ClassStats {
    pub fn from_counts(
        counts: BTreeMap<usize, usize>,
        rule: TailRule,
        base_classes: &[usize],
    ) -> Self {
        let mut head = BTreeSet::new();
        let mut tail = BTreeSet::new();
        for (&c, &n) in &counts {
            let is_tail = match rule {
                TailRule::BySession => !base_classes.contains(&c),
                TailRule::ByThreshold(t) => n < t,
            };
            if is_tail {
                tail.insert(c);
            } else {
                head.insert(c);
            }
        }
        Self {
            counts,
            head_classes: head,
            tail_classes: tail,
        }
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts.get(&class).copied().unwrap_or(0)
    }

    pub fn is_tail(&self, class: usize) -> bool {
        self.tail_classes.contains(&class)
    }

    /// Counts in the order of `classes` (classifier row order).
    pub fn counts_for(&self, classes: &[usize]) -> Vec<usize> {
        classes.iter().map(|&c| self.count(c)).collect()
    }
}

/// Counts over the view's training indices. Seen classes without examples
/// are listed with a zero count.
pub fn class_stats(
    source: &dyn LabelSource,
    view: &SessionView,
    protocol: &FscilProtocol,
    rule: TailRule,
) -> ClassStats {
    let labels = source.train_labels();
    let mut counts: BTreeMap<usize, usize> =
        view.seen_classes.iter().map(|&c| (c, 0)).collect();
    for &i in &view.train_indices {
        *counts.entry(labels[i]).or_default() += 1;
    }
    ClassStats::from_counts(counts, rule, &protocol.base_classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::{build_protocol, ProtocolConfig};

    struct Labels(Vec<usize>);

    impl LabelSource for Labels {
        fn train_labels(&self) -> &[usize] {
            &self.0
        }
        fn test_labels(&self) -> &[usize] {
            &[]
        }
    }

    #[test]
    fn by_session_tail_is_incremental_classes() {
        let p = build_protocol(&ProtocolConfig::cifar100()).unwrap();
        let src = Labels((0..100).flat_map(|c| vec![c; 20]).collect());
        let view = p.accumulated_train_set(&src, 8).unwrap();
        let stats = class_stats(&src, &view, &p, TailRule::BySession);
        assert_eq!(stats.tail_classes, (60..100).collect());
        assert_eq!(stats.head_classes, (0..60).collect());
        assert_eq!(stats.count(0), 18);
        assert_eq!(stats.count(99), 5);
    }

    #[test]
    fn threshold_rule() {
        let counts: BTreeMap<usize, usize> = [(0, 450), (1, 5)].into_iter().collect();
        let stats = ClassStats::from_counts(counts, TailRule::ByThreshold(6), &[]);
        assert_eq!(stats.tail_classes, [1].into_iter().collect());
        assert_eq!(stats.head_classes, [0].into_iter().collect());
    }

    #[test]
    fn zero_threshold_has_no_tail() {
        let counts: BTreeMap<usize, usize> = (0..4).map(|c| (c, 10)).collect();
        let stats = ClassStats::from_counts(counts, TailRule::ByThreshold(0), &[]);
        assert!(stats.tail_classes.is_empty());
        assert_eq!(stats.head_classes.len(), 4);
    }

    #[test]
    fn empty_view_gives_empty_stats() {
        let p = build_protocol(&ProtocolConfig::cifar100()).unwrap();
        let view = SessionView {
            session_index: 0,
            seen_classes: vec![],
            train_indices: vec![],
            val_indices: vec![],
        };
        let stats = class_stats(&Labels(vec![]), &view, &p, TailRule::BySession);
        assert!(stats.counts.is_empty());
    }
}
