//! Session evaluation: confusion matrices, accuracies, gAcc, FP/FN rates
//! and linear CKA.
//!
//! Accuracies are micro averages over test examples unless stated
//! otherwise. Quantities that are undefined (incremental accuracy at the
//! base session, CKA of constant features) are `None` and serialize as
//! `null`.

mod cka;

pub use cka::{cka_session_grid, cka_subsample, linear_cka, CkaMatrix, CKA_SUBSAMPLE};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::ModelState;
use crate::nn::Act;
use crate::{Error, Result};

/// Version of the serialized [`SessionMetrics`] record.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// `{0.0, 0.1, ..., 1.0}`.
pub fn default_alpha_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

/// Count matrix: `counts[i][j]` = examples of `classes[i]` predicted as
/// `classes[j]`. Rows follow classifier row order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub classes: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    fn position(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// `(correct, total)` over the rows of `set`.
    pub fn tally(&self, set: &BTreeSet<usize>) -> (u64, u64) {
        let mut correct = 0;
        let mut total = 0;
        for (i, c) in self.classes.iter().enumerate() {
            if set.contains(c) {
                correct += self.counts[i][i];
                total += self.row_sum(i);
            }
        }
        (correct, total)
    }

    /// Diagonal over row sum; `None` for classes without test examples.
    pub fn per_class_acc(&self) -> Vec<Option<f64>> {
        (0..self.classes.len())
            .map(|i| {
                let n = self.row_sum(i);
                (n > 0).then(|| self.counts[i][i] as f64 / n as f64)
            })
            .collect()
    }
}

/// Row index of the largest logit; ties go to the lowest row.
pub fn argmax_rows(logits: &Act) -> Vec<usize> {
    let c = logits.per_example();
    logits
        .data
        .chunks(c.max(1))
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Tallies true class ids against predicted classifier rows.
pub fn confusion_matrix(
    classes: &[usize],
    true_labels: &[usize],
    predicted_rows: &[usize],
) -> Result<Confusion> {
    if true_labels.is_empty() {
        return Err(Error::Contract("confusion matrix over an empty test split".into()));
    }
    if true_labels.len() != predicted_rows.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} predictions",
            true_labels.len(),
            predicted_rows.len()
        )));
    }
    let k = classes.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (&y, &p) in true_labels.iter().zip(predicted_rows) {
        let i = classes.iter().position(|&c| c == y).ok_or_else(|| {
            Error::Contract(format!("test label {y} is not a seen class"))
        })?;
        if p >= k {
            return Err(Error::Contract(format!("prediction row {p} outside 0..{k}")));
        }
        counts[i][p] += 1;
    }
    Ok(Confusion {
        classes: classes.to_vec(),
        counts,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracies {
    pub a_acc: f64,
    pub base_acc: Option<f64>,
    pub inc_acc: Option<f64>,
    pub per_class: Vec<Option<f64>>,
}

fn ratio(correct: u64, total: u64) -> Option<f64> {
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Overall, base and incremental accuracy. Classes not in `base` count as
/// incremental.
pub fn session_accuracies(conf: &Confusion, base: &BTreeSet<usize>) -> Accuracies {
    let inc = incremental_set(conf, base);
    let (cb, nb) = conf.tally(base);
    let (cn, nn) = conf.tally(&inc);
    Accuracies {
        a_acc: ratio(conf.trace(), conf.total()).unwrap_or(0.0),
        base_acc: ratio(cb, nb),
        inc_acc: ratio(cn, nn),
        per_class: conf.per_class_acc(),
    }
}

/// Unweighted mean of per-class accuracy over `set` (classes with test data).
pub fn macro_accuracy(conf: &Confusion, set: &BTreeSet<usize>) -> Option<f64> {
    let accs: Vec<f64> = conf
        .classes
        .iter()
        .zip(conf.per_class_acc())
        .filter(|(c, _)| set.contains(c))
        .filter_map(|(_, a)| a)
        .collect();
    (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
}

fn incremental_set(conf: &Confusion, base: &BTreeSet<usize>) -> BTreeSet<usize> {
    conf.classes
        .iter()
        .copied()
        .filter(|c| !base.contains(c))
        .collect()
}

/// `A(alpha) = (alpha N_b A_b + N_n A_n) / (alpha N_b + N_n)`, evaluated on
/// correct counts (`N A = correct`) so the endpoints are exact.
pub fn blended_accuracy(alpha: f64, correct_b: u64, n_b: u64, correct_n: u64, n_n: u64) -> f64 {
    (alpha * correct_b as f64 + correct_n as f64) / (alpha * n_b as f64 + n_n as f64)
}

/// Mean of `A(alpha)` over `grid`; `None` when there are no incremental
/// test examples.
pub fn generalized_accuracy(conf: &Confusion, base: &BTreeSet<usize>, grid: &[f64]) -> Option<f64> {
    let (cb, nb) = conf.tally(base);
    let (cn, nn) = conf.tally(&incremental_set(conf, base));
    if nn == 0 || grid.is_empty() {
        return None;
    }
    let sum: f64 = grid.iter().map(|&a| blended_accuracy(a, cb, nb, cn, nn)).sum();
    Some(sum / grid.len() as f64)
}

/// Class-averaged one-vs-rest error rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpFn {
    pub fp_rate: f64,
    pub fn_rate: f64,
}

/// Per class: FP rate = FP / (FP + TN), FN rate = FN / (FN + TP); averaged
/// without weights over `set`. Classes without test examples are left out
/// of the FN mean.
pub fn fp_fn_rates(conf: &Confusion, set: &BTreeSet<usize>) -> Option<FpFn> {
    let total = conf.total();
    let mut fps = Vec::new();
    let mut fns = Vec::new();
    for &c in set {
        let Some(i) = conf.position(c) else {
            continue;
        };
        let tp = conf.counts[i][i];
        let pos = conf.row_sum(i);
        let fp = conf.col_sum(i) - tp;
        let neg = total - pos;
        if neg > 0 {
            fps.push(fp as f64 / neg as f64);
        }
        if pos > 0 {
            fns.push((pos - tp) as f64 / pos as f64);
        } else {
            log::warn!("class {c} has no test examples; left out of the FN mean");
        }
    }
    if fps.is_empty() && fns.is_empty() {
        return None;
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Some(FpFn {
        fp_rate: mean(&fps),
        fn_rate: mean(&fns),
    })
}

/// Everything reported for one (session, checkpoint) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub schema_version: u32,
    pub session_index: usize,
    /// Training epoch the evaluated weights come from.
    pub epoch: usize,
    pub num_test: u64,
    pub a_acc: f64,
    pub base_acc: Option<f64>,
    pub inc_acc: Option<f64>,
    pub g_acc: Option<f64>,
    pub alpha_grid: Vec<f64>,
    pub per_class_acc: Vec<Option<f64>>,
    pub base_fp_fn: Option<FpFn>,
    pub inc_fp_fn: Option<FpFn>,
    pub confusion: Confusion,
}

impl SessionMetrics {
    pub fn from_confusion(
        session_index: usize,
        epoch: usize,
        confusion: Confusion,
        base: &BTreeSet<usize>,
        grid: &[f64],
    ) -> Self {
        let acc = session_accuracies(&confusion, base);
        let inc = incremental_set(&confusion, base);
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            session_index,
            epoch,
            num_test: confusion.total(),
            a_acc: acc.a_acc,
            base_acc: acc.base_acc,
            inc_acc: acc.inc_acc,
            g_acc: generalized_accuracy(&confusion, base, grid),
            alpha_grid: grid.to_vec(),
            per_class_acc: acc.per_class,
            base_fp_fn: fp_fn_rates(&confusion, base),
            inc_fp_fn: fp_fn_rates(&confusion, &inc),
            confusion,
        }
    }
}

/// Predicted rows for `images` in evaluation mode, `batch` examples at a time.
pub fn predict(model: &ModelState, images: &Act, batch: usize) -> Result<Vec<usize>> {
    let per = images.per_example();
    let mut out = Vec::with_capacity(images.n);
    for start in (0..images.n).step_by(batch.max(1)) {
        let end = (start + batch.max(1)).min(images.n);
        let chunk = Act::new(
            end - start,
            images.c,
            images.h,
            images.w,
            images.data[start * per..end * per].to_vec(),
        );
        let (_, logits) = model.forward(&chunk)?;
        out.extend(argmax_rows(&logits));
    }
    Ok(out)
}
