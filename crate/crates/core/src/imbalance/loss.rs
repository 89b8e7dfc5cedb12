//! Softmax cross-entropy family over (possibly soft) targets.
//!
//! Every loss here is the batch mean of `sum_c y_ic * w_c * -log p_ic` with
//! `p_i = softmax(z_i + a)`. Plain cross-entropy has `a = 0, w = 1`;
//! Balanced Softmax has `a_c = log n_c` (classes with `n_c = 0` are dropped
//! from the normalization); class-balanced reweighting sets `w_c`.

use serde::{Deserialize, Serialize};

use crate::nn::Act;
use crate::{Error, Result};

/// Batch targets: class rows or a row-stochastic `n x classes` matrix.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    Hard(&'a [usize]),
    Soft(&'a [f32]),
}

impl Targets<'_> {
    /// Dense `n x classes` target matrix.
    pub fn to_dense(&self, n: usize, classes: usize) -> Result<Vec<f32>> {
        match *self {
            Targets::Hard(labels) => {
                if labels.len() != n {
                    return Err(Error::Contract(format!(
                        "{} labels for a batch of {n}",
                        labels.len()
                    )));
                }
                let mut y = vec![0.0; n * classes];
                for (i, &l) in labels.iter().enumerate() {
                    if l >= classes {
                        return Err(Error::Contract(format!(
                            "label {l} outside logit range 0..{classes}"
                        )));
                    }
                    y[i * classes + l] = 1.0;
                }
                Ok(y)
            }
            Targets::Soft(y) => {
                if y.len() != n * classes {
                    return Err(Error::Contract(format!(
                        "soft targets of length {} for a {n} x {classes} batch",
                        y.len()
                    )));
                }
                Ok(y.to_vec())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Gradient with respect to the logits, `n x classes`.
    pub grad: Act,
}

/// Which member of the family to use; resolved against class counts by
/// [`LossFn::new`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossSpec {
    #[default]
    CrossEntropy,
    BalancedSoftmax,
    ClassBalanced { beta: f64 },
}

/// A loss resolved for one training set (classifier row order).
#[derive(Debug, Clone, PartialEq)]
pub struct LossFn {
    /// Additive logit adjustment; `None` entries are excluded classes.
    adjust: Option<Vec<Option<f64>>>,
    weights: Option<Vec<f64>>,
    classes: usize,
}

impl LossFn {
    pub fn new(spec: LossSpec, counts: &[usize]) -> Result<Self> {
        let classes = counts.len();
        Ok(match spec {
            LossSpec::CrossEntropy => Self {
                adjust: None,
                weights: None,
                classes,
            },
            LossSpec::BalancedSoftmax => Self {
                adjust: Some(
                    counts
                        .iter()
                        .map(|&n| (n > 0).then(|| (n as f64).ln()))
                        .collect(),
                ),
                weights: None,
                classes,
            },
            LossSpec::ClassBalanced { beta } => Self {
                adjust: None,
                weights: Some(class_balanced_weights(counts, beta)?),
                classes,
            },
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Loss over the full target matrix.
    pub fn eval(&self, logits: &Act, targets: Targets<'_>) -> Result<LossOutput> {
        self.eval_masked(logits, targets, None)
    }

    /// Loss restricted to target columns where `mask` is true. The batch
    /// mean still divides by the full batch size, so complementary masks
    /// sum to the unmasked loss.
    pub fn eval_masked(
        &self,
        logits: &Act,
        targets: Targets<'_>,
        mask: Option<&[bool]>,
    ) -> Result<LossOutput> {
        let (n, c) = (logits.n, logits.per_example());
        if c != self.classes {
            return Err(Error::Contract(format!(
                "loss resolved for {} classes applied to {c} logits",
                self.classes
            )));
        }
        let mut y = targets.to_dense(n, c)?;
        if let Some(mask) = mask {
            for row in y.chunks_mut(c) {
                for (v, &keep) in row.iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
        }
        let mut grad = Act::zeros(n, c, 1, 1);
        let mut total = 0.0f64;
        let mut shifted = vec![0.0f64; c];
        let mut p = vec![0.0f64; c];
        for i in 0..n {
            let z = &logits.data[i * c..(i + 1) * c];
            let yi = &y[i * c..(i + 1) * c];
            let mut max = f64::NEG_INFINITY;
            for k in 0..c {
                shifted[k] = match &self.adjust {
                    None => z[k] as f64,
                    Some(a) => match a[k] {
                        Some(a) => z[k] as f64 + a,
                        None => f64::NEG_INFINITY,
                    },
                };
                max = max.max(shifted[k]);
            }
            let mut sum = 0.0;
            for k in 0..c {
                p[k] = (shifted[k] - max).exp();
                sum += p[k];
            }
            let log_sum = sum.ln() + max;
            let mut mass = 0.0;
            for k in 0..c {
                p[k] /= sum;
                let yk = yi[k] as f64;
                if yk == 0.0 {
                    continue;
                }
                if matches!(&self.adjust, Some(a) if a[k].is_none()) {
                    return Err(Error::Contract(format!(
                        "target class row {k} has zero training count"
                    )));
                }
                let w = self.weights.as_ref().map_or(1.0, |w| w[k]);
                total += yk * w * (log_sum - shifted[k]);
                mass += yk * w;
            }
            let g = &mut grad.data[i * c..(i + 1) * c];
            for k in 0..c {
                let w = self.weights.as_ref().map_or(1.0, |w| w[k]);
                g[k] = ((p[k] * mass - yi[k] as f64 * w) / n as f64) as f32;
            }
        }
        Ok(LossOutput {
            loss: total / n.max(1) as f64,
            grad,
        })
    }
}

/// Plain softmax cross-entropy.
pub fn cross_entropy(logits: &Act, targets: Targets<'_>) -> Result<LossOutput> {
    LossFn::new(LossSpec::CrossEntropy, &vec![1; logits.per_example()])?.eval(logits, targets)
}

/// Cross-entropy on logits shifted by `log n_c`.
pub fn balanced_softmax_loss(
    logits: &Act,
    targets: Targets<'_>,
    counts: &[usize],
) -> Result<LossOutput> {
    LossFn::new(LossSpec::BalancedSoftmax, counts)?.eval(logits, targets)
}

/// Effective-number weights `(1 - beta) / (1 - beta^n_c)`, normalized to
/// mean 1 over classes with data. Classes with `n_c = 0` get weight 0.
pub fn class_balanced_weights(counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    let raw = class_balanced_raw(counts, beta)?;
    let present: Vec<f64> = raw.iter().copied().filter(|w| *w > 0.0).collect();
    if present.is_empty() {
        return Ok(raw);
    }
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok(raw.iter().map(|w| w / mean).collect())
}

/// Unnormalized effective-number weights.
pub fn class_balanced_raw(counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::Validation(format!(
            "class-balanced beta must lie in [0, 1), got {beta}"
        )));
    }
    Ok(counts
        .iter()
        .map(|&n| {
            if n == 0 {
                0.0
            } else {
                (1.0 - beta) / (1.0 - beta.powi(n as i32))
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(n: usize, c: usize, data: Vec<f32>) -> Act {
        Act::features(n, c, data)
    }

    #[test]
    fn uniform_counts_equal_cross_entropy() {
        let z = logits(2, 3, vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let ce = cross_entropy(&z, Targets::Hard(&[2, 0])).unwrap();
        let bs = balanced_softmax_loss(&z, Targets::Hard(&[2, 0]), &[7, 7, 7]).unwrap();
        assert!((ce.loss - bs.loss).abs() < 1e-12);
    }

    #[test]
    fn two_class_closed_form() {
        let z = logits(1, 2, vec![0.0, 0.0]);
        let out = balanced_softmax_loss(&z, Targets::Hard(&[1]), &[9, 1]).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn soft_label_is_mean_of_one_hot_losses() {
        let z = logits(1, 2, vec![0.4, 0.4]);
        let soft = balanced_softmax_loss(&z, Targets::Soft(&[0.5, 0.5]), &[3, 3]).unwrap();
        let a = balanced_softmax_loss(&z, Targets::Hard(&[0]), &[3, 3]).unwrap();
        let b = balanced_softmax_loss(&z, Targets::Hard(&[1]), &[3, 3]).unwrap();
        assert!((soft.loss - 0.5 * (a.loss + b.loss)).abs() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let z = logits(1, 2, vec![0.0, 0.0]);
        assert!(matches!(
            cross_entropy(&z, Targets::Hard(&[2])),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn unseen_classes_are_excluded() {
        let z = logits(1, 3, vec![0.0, 0.0, 50.0]);
        let out = balanced_softmax_loss(&z, Targets::Hard(&[0]), &[1, 1, 0]).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-12);
        assert_eq!(out.grad.data[2], 0.0);
        assert!(balanced_softmax_loss(&z, Targets::Hard(&[2]), &[1, 1, 0]).is_err());
    }

    #[test]
    fn masks_partition_the_loss() {
        let z = logits(2, 3, vec![0.3, -1.2, 2.0, 0.0, 0.5, -0.5]);
        let f = LossFn::new(LossSpec::BalancedSoftmax, &[10, 3, 1]).unwrap();
        let y = [0.7, 0.0, 0.3, 0.0, 1.0, 0.0];
        let all = f.eval(&z, Targets::Soft(&y)).unwrap();
        let head = f
            .eval_masked(&z, Targets::Soft(&y), Some(&[true, false, false]))
            .unwrap();
        let tail = f
            .eval_masked(&z, Targets::Soft(&y), Some(&[false, true, true]))
            .unwrap();
        assert!((all.loss - head.loss - tail.loss).abs() < 1e-12);
        for k in 0..6 {
            assert!((all.grad.data[k] - head.grad.data[k] - tail.grad.data[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn balanced_softmax_gradient_matches_finite_differences() {
        // Logits on a 1/64 grid and a power-of-two step keep z +- eps exact in f32.
        let z0 = vec![0.25, -0.5, 1.125, 0.0, -0.75, 0.5, 0.375, -1.0];
        let counts = [40, 7, 2, 1];
        let y = [0.6, 0.0, 0.0, 0.4, 0.0, 1.0, 0.0, 0.0];
        let f = LossFn::new(LossSpec::BalancedSoftmax, &counts).unwrap();
        let g = f.eval(&logits(2, 4, z0.clone()), Targets::Soft(&y)).unwrap().grad;
        let eps = 1.0 / 1024.0;
        for k in 0..8 {
            let mut up = z0.clone();
            up[k] += eps;
            let mut down = z0.clone();
            down[k] -= eps;
            let lu = f.eval(&logits(2, 4, up), Targets::Soft(&y)).unwrap().loss;
            let ld = f.eval(&logits(2, 4, down), Targets::Soft(&y)).unwrap().loss;
            let numeric = (lu - ld) / (2.0 * eps as f64);
            let rel = (numeric - g.data[k] as f64).abs() / numeric.abs().max(1e-12);
            assert!(rel < 1e-3, "logit {k}: numeric {numeric} analytic {}", g.data[k]);
        }
    }

    proptest::proptest! {
        #[test]
        fn uniform_counts_match_cross_entropy_randomly(
            z in proptest::collection::vec(-8.0f32..8.0, 12),
            labels in proptest::collection::vec(0usize..4, 3),
            n in 1usize..500,
        ) {
            let z = logits(3, 4, z);
            let ce = cross_entropy(&z, Targets::Hard(&labels)).unwrap();
            let bs = balanced_softmax_loss(&z, Targets::Hard(&labels), &[n; 4]).unwrap();
            proptest::prop_assert!((ce.loss - bs.loss).abs() <= 1e-6);
            proptest::prop_assert!(bs.loss >= 0.0);
        }
    }

    #[test]
    fn class_balanced_formula() {
        let w = class_balanced_raw(&[1, 10], 0.9).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12);
        let expected = 0.1 / (1.0 - 0.9f64.powi(10));
        assert!((w[1] - expected).abs() < 1e-12);
        assert!((w[1] - 0.15353).abs() < 1e-4);
        assert!(class_balanced_weights(&[1, 10], 1.0).is_err());
        assert_eq!(class_balanced_weights(&[5, 50, 500], 0.0).unwrap(), vec![1.0; 3]);
        let eq = class_balanced_weights(&[8, 8], 0.99).unwrap();
        assert!((eq[0] - eq[1]).abs() < 1e-12);
        let norm = class_balanced_weights(&[1, 10, 100], 0.9).unwrap();
        assert!((norm.iter().sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert!(norm[0] > norm[1] && norm[1] > norm[2]);
    }
}
