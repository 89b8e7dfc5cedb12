//! The per-session epoch loop: sampler, CMO mixing, loss, optimizer.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::guard::GuardedView;
use super::LrSchedule;
use crate::data::{augment_batch, Augmentation, ImageShape};
use crate::imbalance::{
    cmo_mix, imbsam_step, plain_step, BalancedBatchSampler, InverseFrequencySampler, LossFn,
    PluginSet, SplitObjective, Targets, Technique,
};
use crate::model::ModelState;
use crate::nn::{Act, BnMode, Grads, ParamSet, Pass, Sgd};
use crate::rng::{rng_for, Rng};
use crate::{Error, Result};

/// Everything one session's optimization needs.
pub(crate) struct SessionPlan<'a> {
    pub session: usize,
    pub view: GuardedView<'a>,
    pub train_indices: Vec<usize>,
    /// Class id to classifier row.
    pub rows: BTreeMap<usize, usize>,
    pub plugins: PluginSet,
    pub loss: LossFn,
    /// Classifier rows treated as tail by ImbSAM.
    pub tail_rows: Vec<bool>,
    pub epochs: usize,
    pub lr: LrSchedule,
    pub batch_size: usize,
    pub pass: Pass,
    pub augment: Option<Augmentation>,
    pub shape: ImageShape,
    pub seed: u64,
}

/// Reported to the caller after every epoch.
pub(crate) struct EpochEnd<'m> {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    pub model: &'m ModelState,
    pub optimizer: &'m Sgd,
}

impl SessionPlan<'_> {
    fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in &self.train_indices {
            // Labels are read through the guard like everything else.
            if let Ok(l) = self.view.label(i) {
                map.entry(l).or_default().push(i);
            }
        }
        map
    }

    fn epoch_order(&self, by_class: &BTreeMap<usize, Vec<usize>>, rng: &mut Rng) -> Result<Vec<usize>> {
        match &self.plugins.resampling {
            Some(p) if p.technique == Technique::BalancedSampler => {
                let mut s = BalancedBatchSampler::new(by_class)?;
                Ok(s.draw(self.train_indices.len(), rng))
            }
            _ => {
                let mut order = self.train_indices.clone();
                order.shuffle(rng);
                Ok(order)
            }
        }
    }

    fn rows_of(&self, labels: &[usize]) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|l| {
                self.rows.get(l).copied().ok_or_else(|| {
                    Error::Contract(format!("training label {l} has no classifier row"))
                })
            })
            .collect()
    }

    fn load_batch(&self, indices: &[usize], rng: &mut Rng) -> Result<(Vec<f32>, Vec<usize>)> {
        let (mut images, labels) = self.view.gather(indices)?;
        if let Some(aug) = &self.augment {
            augment_batch(&mut images, self.shape, aug, rng);
        }
        Ok((images, self.rows_of(&labels)?))
    }
}

/// Runs epochs `start..=plan.epochs` on `model`, calling `on_epoch` after each.
pub(crate) fn run_epochs(
    plan: &SessionPlan<'_>,
    model: &mut ModelState,
    opt: &mut Sgd,
    start: usize,
    on_epoch: &mut dyn FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<()> {
    let by_class = plan.by_class();
    let cmo = plan.plugins.get(Technique::Cmo).cloned();
    let fg_sampler = match &cmo {
        Some(_) => Some(InverseFrequencySampler::new(&by_class)?),
        None => None,
    };
    let rho = plan
        .plugins
        .get(Technique::Imbsam)
        .map(|p| p.get("rho") as f32);
    let classes = model.num_classes();
    let head_rows: Vec<bool> = plan.tail_rows.iter().map(|t| !t).collect();
    let perturbed_pass = match plan.pass.bn {
        BnMode::Batch { .. } => Pass::TRAIN_NO_UPDATE,
        BnMode::Running => plan.pass,
    };

    for epoch in start..=plan.epochs {
        let started = Instant::now();
        opt.lr = plan.lr.at(epoch);
        let mut rng = rng_for(plan.seed, &format!("train/session{}/epoch{epoch}", plan.session));
        let order = plan.epoch_order(&by_class, &mut rng)?;
        let cmo_live = cmo.as_ref().filter(|p| {
            let cooldown = p.get("cooldown_epochs") as usize;
            epoch + cooldown <= plan.epochs
        });
        let mut total = 0.0;
        let mut steps = 0usize;
        for (b, range) in batch_ranges(order.len(), plan.batch_size).into_iter().enumerate() {
            let chunk = &order[range];
            let (images, rows) = plan.load_batch(chunk, &mut rng)?;
            let (images, targets) = match (cmo_live, &fg_sampler) {
                (Some(p), Some(sampler)) if rng.random_bool(p.get("prob")) => {
                    let fg_idx = sampler.sample_batch(chunk.len(), &mut rng);
                    let (fg, fg_rows) = plan.load_batch(&fg_idx, &mut rng)?;
                    let mixed = cmo_mix(
                        &images,
                        &rows,
                        &fg,
                        &fg_rows,
                        plan.shape,
                        classes,
                        p.get("beta"),
                        &mut rng,
                    )?;
                    (mixed.images, mixed.soft_labels)
                }
                _ => (images, Targets::Hard(&rows).to_dense(chunk.len(), classes)?),
            };
            let has_tail = targets
                .chunks(classes)
                .any(|row| row.iter().zip(&plan.tail_rows).any(|(v, &t)| t && *v > 0.0));
            let s = plan.shape;
            let mut params = std::mem::take(&mut model.params);
            let mut buffers = std::mem::take(&mut model.buffers);
            let step = {
                let mut objective = BatchObjective {
                    model,
                    buffers: &mut buffers,
                    images: Act::new(chunk.len(), s.channels, s.height, s.width, images),
                    targets: &targets,
                    loss: &plan.loss,
                    head_rows: &head_rows,
                    tail_rows: &plan.tail_rows,
                    has_tail,
                    pass: plan.pass,
                    perturbed_pass,
                };
                match rho {
                    Some(rho) => imbsam_step(&mut params, &mut objective, rho, opt),
                    None => plain_step(&mut params, &mut objective, opt),
                }
            };
            model.params = params;
            model.buffers = buffers;
            let info = step?;
            if !info.loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    session: plan.session,
                    epoch,
                    step: b,
                });
            }
            total += info.loss;
            steps += 1;
        }
        on_epoch(EpochEnd {
            epoch,
            mean_loss: total / steps.max(1) as f64,
            seconds: started.elapsed().as_secs_f64(),
            model,
            optimizer: opt,
        })?;
    }
    Ok(())
}

/// Consecutive batches over `n` examples. A trailing remainder shorter than
/// half a batch is folded into the previous batch, since batch statistics
/// over a handful of examples destabilize training.
pub(crate) fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let batch = batch.max(1);
    let mut out: Vec<std::ops::Range<usize>> =
        (0..n).step_by(batch).map(|s| s..(s + batch).min(n)).collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() * 2 < batch) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().end = last.end;
    }
    out
}

struct BatchObjective<'a> {
    model: &'a ModelState,
    buffers: &'a mut ParamSet,
    images: Act,
    targets: &'a [f32],
    loss: &'a LossFn,
    head_rows: &'a [bool],
    tail_rows: &'a [bool],
    has_tail: bool,
    pass: Pass,
    perturbed_pass: Pass,
}

impl BatchObjective<'_> {
    fn grads_for(&mut self, params: &ParamSet, pass: Pass, masks: &[Option<&[bool]>]) -> Result<(f64, Vec<Grads>)> {
        let (_, logits, tape, cache) =
            self.model
                .forward_with(params, self.buffers, self.images.clone(), pass);
        let mut loss = 0.0;
        let mut out = Vec::with_capacity(masks.len());
        for mask in masks {
            let l = self
                .loss
                .eval_masked(&logits, Targets::Soft(self.targets), *mask)?;
            loss += l.loss;
            out.push(
                self.model
                    .backward_with(params, tape.as_ref(), &cache, &l.grad, true),
            );
        }
        Ok((loss, out))
    }
}

impl SplitObjective for BatchObjective<'_> {
    fn full(&mut self, params: &ParamSet) -> Result<(f64, Grads)> {
        let (loss, mut g) = self.grads_for(params, self.pass, &[None])?;
        Ok((loss, g.pop().unwrap()))
    }

    fn split(&mut self, params: &ParamSet) -> Result<(f64, Grads, Grads)> {
        let (head, tail) = (self.head_rows, self.tail_rows);
        let (loss, mut g) = self.grads_for(params, self.pass, &[Some(head), Some(tail)])?;
        let g_tail = g.pop().unwrap();
        Ok((loss, g.pop().unwrap(), g_tail))
    }

    fn tail_grad(&mut self, params: &ParamSet) -> Result<Grads> {
        let tail = self.tail_rows;
        let (_, mut g) = self.grads_for(params, self.perturbed_pass, &[Some(tail)])?;
        Ok(g.pop().unwrap())
    }

    fn has_tail(&self) -> bool {
        self.has_tail
    }
}
