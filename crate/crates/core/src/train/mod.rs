//! Training strategies over an FSCIL protocol.
//!
//! Joint strategies retrain a fresh model on everything seen so far at each
//! session. Incremental strategies train once on the base session and then
//! extend the classifier, either with class-mean prototypes (backbone
//! frozen) or by fine-tuning on the new shots.

mod config;
mod guard;
mod rundir;
mod session;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use config::{FinetuneConfig, LrSchedule, Strategy, TrainConfig};
pub use guard::{AccessLog, GuardedView};
pub use rundir::{PartialSession, RunDir, RunManifest, RunStatus, RUN_LAYOUT_VERSION};

use crate::data::{class_stats, Augmentation, Dataset, Normalizer};
use crate::imbalance::{LossFn, LossSpec, PluginSet};
use crate::metrics::{confusion_matrix, default_alpha_grid, predict, SessionMetrics};
use crate::model::{ClassifierInit, ModelConfig, ModelState};
use crate::nn::{Act, Pass, Sgd, SgdConfig};
use crate::protocol::FscilProtocol;
use crate::rng::derive_seed;
use crate::{Error, Result};
use session::{run_epochs, EpochEnd, SessionPlan};

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Where checkpoints and records go; `None` keeps everything in memory.
    pub run_dir: Option<PathBuf>,
    pub resume: bool,
    pub alpha_grid: Vec<f64>,
    /// Keep the final model of every session in [`RunRecord::models`].
    pub keep_models: bool,
    /// Records every training index the trainers read.
    pub audit: Option<AccessLog>,
    /// Stop with [`Error::Interrupted`] after this (session, epoch).
    pub stop_after: Option<(usize, usize)>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            run_dir: None,
            resume: false,
            alpha_grid: default_alpha_grid(),
            keep_models: false,
            audit: None,
            stop_after: None,
        }
    }
}

/// Evaluation of an intermediate checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub session_index: usize,
    pub epoch: usize,
    /// Training time of the run up to this point, evaluation excluded.
    pub elapsed_seconds: f64,
    pub checkpoint: Option<String>,
    pub metrics: SessionMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_index: usize,
    /// Class id of each classifier row.
    pub classes: Vec<usize>,
    pub checkpoint: Option<String>,
    pub train_seconds: f64,
    pub epoch_losses: Vec<f64>,
    /// The final-epoch model, which is the model of record.
    pub metrics: SessionMetrics,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub protocol_hash: String,
    pub sessions: Vec<SessionRecord>,
    #[serde(skip)]
    pub models: Vec<ModelState>,
}

/// Headline numbers of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub strategy: String,
    pub plugins: String,
    pub seed: u64,
    pub a_acc: Vec<f64>,
    pub g_acc: Vec<Option<f64>>,
    pub last_a_acc: f64,
    pub last_base_acc: Option<f64>,
    pub last_inc_acc: Option<f64>,
    pub mean_a_acc: f64,
    /// Mean over the incremental sessions (gAcc is undefined at session 0).
    pub mean_g_acc: Option<f64>,
    pub total_train_seconds: f64,
}

impl RunSummary {
    pub fn from_record(record: &RunRecord) -> Self {
        let a_acc: Vec<f64> = record.sessions.iter().map(|s| s.metrics.a_acc).collect();
        let g_acc: Vec<Option<f64>> = record.sessions.iter().map(|s| s.metrics.g_acc).collect();
        let last = record.sessions.last().map(|s| &s.metrics);
        let defined: Vec<f64> = g_acc.iter().skip(1).filter_map(|g| *g).collect();
        Self {
            strategy: record.config.strategy.name().to_string(),
            plugins: record
                .config
                .plugin_set()
                .map(|p| p.label())
                .unwrap_or_default(),
            seed: record.config.seed,
            last_a_acc: last.map_or(0.0, |m| m.a_acc),
            last_base_acc: last.and_then(|m| m.base_acc),
            last_inc_acc: last.and_then(|m| m.inc_acc),
            mean_a_acc: if a_acc.is_empty() {
                0.0
            } else {
                a_acc.iter().sum::<f64>() / a_acc.len() as f64
            },
            mean_g_acc: (!defined.is_empty())
                .then(|| defined.iter().sum::<f64>() / defined.len() as f64),
            total_train_seconds: record.sessions.iter().map(|s| s.train_seconds).sum(),
            a_acc,
            g_acc,
        }
    }
}

/// Normalizes `dataset` with statistics of the base-session training split.
pub fn prepare_dataset(dataset: &Dataset, protocol: &FscilProtocol) -> Result<Dataset> {
    let base = protocol.session_view(dataset, 0)?;
    Ok(dataset.normalized(&Normalizer::fit(dataset, &base.train_indices)))
}

pub fn train_joint(
    protocol: &FscilProtocol,
    dataset: &Dataset,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<RunRecord> {
    if !config.strategy.is_joint() {
        return Err(Error::Config(format!(
            "train_joint called with {}",
            config.strategy.name()
        )));
    }
    train_run(protocol, dataset, config, options)
}

pub fn train_incr_prototype(
    protocol: &FscilProtocol,
    dataset: &Dataset,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<RunRecord> {
    expect_strategy(config, Strategy::IncrPrototype)?;
    train_run(protocol, dataset, config, options)
}

pub fn train_incr_finetune(
    protocol: &FscilProtocol,
    dataset: &Dataset,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<RunRecord> {
    expect_strategy(config, Strategy::IncrFinetune)?;
    train_run(protocol, dataset, config, options)
}

fn expect_strategy(config: &TrainConfig, s: Strategy) -> Result<()> {
    if config.strategy != s {
        return Err(Error::Config(format!(
            "expected strategy {}, got {}",
            s.name(),
            config.strategy.name()
        )));
    }
    Ok(())
}

/// Runs every session of `protocol` with the configured strategy.
pub fn train_run(
    protocol: &FscilProtocol,
    dataset: &Dataset,
    config: &TrainConfig,
    options: &RunOptions,
) -> Result<RunRecord> {
    config.validate()?;
    protocol.validate()?;
    let dir = options.run_dir.as_ref().map(RunDir::new);
    if let Some(d) = &dir {
        d.prepare(config, protocol, options.resume)?;
    }
    let mut runner = Runner {
        protocol,
        dataset,
        config,
        options,
        dir: dir.clone(),
        base: protocol.base_classes.iter().copied().collect(),
        elapsed: 0.0,
    };
    let result = runner.run();
    if let Some(d) = &dir {
        match &result {
            Ok(record) => d.set_status(RunStatus::Complete, Some(record.sessions.len()))?,
            Err(Error::Interrupted(_)) => {}
            Err(e) => {
                if let Error::NonFiniteLoss {
                    session,
                    epoch,
                    step,
                } = e
                {
                    d.write_diagnostics(&serde_json::json!({
                        "error": e.to_string(),
                        "session": session,
                        "epoch": epoch,
                        "step": step,
                        "strategy": config.strategy.name(),
                        "seed": config.seed,
                    }))?;
                }
                d.set_status(
                    RunStatus::Failed {
                        reason: e.to_string(),
                    },
                    None,
                )?;
            }
        }
    }
    result
}

struct Runner<'a> {
    protocol: &'a FscilProtocol,
    dataset: &'a Dataset,
    config: &'a TrainConfig,
    options: &'a RunOptions,
    dir: Option<RunDir>,
    base: BTreeSet<usize>,
    /// Training seconds accumulated over the run.
    elapsed: f64,
}

/// What a session's optimization produced.
struct Trained {
    model: ModelState,
    epoch_losses: Vec<f64>,
    epoch_seconds: Vec<f64>,
    snapshots: Vec<Snapshot>,
}

impl Runner<'_> {
    fn run(&mut self) -> Result<RunRecord> {
        let mut record = RunRecord {
            config: self.config.clone(),
            protocol_hash: self.protocol.hash(),
            sessions: Vec::new(),
            models: Vec::new(),
        };
        // Incremental strategies carry the model from one session to the next.
        let mut carried: Option<ModelState> = None;
        for i in 0..self.protocol.num_sessions() {
            if let Some(done) = self.completed(i)? {
                self.elapsed += done.0.train_seconds;
                if self.options.keep_models || !self.config.strategy.is_joint() {
                    let model = done.1.ok_or_else(|| {
                        Error::Checkpoint(format!("session {i} finished without a final checkpoint"))
                    })?;
                    carried = Some(model.clone());
                    if self.options.keep_models {
                        record.models.push(model);
                    }
                }
                record.sessions.push(done.0);
                continue;
            }
            let trained = self.train_session(i, carried.take())?;
            let mut model = trained.model;
            let epoch = trained.epoch_losses.len();
            model.meta.protocol_hash = self.protocol.hash();
            model.meta.session_index = i;
            model.meta.epoch = epoch;
            let checkpoint = match &self.dir {
                Some(d) => {
                    let rel = RunDir::checkpoint_rel(i, None);
                    model.save_checkpoint(&d.resolve(&rel))?;
                    Some(rel)
                }
                None => None,
            };
            let metrics = self.evaluate(&model, i, epoch)?;
            log::info!(
                "{} seed {} session {i}: aAcc {:.4}",
                self.config.strategy.name(),
                self.config.seed,
                metrics.a_acc
            );
            record.sessions.push(SessionRecord {
                session_index: i,
                classes: model.meta.classes.clone(),
                checkpoint,
                train_seconds: trained.epoch_seconds.iter().sum(),
                epoch_losses: trained.epoch_losses,
                metrics,
                snapshots: trained.snapshots,
            });
            if let Some(d) = &self.dir {
                d.finish_session(&record)?;
            }
            if self.options.keep_models {
                record.models.push(model.clone());
            }
            carried = Some(model);
        }
        Ok(record)
    }

    fn completed(&self, i: usize) -> Result<Option<(SessionRecord, Option<ModelState>)>> {
        let Some(d) = &self.dir else { return Ok(None) };
        if !self.options.resume {
            return Ok(None);
        }
        let Some(rec) = d.completed_session(i)? else {
            return Ok(None);
        };
        let model = match &rec.checkpoint {
            Some(rel) => Some(ModelState::load_checkpoint(&d.resolve(rel))?),
            None => None,
        };
        Ok(Some((rec, model)))
    }

    fn model_config(&self) -> ModelConfig {
        ModelConfig {
            arch: self.config.arch,
            input: self.dataset.shape,
            head: self.config.head_kind(),
        }
    }

    fn augmentation(&self) -> Option<Augmentation> {
        self.config
            .augment
            .unwrap_or(self.dataset.default_augment)
            .then(|| Augmentation {
                crop_padding: self.dataset.shape.height / 8,
                horizontal_flip: true,
            })
    }

    fn sgd(&self, lr: f32) -> Sgd {
        Sgd::new(SgdConfig {
            lr,
            momentum: self.config.momentum,
            weight_decay: self.config.weight_decay,
        })
    }

    fn train_session(&mut self, i: usize, carried: Option<ModelState>) -> Result<Trained> {
        match (self.config.strategy, i) {
            (Strategy::JointStandard | Strategy::JointImbalance, _) | (_, 0) => {
                self.train_from_scratch(i)
            }
            (Strategy::IncrPrototype, _) => {
                let model = carried.ok_or_else(|| missing_model(i))?;
                self.extend_with_prototypes(i, model)
            }
            (Strategy::IncrFinetune, _) => {
                let model = carried.ok_or_else(|| missing_model(i))?;
                self.finetune(i, model)
            }
        }
    }

    /// Fresh model on the accumulated data of sessions `0..=i`.
    fn train_from_scratch(&mut self, i: usize) -> Result<Trained> {
        let view = self.protocol.accumulated_train_set(self.dataset, i)?;
        let classes = view.seen_classes.clone();
        let stats = class_stats(self.dataset, &view, self.protocol, self.config.tail_rule);
        let plugins = if self.config.strategy == Strategy::JointImbalance {
            self.config.plugin_set()?
        } else {
            PluginSet::default()
        };
        let loss = LossFn::new(plugins.loss_spec(), &stats.counts_for(&classes))?;
        let tail_rows = classes.iter().map(|&c| stats.is_tail(c)).collect();
        let rows = row_map(&classes);
        let model = ModelState::new(
            self.model_config(),
            classes,
            derive_seed(self.config.seed, &format!("session{i}/init")),
        )?;
        let plan = SessionPlan {
            session: i,
            view: GuardedView::new(self.dataset, &view.train_indices, self.options.audit.clone()),
            train_indices: view.train_indices,
            rows,
            plugins,
            loss,
            tail_rows,
            epochs: self.config.epochs,
            lr: self.config.lr.clone(),
            batch_size: self.config.batch_size,
            pass: Pass::TRAIN,
            augment: self.augmentation(),
            shape: self.dataset.shape,
            seed: self.config.seed,
        };
        let opt = self.sgd(plan.lr.initial);
        self.optimize(&plan, model, opt, &self.config.checkpoint_epochs.clone())
    }

    /// Appends one row per new class: the normalized mean embedding of its
    /// shots. Nothing is trained.
    fn extend_with_prototypes(&mut self, i: usize, mut model: ModelState) -> Result<Trained> {
        let view = self.protocol.session_view(self.dataset, i)?;
        let guard = GuardedView::new(self.dataset, &view.train_indices, self.options.audit.clone());
        let (images, labels) = guard.gather(&view.train_indices)?;
        let s = self.dataset.shape;
        let emb = model.embed(&Act::new(labels.len(), s.channels, s.height, s.width, images))?;
        let new = self.protocol.session_classes(i).to_vec();
        let per_class: Vec<Vec<Vec<f32>>> = new
            .iter()
            .map(|&c| {
                labels
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l == c)
                    .map(|(k, _)| emb.row(k).to_vec())
                    .collect()
            })
            .collect();
        model.expand_classifier(&new, &ClassifierInit::Prototypes(per_class))?;
        Ok(Trained {
            model,
            epoch_losses: Vec::new(),
            epoch_seconds: Vec::new(),
            snapshots: Vec::new(),
        })
    }

    /// Zero-initialized new rows, then every parameter is tuned on the new
    /// shots with frozen normalization statistics and a reduced rate.
    fn finetune(&mut self, i: usize, mut model: ModelState) -> Result<Trained> {
        let view = self.protocol.session_view(self.dataset, i)?;
        let new = self.protocol.session_classes(i).to_vec();
        model.expand_classifier(&new, &ClassifierInit::Zeros)?;
        let classes = model.meta.classes.clone();
        let loss = LossFn::new(LossSpec::CrossEntropy, &vec![1; classes.len()])?;
        let lr = LrSchedule {
            initial: self.config.lr.initial * self.config.finetune.lr_scale,
            milestones: Vec::new(),
            gamma: 1.0,
        };
        let plan = SessionPlan {
            session: i,
            view: GuardedView::new(self.dataset, &view.train_indices, self.options.audit.clone()),
            train_indices: view.train_indices,
            rows: row_map(&classes),
            plugins: PluginSet::default(),
            loss,
            tail_rows: vec![false; classes.len()],
            epochs: self.config.finetune.epochs,
            lr,
            batch_size: self.config.batch_size,
            pass: Pass::FROZEN_BN,
            augment: self.augmentation(),
            shape: self.dataset.shape,
            seed: self.config.seed,
        };
        let opt = self.sgd(plan.lr.initial);
        self.optimize(&plan, model, opt, &[])
    }

    /// Runs the epochs of `plan`, resuming from the last intermediate
    /// checkpoint when one exists, and snapshots at `checkpoints`.
    fn optimize(
        &mut self,
        plan: &SessionPlan<'_>,
        mut model: ModelState,
        mut opt: Sgd,
        checkpoints: &[usize],
    ) -> Result<Trained> {
        let i = plan.session;
        let mut progress = PartialSession::default();
        let mut start = 1;
        if let (Some(d), true) = (&self.dir, self.options.resume) {
            if let Some(mut partial) = d.partial_session(i)? {
                if let Some(last) = partial.snapshots.last().cloned() {
                    let path = d.resolve(&RunDir::checkpoint_rel(i, Some(last.epoch)));
                    let (m, state) = ModelState::load_checkpoint_with(&path)?;
                    model = m;
                    opt.restore(&state);
                    start = last.epoch + 1;
                    partial.epoch_losses.truncate(last.epoch);
                    partial.epoch_seconds.truncate(last.epoch);
                    progress = partial;
                }
            }
        }
        self.elapsed += progress.epoch_seconds.iter().sum::<f64>();
        let stop = self.options.stop_after;
        let dir = self.dir.clone();
        let mut elapsed = self.elapsed;
        let this = &*self;
        let mut on_epoch = |end: EpochEnd<'_>| -> Result<()> {
            elapsed += end.seconds;
            progress.epoch_losses.push(end.mean_loss);
            progress.epoch_seconds.push(end.seconds);
            if let Some(d) = &dir {
                d.log_epoch(i, end.epoch, end.mean_loss, end.seconds)?;
            }
            if checkpoints.contains(&end.epoch) {
                let checkpoint = match &dir {
                    Some(d) => {
                        let rel = RunDir::checkpoint_rel(i, Some(end.epoch));
                        let mut m = end.model.clone();
                        m.meta.protocol_hash = this.protocol.hash();
                        m.meta.session_index = i;
                        m.meta.epoch = end.epoch;
                        m.save_checkpoint_with(
                            &d.resolve(&rel),
                            Some(&end.optimizer.state(&end.model.params)),
                        )?;
                        Some(rel)
                    }
                    None => None,
                };
                progress.snapshots.push(Snapshot {
                    session_index: i,
                    epoch: end.epoch,
                    elapsed_seconds: elapsed,
                    checkpoint,
                    metrics: this.evaluate(end.model, i, end.epoch)?,
                });
            }
            if let Some(d) = &dir {
                d.write_partial(i, &progress)?;
            }
            if stop == Some((i, end.epoch)) {
                return Err(Error::Interrupted(format!(
                    "stopped after session {i}, epoch {}",
                    end.epoch
                )));
            }
            Ok(())
        };
        run_epochs(plan, &mut model, &mut opt, start, &mut on_epoch)?;
        self.elapsed = elapsed;
        if !model.is_finite() {
            return Err(Error::NonFiniteLoss {
                session: i,
                epoch: plan.epochs,
                step: 0,
            });
        }
        Ok(Trained {
            model,
            epoch_losses: progress.epoch_losses,
            epoch_seconds: progress.epoch_seconds,
            snapshots: progress.snapshots,
        })
    }

    /// Metrics on the cumulative test set of session `i`. The evaluator is
    /// the only reader of test examples.
    fn evaluate(&self, model: &ModelState, i: usize, epoch: usize) -> Result<SessionMetrics> {
        let idx = self.protocol.test_indices(self.dataset, i)?;
        let s = self.dataset.shape;
        let mut images = Vec::with_capacity(idx.len() * s.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &k in &idx {
            images.extend_from_slice(self.dataset.image(k));
            labels.push(self.dataset.label(k));
        }
        let batch = Act::new(idx.len(), s.channels, s.height, s.width, images);
        let rows = predict(model, &batch, self.config.eval_batch)?;
        let conf = confusion_matrix(&model.meta.classes, &labels, &rows)?;
        Ok(SessionMetrics::from_confusion(
            i,
            epoch,
            conf,
            &self.base,
            &self.options.alpha_grid,
        ))
    }
}

fn missing_model(i: usize) -> Error {
    Error::Contract(format!("session {i} has no model from the previous session"))
}

fn row_map(classes: &[usize]) -> BTreeMap<usize, usize> {
    classes.iter().enumerate().map(|(r, &c)| (c, r)).collect()
}

/// Test images and labels of session `i`, for analyses outside training.
pub fn test_batch(protocol: &FscilProtocol, dataset: &Dataset, i: usize) -> Result<(Act, Vec<usize>)> {
    let idx = protocol.test_indices(dataset, i)?;
    let s = dataset.shape;
    let mut images = Vec::with_capacity(idx.len() * s.len());
    for &k in &idx {
        images.extend_from_slice(dataset.image(k));
    }
    let labels = idx.iter().map(|&k| dataset.label(k)).collect();
    Ok((Act::new(idx.len(), s.channels, s.height, s.width, images), labels))
}
