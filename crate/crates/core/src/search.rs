//! Random search over one imbalance technique at a time, top-k selection,
//! and composition of per-category winners into a joint training config.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::imbalance::{Category, ImbalancePlugin, Technique};
use crate::metrics::SessionMetrics;
use crate::protocol::FscilProtocol;
use crate::rng::{derive_seed, rng_for, Rng};
use crate::train::{train_run, RunOptions, Strategy, TrainConfig};
use crate::util::write_atomic;
use crate::{Error, Result};

pub const SEARCH_LAYOUT_VERSION: u32 = 1;

/// Hyperparameter names that override the training config instead of the
/// plugin.
pub const TRAIN_KNOBS: [&str; 2] = ["lr", "weight_decay"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Uniform { low: f64, high: f64 },
    LogUniform { low: f64, high: f64 },
    Choice { values: Vec<f64> },
}

impl Dist {
    pub fn validate(&self) -> Result<()> {
        match self {
            Dist::Uniform { low, high } if low.is_finite() && high.is_finite() && low <= high => {
                Ok(())
            }
            Dist::LogUniform { low, high }
                if low.is_finite() && high.is_finite() && *low > 0.0 && low <= high =>
            {
                Ok(())
            }
            Dist::Choice { values } if !values.is_empty() && values.iter().all(|v| v.is_finite()) => {
                Ok(())
            }
            other => Err(Error::Config(format!("invalid search distribution {other:?}"))),
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            Dist::Uniform { low, high } => {
                if low == high {
                    *low
                } else {
                    rng.random_range(*low..*high)
                }
            }
            Dist::LogUniform { low, high } => {
                if low == high {
                    *low
                } else {
                    rng.random_range(low.ln()..high.ln()).exp().clamp(*low, *high)
                }
            }
            Dist::Choice { values } => values[rng.random_range(0..values.len())],
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        match self {
            Dist::Uniform { low, high } | Dist::LogUniform { low, high } => (*low..=*high).contains(&v),
            Dist::Choice { values } => values.contains(&v),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub technique: Technique,
    pub params: BTreeMap<String, Dist>,
}

impl SearchSpace {
    pub fn category(&self) -> Category {
        self.technique.category()
    }

    /// The declared default space of `technique`.
    pub fn default_for(technique: Technique) -> Self {
        let log = |low, high| Dist::LogUniform { low, high };
        let train_knobs = || {
            [
                ("lr".to_string(), log(0.01, 0.2)),
                ("weight_decay".to_string(), log(1e-4, 1e-3)),
            ]
        };
        let params: BTreeMap<String, Dist> = match technique {
            Technique::Cmo => [("beta".to_string(), log(0.1, 2.0))].into_iter().collect(),
            Technique::Imbsam => [("rho".to_string(), log(0.01, 0.5))].into_iter().collect(),
            Technique::BalancedSoftmax | Technique::BalancedSampler => {
                train_knobs().into_iter().collect()
            }
            Technique::ClassBalanced => [(
                "beta".to_string(),
                Dist::Choice {
                    values: vec![0.9, 0.99, 0.999, 0.9999],
                },
            )]
            .into_iter()
            .collect(),
        };
        Self { technique, params }
    }

    pub fn validate(&self) -> Result<()> {
        let schema = self.technique.schema();
        for (name, dist) in &self.params {
            dist.validate()?;
            if TRAIN_KNOBS.contains(&name.as_str()) {
                continue;
            }
            let Some(h) = schema.iter().find(|h| h.name == name) else {
                return Err(Error::Config(format!(
                    "{} has no hyperparameter {name:?} to search",
                    self.technique
                )));
            };
            let inside = match dist {
                Dist::Uniform { low, high } | Dist::LogUniform { low, high } => {
                    *low >= h.min && *high <= h.max
                }
                Dist::Choice { values } => values.iter().all(|v| (h.min..=h.max).contains(v)),
            };
            if !inside {
                return Err(Error::Config(format!(
                    "search range for {}.{name} leaves [{}, {}]",
                    self.technique, h.min, h.max
                )));
            }
        }
        Ok(())
    }

    /// Hyperparameters of trial `id`, a pure function of the master seed.
    pub fn sample(&self, master_seed: u64, id: usize) -> BTreeMap<String, f64> {
        let mut rng = rng_for(
            master_seed,
            &format!("search/{}/trial{id}/sample", self.technique),
        );
        let schema = self.technique.schema();
        self.params
            .iter()
            .map(|(k, d)| {
                let mut v = d.sample(&mut rng);
                if schema.iter().any(|h| h.name == k && h.integer) {
                    v = v.round();
                }
                (k.clone(), v)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum TrialStatus {
    Ok,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub technique: Technique,
    pub category: Category,
    pub hyperparams: BTreeMap<String, f64>,
    pub seed: u64,
    pub status: TrialStatus,
    /// Metrics of the last session.
    pub metrics: Option<SessionMetrics>,
    pub seconds: f64,
}

impl TrialRecord {
    pub fn succeeded(&self) -> bool {
        self.status == TrialStatus::Ok && self.metrics.is_some()
    }

    /// The plugin this trial ran, without the training-config knobs.
    pub fn plugin(&self) -> ImbalancePlugin {
        let mut p = ImbalancePlugin::new(self.technique);
        for (k, &v) in &self.hyperparams {
            if !TRAIN_KNOBS.contains(&k.as_str()) {
                p.hyperparams.insert(k.clone(), v);
            }
        }
        p
    }

    /// Writes the training-config knobs of this trial into `cfg`.
    pub fn apply_train_knobs(&self, cfg: &mut TrainConfig) {
        if let Some(&lr) = self.hyperparams.get("lr") {
            cfg.lr.initial = lr as f32;
        }
        if let Some(&wd) = self.hyperparams.get("weight_decay") {
            cfg.weight_decay = wd as f32;
        }
    }

    pub fn metric(&self, metric: SelectMetric) -> Option<f64> {
        let m = self.metrics.as_ref()?;
        match metric {
            SelectMetric::AAcc => Some(m.a_acc),
            SelectMetric::GAcc => m.g_acc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMetric {
    #[default]
    AAcc,
    GAcc,
}

impl SelectMetric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a_acc" | "aacc" => Ok(SelectMetric::AAcc),
            "g_acc" | "gacc" => Ok(SelectMetric::GAcc),
            other => Err(Error::Config(format!(
                "unknown selection metric {other:?} (expected a_acc or g_acc)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectMetric::AAcc => "a_acc",
            SelectMetric::GAcc => "g_acc",
        }
    }
}

/// The `k` best successful trials by `metric` at the last session,
/// descending; ties go to the lower trial id. When every trial failed the
/// result is empty and a warning names the failures.
pub fn select_top(records: &[TrialRecord], metric: SelectMetric, k: usize) -> Result<Vec<TrialRecord>> {
    let mut ok: Vec<(&TrialRecord, f64)> = records
        .iter()
        .filter(|r| r.succeeded())
        .filter_map(|r| r.metric(metric).map(|v| (r, v)))
        .collect();
    if ok.is_empty() {
        let reasons: Vec<String> = records
            .iter()
            .map(|r| match &r.status {
                TrialStatus::Failed { reason } => format!("trial {}: {reason}", r.trial_id),
                TrialStatus::Ok => format!("trial {}: no {} value", r.trial_id, metric.name()),
            })
            .collect();
        log::warn!(
            "no successful trials to select from ({} records): {}",
            records.len(),
            reasons.join("; ")
        );
        return Ok(Vec::new());
    }
    if k > ok.len() {
        return Err(Error::Contract(format!(
            "asked for the top {k} trials but only {} succeeded",
            ok.len()
        )));
    }
    ok.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.trial_id.cmp(&b.0.trial_id)));
    Ok(ok.into_iter().take(k).map(|(r, _)| r.clone()).collect())
}

/// Joint training config wiring one winner per category. An empty map gives
/// standard joint training.
pub fn compose_benchmark(
    base: &TrainConfig,
    winners: &BTreeMap<Category, TrialRecord>,
) -> Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.plugins.clear();
    if winners.is_empty() {
        cfg.strategy = Strategy::JointStandard;
        cfg.validate()?;
        return Ok(cfg);
    }
    cfg.strategy = Strategy::JointImbalance;
    let mut knob_source: Option<Technique> = None;
    for (category, rec) in winners {
        if rec.technique.category() != *category {
            return Err(Error::Config(format!(
                "{} is a {:?} technique but was given as the {:?} winner",
                rec.technique,
                rec.technique.category(),
                category
            )));
        }
        if TRAIN_KNOBS.iter().any(|k| rec.hyperparams.contains_key(*k)) {
            if let Some(prev) = knob_source {
                log::warn!(
                    "{} and {} both tuned training knobs; {} wins",
                    prev,
                    rec.technique,
                    rec.technique
                );
            }
            rec.apply_train_knobs(&mut cfg);
            knob_source = Some(rec.technique);
        }
        cfg.plugins.push(rec.plugin());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Cumulative configs {}, {R}, {R+W}, {R+W+O} with their labels.
pub fn ablation_ladder(
    base: &TrainConfig,
    winners: &BTreeMap<Category, TrialRecord>,
) -> Result<Vec<(String, TrainConfig)>> {
    let mut out = Vec::new();
    let mut partial: BTreeMap<Category, TrialRecord> = BTreeMap::new();
    out.push(("none".to_string(), compose_benchmark(base, &partial)?));
    for category in [Category::Resampling, Category::Reweighting, Category::Optimizer] {
        if let Some(rec) = winners.get(&category) {
            partial.insert(category, rec.clone());
            let cfg = compose_benchmark(base, &partial)?;
            let label = cfg.plugin_set()?.label();
            out.push((label, cfg));
        }
    }
    Ok(out)
}

/// Shrinks a run for desk-scale search: epochs and per-class training data
/// are multiplied by `factor` (at least one epoch and `min_per_class`
/// examples per class are kept).
pub fn scale_down(
    cfg: &TrainConfig,
    dataset: &Dataset,
    factor: f64,
    min_per_class: usize,
) -> Result<(TrainConfig, Dataset)> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Config(format!("scale must lie in (0, 1], got {factor}")));
    }
    let mut cfg = cfg.clone();
    let scale_epoch = |e: usize| ((e as f64 * factor).round() as usize).max(1);
    cfg.epochs = scale_epoch(cfg.epochs);
    cfg.lr.milestones = cfg
        .lr
        .milestones
        .iter()
        .map(|&m| scale_epoch(m))
        .filter(|&m| m < cfg.epochs)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    cfg.checkpoint_epochs = cfg
        .checkpoint_epochs
        .iter()
        .map(|&e| scale_epoch(e))
        .filter(|&e| e <= cfg.epochs)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    Ok((cfg, dataset.subsample_train(factor, min_per_class)))
}

/// What identifies a search directory; a resume must match it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpec {
    pub layout_version: u32,
    pub space: SearchSpace,
    pub trials: usize,
    pub master_seed: u64,
    pub base_config: TrainConfig,
    pub protocol_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub trial_id: usize,
    pub ok: bool,
    pub a_acc: Option<f64>,
    pub g_acc: Option<f64>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchIndex {
    pub layout_version: u32,
    pub technique: Technique,
    pub trials_total: usize,
    pub entries: Vec<IndexEntry>,
}

#[derive(Debug, Clone, Default)]
pub struct SearchOptions {
    /// Directory holding `search.json`, `index.json` and `trial_XXX.json`.
    pub dir: Option<PathBuf>,
    pub resume: bool,
    pub workers: usize,
    /// Stop after this many trials have run in this invocation.
    pub max_new_trials: Option<usize>,
}

fn trial_file(id: usize) -> String {
    format!("trial_{id:03}.json")
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(v)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// Trial config: `base` with the technique plugged in and the sampled
/// values applied.
pub fn trial_config(
    base: &TrainConfig,
    technique: Technique,
    hyperparams: &BTreeMap<String, f64>,
    seed: u64,
) -> TrainConfig {
    let rec = TrialRecord {
        trial_id: 0,
        technique,
        category: technique.category(),
        hyperparams: hyperparams.clone(),
        seed,
        status: TrialStatus::Ok,
        metrics: None,
        seconds: 0.0,
    };
    let mut cfg = base.clone();
    cfg.strategy = Strategy::JointImbalance;
    cfg.plugins = vec![rec.plugin()];
    rec.apply_train_knobs(&mut cfg);
    cfg.seed = seed;
    cfg.checkpoint_epochs.clear();
    cfg
}

fn run_trial(
    space: &SearchSpace,
    id: usize,
    master_seed: u64,
    protocol: &FscilProtocol,
    dataset: &Dataset,
    base: &TrainConfig,
) -> TrialRecord {
    let hyperparams = space.sample(master_seed, id);
    let seed = derive_seed(master_seed, &format!("search/{}/trial{id}/seed", space.technique));
    let cfg = trial_config(base, space.technique, &hyperparams, seed);
    let started = Instant::now();
    let outcome = train_run(protocol, dataset, &cfg, &RunOptions::default());
    let seconds = started.elapsed().as_secs_f64();
    let (status, metrics) = match outcome {
        Ok(rec) => match rec.sessions.last() {
            Some(s) => (TrialStatus::Ok, Some(s.metrics.clone())),
            None => (
                TrialStatus::Failed {
                    reason: "run produced no sessions".into(),
                },
                None,
            ),
        },
        Err(e) => {
            log::warn!("{} trial {id} failed: {e}", space.technique);
            (
                TrialStatus::Failed {
                    reason: e.to_string(),
                },
                None,
            )
        }
    };
    TrialRecord {
        trial_id: id,
        technique: space.technique,
        category: space.category(),
        hyperparams,
        seed,
        status,
        metrics,
        seconds,
    }
}

/// Runs trials `0..trials`. Finished trials found in the search directory
/// are reused; failed trials are recorded and the search continues.
pub fn run_random_search(
    space: &SearchSpace,
    trials: usize,
    master_seed: u64,
    protocol: &FscilProtocol,
    dataset: &Dataset,
    base: &TrainConfig,
    options: &SearchOptions,
) -> Result<Vec<TrialRecord>> {
    if trials == 0 {
        return Err(Error::Config("a search needs at least one trial".into()));
    }
    space.validate()?;
    let probe = trial_config(base, space.technique, &space.sample(master_seed, 0), 0);
    probe.validate()?;

    let mut done: BTreeMap<usize, TrialRecord> = BTreeMap::new();
    if let Some(dir) = &options.dir {
        let spec = SearchSpec {
            layout_version: SEARCH_LAYOUT_VERSION,
            space: space.clone(),
            trials,
            master_seed,
            base_config: base.clone(),
            protocol_hash: protocol.hash(),
        };
        let spec_path = dir.join("search.json");
        if spec_path.exists() {
            if !options.resume {
                return Err(Error::Config(format!(
                    "{} already holds a search; pass --resume to continue it",
                    dir.display()
                )));
            }
            let stored: SearchSpec = read_json(&spec_path)?;
            if stored != spec {
                return Err(Error::Config(
                    "cannot resume: search space, seed, trial count or base config changed".into(),
                ));
            }
            for id in 0..trials {
                let p = dir.join(trial_file(id));
                if p.exists() {
                    done.insert(id, read_json(&p)?);
                }
            }
        } else {
            fs::create_dir_all(dir)?;
            write_json(&spec_path, &spec)?;
        }
    }

    let pending: Vec<usize> = (0..trials)
        .filter(|id| !done.contains_key(id))
        .take(options.max_new_trials.unwrap_or(usize::MAX))
        .collect();
    let store = Mutex::new(done);
    let next = AtomicUsize::new(0);
    let first_error: Mutex<Option<Error>> = Mutex::new(None);
    let workers = options.workers.max(1).min(pending.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&id) = pending.get(k) else { break };
                let rec = run_trial(space, id, master_seed, protocol, dataset, base);
                let mut store = store.lock().expect("trial store poisoned");
                if let Some(dir) = &options.dir {
                    let saved = write_json(&dir.join(trial_file(id)), &rec)
                        .and_then(|_| write_index(dir, space.technique, trials, &store, &rec));
                    if let Err(e) = saved {
                        first_error.lock().expect("poisoned").get_or_insert(e);
                    }
                }
                store.insert(id, rec);
            });
        }
    });
    if let Some(e) = first_error.into_inner().expect("poisoned") {
        return Err(e);
    }
    let store = store.into_inner().expect("trial store poisoned");
    if store.len() < trials && options.max_new_trials.is_none() {
        return Err(Error::Contract(format!(
            "search finished with {} of {trials} trials",
            store.len()
        )));
    }
    Ok(store.into_values().collect())
}

fn write_index(
    dir: &Path,
    technique: Technique,
    trials: usize,
    store: &BTreeMap<usize, TrialRecord>,
    latest: &TrialRecord,
) -> Result<()> {
    let entries = store
        .values()
        .chain(std::iter::once(latest))
        .map(|r| IndexEntry {
            trial_id: r.trial_id,
            ok: r.succeeded(),
            a_acc: r.metric(SelectMetric::AAcc),
            g_acc: r.metric(SelectMetric::GAcc),
            file: trial_file(r.trial_id),
        })
        .collect::<Vec<_>>();
    let mut entries = entries;
    entries.sort_by_key(|e| e.trial_id);
    entries.dedup_by_key(|e| e.trial_id);
    write_json(
        &dir.join("index.json"),
        &SearchIndex {
            layout_version: SEARCH_LAYOUT_VERSION,
            technique,
            trials_total: trials,
            entries,
        },
    )
}

/// Reads every trial record of a search directory.
pub fn load_search(dir: &Path) -> Result<Vec<TrialRecord>> {
    let spec: SearchSpec = read_json(&dir.join("search.json"))?;
    let mut out = Vec::new();
    for id in 0..spec.trials {
        let p = dir.join(trial_file(id));
        if p.exists() {
            out.push(read_json(&p)?);
        }
    }
    Ok(out)
}
