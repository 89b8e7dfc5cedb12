//! `train` and `search`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fscil_core::data::Dataset;
use fscil_core::imbalance::{Category, Technique};
use fscil_core::protocol::FscilProtocol;
use fscil_core::search::{
    ablation_ladder, compose_benchmark, run_random_search, scale_down, select_top, SearchOptions,
    SelectMetric, TrialRecord,
};
use fscil_core::train::{prepare_dataset, train_run, RunDir, RunOptions, RunRecord, TrainConfig};
use fscil_core::util::write_atomic;
use serde::{Deserialize, Serialize};

use crate::config::{load_config, render_config, ExperimentConfig};
use crate::error::{CliError, CliResult};

/// Experiment config copied into every run directory.
pub const EXPERIMENT_FILE: &str = "experiment.toml";
/// How the CLI invoked the run (scale, config hash).
pub const INVOCATION_FILE: &str = "invocation.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Invocation {
    pub tool_version: String,
    pub config_hash: String,
    pub scale: Option<f64>,
    pub min_per_class: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub output: Option<PathBuf>,
    pub resume: bool,
    pub scale: Option<f64>,
}

/// Protocol and normalized dataset of an experiment, scaled when asked.
pub fn materialize(
    cfg: &ExperimentConfig,
    train: &TrainConfig,
    scale: Option<(f64, usize)>,
) -> CliResult<(FscilProtocol, Dataset, TrainConfig)> {
    let protocol = cfg.build_protocol()?;
    let raw = cfg.load_dataset()?;
    let (train, raw) = match scale {
        Some((factor, min_per_class)) => scale_down(train, &raw, factor, min_per_class)?,
        None => (train.clone(), raw),
    };
    let ds = prepare_dataset(&raw, &protocol)?;
    Ok((protocol, ds, train))
}

/// Rebuilds what a CLI-made run was trained on, from its directory.
pub fn materialize_run(dir: &Path) -> CliResult<(ExperimentConfig, FscilProtocol, Dataset)> {
    let cfg = load_config(&dir.join(EXPERIMENT_FILE))?;
    let inv: Invocation = read_json(&dir.join(INVOCATION_FILE))?;
    let scale = inv.scale.map(|f| (f, inv.min_per_class.unwrap_or(1)));
    let (protocol, ds, _) = materialize(&cfg, &cfg.train, scale)?;
    Ok((cfg, protocol, ds))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let bytes = fs::read(path).map_err(|e| fscil_core::Error::ingestion(path, e.to_string()))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| fscil_core::Error::corrupt(path, e.to_string()).into())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(fscil_core::Error::from)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

fn check_scale(scale: Option<f64>) -> CliResult<()> {
    match scale {
        Some(f) if !(f > 0.0 && f <= 1.0) => Err(CliError::Config(format!(
            "--scale must lie in (0, 1], got {f}"
        ))),
        _ => Ok(()),
    }
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<(PathBuf, RunRecord)> {
    check_scale(args.scale)?;
    let cfg = load_config(&args.config)?;
    let out = args.output.clone().unwrap_or_else(|| cfg.resolved_output());
    cfg.check_paths(&out)?;
    let run = RunDir::new(&out);
    if run.exists() && !args.resume {
        return Err(CliError::Config(format!(
            "{} already holds a run; pass --resume to continue it or pick another --output",
            out.display()
        )));
    }
    let min_per_class = 2 * cfg.protocol.shots.max(1);
    let scale = args.scale.map(|f| (f, min_per_class));
    let (protocol, ds, train) = materialize(&cfg, &cfg.train, scale)?;
    let invocation = Invocation {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash()?,
        scale: args.scale,
        min_per_class: args.scale.map(|_| min_per_class),
    };
    if run.exists() {
        let stored: Invocation = read_json(&out.join(INVOCATION_FILE))?;
        if stored.config_hash != invocation.config_hash || stored.scale != invocation.scale {
            return Err(CliError::Config(
                "cannot resume: experiment config or --scale differs from the stored run".into(),
            ));
        }
    } else {
        fs::create_dir_all(&out)?;
        write_atomic(&out.join(EXPERIMENT_FILE), render_config(&cfg)?.as_bytes())?;
        write_json(&out.join(INVOCATION_FILE), &invocation)?;
    }
    log::info!(
        "training {} on {} sessions into {}",
        train.strategy.name(),
        protocol.num_sessions(),
        out.display()
    );
    let record = train_run(
        &protocol,
        &ds,
        &train,
        &RunOptions {
            run_dir: Some(out.clone()),
            resume: args.resume,
            ..RunOptions::default()
        },
    )?;
    Ok((out, record))
}

#[derive(Debug, Clone, Default)]
pub struct SearchArgs {
    pub config: PathBuf,
    pub output: Option<PathBuf>,
    pub resume: bool,
    pub workers: Option<usize>,
    pub metric: Option<SelectMetric>,
    pub scale: Option<f64>,
    /// Run at most this many new trials per technique, then stop.
    pub max_trials: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub trial_id: usize,
    pub technique: Technique,
    pub a_acc: Option<f64>,
    pub g_acc: Option<f64>,
    pub hyperparams: BTreeMap<String, f64>,
}

impl TopEntry {
    fn from_record(r: &TrialRecord) -> Self {
        Self {
            trial_id: r.trial_id,
            technique: r.technique,
            a_acc: r.metric(SelectMetric::AAcc),
            g_acc: r.metric(SelectMetric::GAcc),
            hyperparams: r.hyperparams.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TechniqueSummary {
    pub technique: Technique,
    pub category: Category,
    pub trials: usize,
    pub succeeded: usize,
    pub failed: Vec<usize>,
    pub top: Vec<TopEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub metric: SelectMetric,
    pub top_k: usize,
    pub techniques: Vec<TechniqueSummary>,
    /// Best trial per category across its searched techniques.
    pub winners: BTreeMap<Category, TopEntry>,
    /// Composed config, relative to the search directory.
    pub composed_config: Option<String>,
    pub ladder_configs: Vec<String>,
}

/// Ranks one technique's trials; `k` is capped by the successful count.
pub fn summarize_technique(
    technique: Technique,
    records: &[TrialRecord],
    metric: SelectMetric,
    k: usize,
) -> CliResult<TechniqueSummary> {
    let succeeded = records.iter().filter(|r| r.succeeded()).count();
    let top = select_top(records, metric, k.min(succeeded))?;
    Ok(TechniqueSummary {
        technique,
        category: technique.category(),
        trials: records.len(),
        succeeded,
        failed: records
            .iter()
            .filter(|r| !r.succeeded())
            .map(|r| r.trial_id)
            .collect(),
        top: top.iter().map(TopEntry::from_record).collect(),
    })
}

/// Best record per category by `metric`; ties go to the technique listed
/// first, then the lower trial id.
pub fn category_winners(
    results: &[(Technique, Vec<TrialRecord>)],
    metric: SelectMetric,
) -> CliResult<BTreeMap<Category, TrialRecord>> {
    let mut winners: BTreeMap<Category, TrialRecord> = BTreeMap::new();
    for (t, records) in results {
        let Some(best) = select_top(records, metric, 1)?.into_iter().next() else {
            log::warn!("{t}: every trial failed; it cannot win its category");
            continue;
        };
        let better = match winners.get(&t.category()) {
            Some(cur) => best.metric(metric) > cur.metric(metric),
            None => true,
        };
        if better {
            winners.insert(t.category(), best);
        }
    }
    Ok(winners)
}

pub fn cmd_search(args: &SearchArgs) -> CliResult<(PathBuf, Option<SearchSummary>)> {
    check_scale(args.scale)?;
    let cfg = load_config(&args.config)?;
    let Some(search) = cfg.search.clone() else {
        return Err(CliError::Config(format!(
            "{} has no [search] block",
            args.config.display()
        )));
    };
    let out = args.output.clone().unwrap_or_else(|| cfg.resolved_output());
    cfg.check_paths(&out)?;
    let factor = args.scale.unwrap_or(search.scale);
    let metric = args.metric.unwrap_or(search.metric);
    let workers = args.workers.unwrap_or(search.workers).max(1);
    let scale = (factor < 1.0).then(|| (factor, search.min_per_class(&cfg.protocol)));
    let (protocol, ds, base) = materialize(&cfg, &cfg.train, scale)?;
    fs::create_dir_all(&out)?;

    let mut results = Vec::new();
    let mut complete = true;
    for &t in &search.techniques {
        let dir = out.join(t.name());
        log::info!("searching {t}: {} trials into {}", search.trials, dir.display());
        let records = run_random_search(
            &search.space(t),
            search.trials,
            search.seed,
            &protocol,
            &ds,
            &base,
            &SearchOptions {
                dir: Some(dir),
                resume: args.resume,
                workers,
                max_new_trials: args.max_trials,
            },
        )?;
        complete &= records.len() == search.trials;
        results.push((t, records));
    }
    if !complete {
        log::warn!("search stopped early; continue it with --resume");
        return Ok((out, None));
    }

    let techniques = results
        .iter()
        .map(|(t, r)| summarize_technique(*t, r, metric, search.top_k))
        .collect::<CliResult<Vec<_>>>()?;
    let winners = category_winners(&results, metric)?;
    let mut summary = SearchSummary {
        metric,
        top_k: search.top_k,
        techniques,
        winners: winners
            .iter()
            .map(|(c, r)| (*c, TopEntry::from_record(r)))
            .collect(),
        composed_config: None,
        ladder_configs: Vec::new(),
    };
    if !winners.is_empty() {
        let emit = |train: TrainConfig, name: &str| -> CliResult<String> {
            let mut composed = cfg.clone();
            composed.train = train;
            composed.search = None;
            composed.output_dir = out.join(name.trim_end_matches(".toml"));
            composed.validate()?;
            write_atomic(&out.join(name), render_config(&composed)?.as_bytes())?;
            Ok(name.to_string())
        };
        summary.composed_config = Some(emit(compose_benchmark(&cfg.train, &winners)?, "composed.toml")?);
        fs::create_dir_all(out.join("ladder"))?;
        for (step, (label, train)) in ablation_ladder(&cfg.train, &winners)?.into_iter().enumerate() {
            summary
                .ladder_configs
                .push(emit(train, &format!("ladder/{step}_{label}.toml"))?);
        }
    }
    write_json(&out.join("summary.json"), &summary)?;
    write_atomic(&out.join("summary.txt"), render_search_summary(&summary).as_bytes())?;
    Ok((out, Some(summary)))
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

pub fn render_search_summary(s: &SearchSummary) -> String {
    let mut out = format!("selection metric: {}\n", s.metric.name());
    for t in &s.techniques {
        out.push_str(&format!(
            "\n{} ({:?}): {} trials, {} succeeded\n",
            t.technique, t.category, t.trials, t.succeeded
        ));
        if !t.failed.is_empty() {
            out.push_str(&format!("  failed trials: {:?}\n", t.failed));
        }
        for (rank, e) in t.top.iter().enumerate() {
            out.push_str(&format!(
                "  #{:<2} trial {:>3}  aAcc {:>6}  gAcc {:>6}  {:?}\n",
                rank + 1,
                e.trial_id,
                pct(e.a_acc),
                pct(e.g_acc),
                e.hyperparams
            ));
        }
    }
    out.push_str("\nwinners:\n");
    for (c, e) in &s.winners {
        out.push_str(&format!(
            "  {:?}: {} trial {} {:?}\n",
            c, e.technique, e.trial_id, e.hyperparams
        ));
    }
    if let Some(c) = &s.composed_config {
        out.push_str(&format!("composed config: {c}\n"));
    }
    out
}
