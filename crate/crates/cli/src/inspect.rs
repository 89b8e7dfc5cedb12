//! Plain-text dumps of run and search directories.

use std::fmt::Write as _;
use std::path::Path;

use fscil_core::search::load_search;
use fscil_core::train::RunDir;

use crate::commands::{render_search_summary, SearchSummary};
use crate::error::{CliError, CliResult};

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

pub fn cmd_inspect(dir: &Path) -> CliResult<String> {
    if RunDir::new(dir).exists() {
        return inspect_run(dir);
    }
    if dir.join("search.json").exists() {
        return inspect_trials(dir);
    }
    let summary = dir.join("summary.json");
    if summary.exists() {
        let bytes = std::fs::read(&summary)?;
        if let Ok(s) = serde_json::from_slice::<SearchSummary>(&bytes) {
            return Ok(render_search_summary(&s));
        }
    }
    Err(CliError::Core(fscil_core::Error::ingestion(
        dir,
        "neither a run nor a search directory",
    )))
}

fn inspect_run(dir: &Path) -> CliResult<String> {
    let run = RunDir::new(dir);
    let m = run.manifest()?;
    let mut out = String::new();
    let _ = writeln!(out, "run {}", dir.display());
    let _ = writeln!(
        out,
        "strategy {} plugins {} seed {} status {:?}",
        m.strategy, m.plugins, m.seed, m.status
    );
    let _ = writeln!(
        out,
        "protocol {} sessions {}/{} layout v{} tool {}",
        m.protocol_hash, m.sessions_completed, m.sessions_total, m.layout_version, m.tool_version
    );
    let metrics = if run.metrics_path().exists() {
        run.load_metrics()?
    } else {
        Vec::new()
    };
    let _ = writeln!(
        out,
        "\n{:>7} {:>5} {:>6} {:>7} {:>7} {:>7} {:>7} {:>15} {:>15}",
        "session", "epoch", "tests", "aAcc", "base", "inc", "gAcc", "base FP/FN", "inc FP/FN"
    );
    for s in &metrics {
        let fpfn = |f: Option<fscil_core::metrics::FpFn>| {
            f.map_or("-".into(), |f| format!("{:.3}/{:.3}", f.fp_rate, f.fn_rate))
        };
        let _ = writeln!(
            out,
            "{:>7} {:>5} {:>6} {:>7} {:>7} {:>7} {:>7} {:>15} {:>15}",
            s.session_index,
            s.epoch,
            s.num_test,
            pct(Some(s.a_acc)),
            pct(s.base_acc),
            pct(s.inc_acc),
            pct(s.g_acc),
            fpfn(s.base_fp_fn),
            fpfn(s.inc_fp_fn)
        );
    }
    if run.snapshots_path().exists() {
        let snaps = run.load_snapshots()?;
        if !snaps.is_empty() {
            let _ = writeln!(out, "\ncheckpoints:");
            for s in snaps {
                let _ = writeln!(
                    out,
                    "  session {} epoch {:>4} at {:>9.2}s  aAcc {:>6}  gAcc {:>6}",
                    s.session_index,
                    s.epoch,
                    s.elapsed_seconds,
                    pct(Some(s.metrics.a_acc)),
                    pct(s.metrics.g_acc)
                );
            }
        }
    }
    if run.summary_path().exists() {
        let s = run.load_summary()?;
        let _ = writeln!(
            out,
            "\nmean aAcc {}  mean gAcc {}  training {:.2}s",
            pct(Some(s.mean_a_acc)),
            pct(s.mean_g_acc),
            s.total_train_seconds
        );
    }
    Ok(out)
}

fn inspect_trials(dir: &Path) -> CliResult<String> {
    let records = load_search(dir)?;
    let mut out = format!("search {} ({} trials on disk)\n", dir.display(), records.len());
    for r in records {
        let state = if r.succeeded() { "ok" } else { "failed" };
        let _ = writeln!(
            out,
            "  trial {:>3} {:<6} aAcc {:>6} gAcc {:>6} {:>7.2}s {:?}",
            r.trial_id,
            state,
            pct(r.metrics.as_ref().map(|m| m.a_acc)),
            pct(r.metrics.as_ref().and_then(|m| m.g_acc)),
            r.seconds,
            r.hyperparams
        );
    }
    Ok(out)
}
