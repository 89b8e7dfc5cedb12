//! Session tables, resource-aware curves, confusion and CKA heatmaps.
//!
//! Table cells are read from the persisted `summary.json` of each run and
//! never recomputed: the CSV holds the stored ratios verbatim, the text table
//! the same values as percentages with one decimal.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use fscil_core::metrics::{cka_session_grid, CkaMatrix, SessionMetrics};
use fscil_core::model::ModelState;
use fscil_core::train::{test_batch, RunDir, RunManifest, RunStatus, RunSummary, Snapshot};
use fscil_core::util::write_atomic;
use plotters::prelude::*;
use plotters::style::text_anchor::{HPos, Pos, VPos};
use serde::{Deserialize, Serialize};

use crate::commands::{materialize_run, Invocation, INVOCATION_FILE};
use crate::config::ReportConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default)]
pub struct ReportArgs {
    pub runs: Vec<PathBuf>,
    pub output: PathBuf,
    pub report: ReportConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProvenance {
    pub label: String,
    pub dir: PathBuf,
    pub strategy: String,
    pub plugins: String,
    pub seed: u64,
    pub protocol_hash: String,
    pub config_hash: Option<String>,
    pub tool_version: String,
    pub complete: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub config: String,
    /// aAcc of each session.
    pub sessions: Vec<Option<f64>>,
    /// Base and incremental accuracy of the last session.
    pub base: Option<f64>,
    pub inc: Option<f64>,
    /// aAcc averaged over sessions.
    pub a_acc: Option<f64>,
    /// gAcc averaged over incremental sessions.
    pub g_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionTable {
    pub num_sessions: usize,
    pub rows: Vec<TableRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub session_index: usize,
    pub epoch: usize,
    pub seconds: f64,
    pub a_acc: f64,
    pub g_acc: Option<f64>,
    pub base_acc: Option<f64>,
    pub inc_acc: Option<f64>,
}

impl CurvePoint {
    fn from_metrics(m: &SessionMetrics, seconds: f64) -> Self {
        Self {
            session_index: m.session_index,
            epoch: m.epoch,
            seconds,
            a_acc: m.a_acc,
            g_acc: m.g_acc,
            base_acc: m.base_acc,
            inc_acc: m.inc_acc,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCurve {
    pub label: String,
    pub points: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub table: SessionTable,
    pub curves: Vec<RunCurve>,
    pub cka: Vec<CkaMatrix>,
    /// Written files, relative to the report directory.
    pub files: Vec<String>,
    pub provenance: Vec<RunProvenance>,
}

struct LoadedRun {
    dir: PathBuf,
    label: String,
    manifest: RunManifest,
    summary: RunSummary,
    metrics: Vec<SessionMetrics>,
    snapshots: Vec<Snapshot>,
    invocation: Option<Invocation>,
}

fn plot_err(e: impl std::fmt::Display) -> CliError {
    CliError::Io(std::io::Error::other(format!("plotting failed: {e}")))
}

fn load_run(dir: &Path) -> CliResult<LoadedRun> {
    let run = RunDir::new(dir);
    if !run.exists() {
        return Err(fscil_core::Error::ingestion(dir, "not a run directory (no manifest.json)").into());
    }
    let manifest = run.manifest()?;
    let summary = run.load_summary()?;
    let metrics = run.load_metrics()?;
    let snapshots = match run.load_snapshots() {
        Ok(s) => s,
        Err(e) => {
            log::warn!("{}: no checkpoint snapshots ({e})", dir.display());
            Vec::new()
        }
    };
    let invocation = fs::read(dir.join(INVOCATION_FILE))
        .ok()
        .and_then(|b| serde_json::from_slice(&b).ok());
    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        label,
        manifest,
        summary,
        metrics,
        snapshots,
        invocation,
    })
}

fn unique_labels(runs: &mut [LoadedRun]) {
    let mut seen = BTreeSet::new();
    for r in runs.iter_mut() {
        let mut label = r.label.clone();
        let mut k = 2;
        while !seen.insert(label.clone()) {
            label = format!("{}#{k}", r.label);
            k += 1;
        }
        r.label = label;
    }
}

fn row_for(r: &LoadedRun, num_sessions: usize) -> TableRow {
    let s = &r.summary;
    let mut sessions: Vec<Option<f64>> = s.a_acc.iter().map(|&a| Some(a)).collect();
    sessions.resize(num_sessions, None);
    let done = !s.a_acc.is_empty();
    TableRow {
        label: r.label.clone(),
        config: format!("{} [{}]", s.strategy, s.plugins),
        sessions,
        base: s.last_base_acc,
        inc: s.last_inc_acc,
        a_acc: done.then_some(s.mean_a_acc),
        g_acc: s.mean_g_acc,
    }
}

/// Points of the last session, one per checkpoint epoch plus the final
/// model, on cumulative training time.
fn curve_for(r: &LoadedRun) -> RunCurve {
    let Some(last) = r.metrics.last() else {
        return RunCurve {
            label: r.label.clone(),
            points: Vec::new(),
        };
    };
    let mut points: Vec<CurvePoint> = r
        .snapshots
        .iter()
        .filter(|s| s.session_index == last.session_index)
        .map(|s| CurvePoint::from_metrics(&s.metrics, s.elapsed_seconds))
        .collect();
    if points.last().map(|p| p.epoch) != Some(last.epoch) {
        points.push(CurvePoint::from_metrics(last, r.summary.total_train_seconds));
    }
    points.sort_by(|a, b| a.seconds.total_cmp(&b.seconds));
    RunCurve {
        label: r.label.clone(),
        points,
    }
}

fn fmt_pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.1}", 100.0 * x))
}

fn fmt_raw(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl SessionTable {
    pub fn headers(&self) -> Vec<String> {
        let mut h = vec!["Method".to_string(), "Config".to_string()];
        h.extend((0..self.num_sessions).map(|i| format!("S{i}")));
        h.extend(["Base", "Inc.", "aAcc", "gAcc"].map(String::from));
        h
    }

    /// Numeric cells of a row, in header order after the two label columns.
    pub fn values(row: &TableRow) -> Vec<Option<f64>> {
        let mut v = row.sessions.clone();
        v.extend([row.base, row.inc, row.a_acc, row.g_acc]);
        v
    }

    /// Markdown table; per column the best value is bold and the second
    /// best underlined.
    pub fn render_text(&self) -> String {
        let headers = self.headers();
        let cols = headers.len() - 2;
        let ranks: Vec<(Option<String>, Option<String>)> = (0..cols)
            .map(|c| {
                let mut vals: Vec<String> = self
                    .rows
                    .iter()
                    .filter_map(|r| Self::values(r)[c])
                    .map(|v| fmt_pct(Some(v)))
                    .collect();
                vals.sort_by(|a, b| b.parse::<f64>().unwrap().total_cmp(&a.parse::<f64>().unwrap()));
                vals.dedup();
                if self.rows.len() < 2 {
                    (None, None)
                } else {
                    (vals.first().cloned(), vals.get(1).cloned())
                }
            })
            .collect();
        let mut out = format!("| {} |\n", headers.join(" | "));
        out.push_str(&format!("|{}\n", "---|".repeat(headers.len())));
        for r in &self.rows {
            let mut cells = vec![r.label.clone(), r.config.clone()];
            for (c, v) in Self::values(r).into_iter().enumerate() {
                let s = fmt_pct(v);
                cells.push(if v.is_some() && ranks[c].0.as_deref() == Some(s.as_str()) {
                    format!("**{s}**")
                } else if v.is_some() && ranks[c].1.as_deref() == Some(s.as_str()) {
                    format!("<u>{s}</u>")
                } else {
                    s
                });
            }
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }

    /// Stored ratios verbatim; undefined values are empty.
    pub fn render_csv(&self) -> String {
        let mut out = self
            .headers()
            .iter()
            .map(|h| csv_field(h))
            .collect::<Vec<_>>()
            .join(",");
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![csv_field(&r.label), csv_field(&r.config)];
            cells.extend(Self::values(r).into_iter().map(fmt_raw));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<ReportBundle> {
    if args.runs.is_empty() {
        return Err(CliError::Config("report needs at least one run directory".into()));
    }
    let mut runs = args
        .runs
        .iter()
        .map(|d| load_run(d))
        .collect::<CliResult<Vec<_>>>()?;
    let hash = runs[0].manifest.protocol_hash.clone();
    if let Some(other) = runs.iter().find(|r| r.manifest.protocol_hash != hash) {
        return Err(CliError::Config(format!(
            "cannot compare runs on different protocols: {} uses {} but {} uses {}",
            runs[0].dir.display(),
            hash,
            other.dir.display(),
            other.manifest.protocol_hash
        )));
    }
    unique_labels(&mut runs);
    for r in &runs {
        if r.manifest.status != RunStatus::Complete {
            log::warn!(
                "{} is not complete ({:?}); missing sessions are left blank",
                r.dir.display(),
                r.manifest.status
            );
        }
    }
    fs::create_dir_all(&args.output)?;
    let num_sessions = runs[0].manifest.sessions_total;
    let table = SessionTable {
        num_sessions,
        rows: runs.iter().map(|r| row_for(r, num_sessions)).collect(),
    };
    let curves: Vec<RunCurve> = runs.iter().map(curve_for).collect();
    let mut files = Vec::new();
    let put = |name: &str, bytes: &[u8], files: &mut Vec<String>| -> CliResult<()> {
        write_atomic(&args.output.join(name), bytes)?;
        files.push(name.to_string());
        Ok(())
    };
    if args.report.table {
        put("table.md", table.render_text().as_bytes(), &mut files)?;
        put("table.csv", table.render_csv().as_bytes(), &mut files)?;
    }
    if args.report.curves {
        draw_curves(&args.output.join("curves.svg"), &curves)?;
        files.push("curves.svg".into());
    }
    if args.report.confusion {
        for r in &runs {
            let Some(m) = r.metrics.last() else { continue };
            let name = format!("confusion_{}.svg", file_safe(&r.label));
            draw_confusion(&args.output.join(&name), &r.label, m)?;
            files.push(name);
        }
    }
    let mut cka = Vec::new();
    if args.report.cka {
        for other in runs.iter().skip(1) {
            match cka_between(&runs[0], other) {
                Ok(m) => {
                    let stem = format!("cka_{}_vs_{}", file_safe(&runs[0].label), file_safe(&other.label));
                    draw_cka(&args.output.join(format!("{stem}.svg")), &m)?;
                    put(&format!("{stem}.json"), &to_json(&m)?, &mut files)?;
                    files.push(format!("{stem}.svg"));
                    cka.push(m);
                }
                Err(e) => log::warn!("skipping CKA for {}: {e}", other.label),
            }
        }
        if runs.len() < 2 {
            log::warn!("CKA needs at least two runs");
        }
    }
    let provenance = runs
        .iter()
        .map(|r| RunProvenance {
            label: r.label.clone(),
            dir: r.dir.clone(),
            strategy: r.summary.strategy.clone(),
            plugins: r.summary.plugins.clone(),
            seed: r.summary.seed,
            protocol_hash: r.manifest.protocol_hash.clone(),
            config_hash: r.invocation.as_ref().map(|i| i.config_hash.clone()),
            tool_version: r.manifest.tool_version.clone(),
            complete: r.manifest.status == RunStatus::Complete,
        })
        .collect();
    files.push("report.json".into());
    let bundle = ReportBundle {
        table,
        curves,
        cka,
        files,
        provenance,
    };
    write_atomic(&args.output.join("report.json"), &to_json(&bundle)?)?;
    Ok(bundle)
}

fn to_json<T: Serialize>(v: &T) -> CliResult<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v).map_err(fscil_core::Error::from)?;
    b.push(b'\n');
    Ok(b)
}

fn file_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn load_models(r: &LoadedRun) -> CliResult<Vec<ModelState>> {
    let run = RunDir::new(&r.dir);
    let record = run.load_record()?;
    record
        .sessions
        .iter()
        .map(|s| {
            let rel = s.checkpoint.as_deref().ok_or_else(|| {
                fscil_core::Error::Checkpoint(format!("session {} has no checkpoint", s.session_index))
            })?;
            Ok(ModelState::load_checkpoint(&run.resolve(rel))?)
        })
        .collect()
}

/// Session-by-session CKA on the last session's test set of `a`.
fn cka_between(a: &LoadedRun, b: &LoadedRun) -> CliResult<CkaMatrix> {
    let (_, protocol, ds) = materialize_run(&a.dir)?;
    let ma = load_models(a)?;
    let mb = load_models(b)?;
    let n = ma.len().min(mb.len());
    if n == 0 {
        return Err(CliError::Config("no finished sessions to compare".into()));
    }
    let (images, _) = test_batch(&protocol, &ds, protocol.num_sessions() - 1)?;
    Ok(cka_session_grid(&ma[..n], &mb[..n], &images, (&a.label, &b.label))?)
}

const SERIES_COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
    RGBColor(23, 190, 207),
];

type Getter = fn(&CurvePoint) -> Option<f64>;

/// aAcc, gAcc, base and incremental accuracy against training seconds on a
/// log axis, one line per run.
pub fn draw_curves(path: &Path, curves: &[RunCurve]) -> CliResult<()> {
    let panels: [(&str, Getter); 4] = [
        ("aAcc", |p| Some(p.a_acc)),
        ("gAcc", |p| p.g_acc),
        ("Base", |p| p.base_acc),
        ("Inc.", |p| p.inc_acc),
    ];
    let secs: Vec<f64> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.seconds))
        .filter(|s| *s > 0.0)
        .collect();
    let lo = secs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = secs.iter().copied().fold(0.0, f64::max);
    // The x axis is log10(seconds) on whole decades, labelled in seconds.
    let (lo, hi) = if secs.is_empty() {
        (-3.0, 0.0)
    } else {
        let lo = lo.log10().floor();
        (lo, hi.log10().ceil().max(lo + 1.0))
    };
    let root = SVGBackend::new(path, (1100, 800)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    for (area, (title, get)) in root.split_evenly((2, 2)).iter().zip(panels) {
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(lo..hi, 0f64..100f64)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .x_desc("training time (s, log scale)")
            .x_labels(6)
            .x_label_formatter(&|v| seconds_label(10f64.powf(*v)))
            .y_desc(format!("{title} (%)"))
            .draw()
            .map_err(plot_err)?;
        for (k, c) in curves.iter().enumerate() {
            let color = SERIES_COLORS[k % SERIES_COLORS.len()];
            let mut pts = Vec::new();
            for p in &c.points {
                match get(p) {
                    Some(v) => pts.push((p.seconds.max(10f64.powf(lo)).log10(), 100.0 * v)),
                    None => log::warn!(
                        "{}: no {title} at epoch {}; point omitted",
                        c.label,
                        p.epoch
                    ),
                }
            }
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(plot_err)?
                .label(c.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.iter().map(|&xy| Circle::new(xy, 4, color.filled())))
                .map_err(plot_err)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .position(SeriesLabelPosition::LowerRight)
            .draw()
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

fn seconds_label(v: f64) -> String {
    if v >= 10.0 {
        format!("{v:.0}")
    } else {
        let s = format!("{:.1$}", v, (2 - v.log10().floor() as i32).max(0) as usize);
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    }
}

fn heat_color(v: f64) -> RGBColor {
    let v = v.clamp(0.0, 1.0);
    RGBColor(
        (247.0 - v * 239.0) as u8,
        (251.0 - v * 203.0) as u8,
        (255.0 - v * 148.0) as u8,
    )
}

fn draw_heatmap(
    path: &Path,
    title: &str,
    labels: (&str, &str),
    ticks: &[String],
    values: &[Vec<Option<f64>>],
) -> CliResult<()> {
    let n = values.len().max(1);
    let m = values.first().map_or(0, Vec::len).max(1);
    let root = SVGBackend::new(path, (760, 700)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(45)
        .y_label_area_size(55)
        .build_cartesian_2d((0..m).into_segmented(), (0..n).into_segmented())
        .map_err(plot_err)?;
    // Row 0 is drawn at the top.
    let flip = |i: usize| n - 1 - i;
    let tick = |v: &SegmentValue<usize>, rows: bool| match v {
        SegmentValue::CenterOf(k) if *k < if rows { n } else { m } => {
            let k = if rows { flip(*k) } else { *k };
            ticks.get(k).cloned().unwrap_or_default()
        }
        _ => String::new(),
    };
    chart
        .configure_mesh()
        .disable_mesh()
        .x_labels(m.min(25))
        .y_labels(n.min(25))
        .x_label_formatter(&|v| tick(v, false))
        .y_label_formatter(&|v| tick(v, true))
        .x_desc(labels.1)
        .y_desc(labels.0)
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(values.iter().enumerate().flat_map(|(i, row)| {
            row.iter().enumerate().map(move |(j, v)| {
                let fill = v.map_or(RGBColor(220, 220, 220), heat_color);
                Rectangle::new(
                    [
                        (SegmentValue::Exact(j), SegmentValue::Exact(flip(i))),
                        (SegmentValue::Exact(j + 1), SegmentValue::Exact(flip(i) + 1)),
                    ],
                    fill.filled(),
                )
            })
        }))
        .map_err(plot_err)?;
    if n <= 12 && m <= 12 {
        let centered = Pos::new(HPos::Center, VPos::Center);
        chart
            .draw_series(values.iter().enumerate().flat_map(|(i, row)| {
                row.iter().enumerate().map(move |(j, v)| {
                    let s = v.map_or("-".to_string(), |x| format!("{x:.2}"));
                    let color = if v.unwrap_or(0.0) > 0.6 { WHITE } else { BLACK };
                    Text::new(
                        s,
                        (SegmentValue::CenterOf(j), SegmentValue::CenterOf(flip(i))),
                        ("sans-serif", 14).into_font().color(&color).pos(centered),
                    )
                })
            }))
            .map_err(plot_err)?;
    }
    root.present().map_err(plot_err)
}

/// Row-normalized confusion matrix of a run's last session.
pub fn draw_confusion(path: &Path, label: &str, m: &SessionMetrics) -> CliResult<()> {
    let conf = &m.confusion;
    let values: Vec<Vec<Option<f64>>> = conf
        .counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total = conf.row_sum(i);
            row.iter()
                .map(|&c| (total > 0).then(|| c as f64 / total as f64))
                .collect()
        })
        .collect();
    let ticks: Vec<String> = conf.classes.iter().map(|c| c.to_string()).collect();
    draw_heatmap(
        path,
        &format!("{label}: session {} confusion (row-normalized)", m.session_index),
        ("true class", "predicted class"),
        &ticks,
        &values,
    )
}

pub fn draw_cka(path: &Path, m: &CkaMatrix) -> CliResult<()> {
    let ticks: Vec<String> = (0..m.values.len()).map(|i| format!("S{i}")).collect();
    draw_heatmap(
        path,
        &format!("CKA: {} vs {}", m.row_model, m.col_model),
        (&m.row_model, &m.col_model),
        &ticks,
        &m.values,
    )
}
