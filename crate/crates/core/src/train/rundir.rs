//! On-disk layout of one training run.
//!
//! ```text
//! manifest.json              layout version, status, strategy, protocol hash
//! train_config.json          the TrainConfig the run was started with
//! protocol.txt               class ids per session
//! metrics.jsonl              one SessionMetrics per session (model of record)
//! snapshots.jsonl            one Snapshot per (session, checkpoint epoch)
//! summary.json               RunSummary, the source of report cells
//! timing.log                 one line per finished epoch
//! sessions/session_{i}.json  SessionRecord once session i is complete
//! sessions/session_{i}.partial.json   progress inside session i
//! checkpoints/session_{i}_epoch_{e}.ckpt, checkpoints/session_{i}_final.ckpt
//! diagnostics.json           written when a run aborts on a non-finite loss
//! ```
//!
//! Every file except `timing.log` is replaced atomically.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{RunRecord, RunSummary, SessionRecord, Snapshot, TrainConfig};
use crate::metrics::SessionMetrics;
use crate::protocol::FscilProtocol;
use crate::util::{append_line, write_atomic};
use crate::{Error, Result};

pub const RUN_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed { reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub layout_version: u32,
    pub tool_version: String,
    pub status: RunStatus,
    pub strategy: String,
    pub plugins: String,
    pub seed: u64,
    pub protocol_hash: String,
    pub sessions_total: usize,
    pub sessions_completed: usize,
}

/// Progress within a session, enough to resume from its last checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct PartialSession {
    pub epoch_losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::corrupt(path, e.to_string()))
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl Iterator<Item = T>) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r)?;
        out.push(b'\n');
    }
    write_atomic(path, &out)
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("train_config.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn snapshots_path(&self) -> PathBuf {
        self.root.join("snapshots.jsonl")
    }

    pub fn summary_path(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn timing_path(&self) -> PathBuf {
        self.root.join("timing.log")
    }

    pub fn diagnostics_path(&self) -> PathBuf {
        self.root.join("diagnostics.json")
    }

    fn session_path(&self, i: usize) -> PathBuf {
        self.root.join("sessions").join(format!("session_{i}.json"))
    }

    fn partial_path(&self, i: usize) -> PathBuf {
        self.root.join("sessions").join(format!("session_{i}.partial.json"))
    }

    /// Checkpoint path relative to the run root.
    pub fn checkpoint_rel(i: usize, epoch: Option<usize>) -> String {
        match epoch {
            Some(e) => format!("checkpoints/session_{i}_epoch_{e}.ckpt"),
            None => format!("checkpoints/session_{i}_final.ckpt"),
        }
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn exists(&self) -> bool {
        self.manifest_path().exists()
    }

    /// Creates the layout for a new run, or checks that an existing one was
    /// started with the same config and protocol when resuming.
    pub fn prepare(
        &self,
        config: &TrainConfig,
        protocol: &FscilProtocol,
        resume: bool,
    ) -> Result<()> {
        if self.exists() {
            if !resume {
                return Err(Error::Config(format!(
                    "{} already holds a run; pass --resume to continue it or pick another output",
                    self.root.display()
                )));
            }
            let manifest: RunManifest = read_json(&self.manifest_path())?;
            if manifest.layout_version != RUN_LAYOUT_VERSION {
                return Err(Error::Config(format!(
                    "run layout version {} is not supported (expected {RUN_LAYOUT_VERSION})",
                    manifest.layout_version
                )));
            }
            if manifest.protocol_hash != protocol.hash() {
                return Err(Error::Config(format!(
                    "cannot resume: run protocol {} differs from {}",
                    manifest.protocol_hash,
                    protocol.hash()
                )));
            }
            let stored: TrainConfig = read_json(&self.config_path())?;
            if &stored != config {
                return Err(Error::Config(
                    "cannot resume: training config differs from the stored one".into(),
                ));
            }
            return self.set_status(RunStatus::Running, None);
        }
        fs::create_dir_all(self.root.join("checkpoints"))?;
        fs::create_dir_all(self.root.join("sessions"))?;
        write_json(&self.config_path(), config)?;
        write_atomic(&self.root.join("protocol.txt"), protocol.manifest().as_bytes())?;
        let plugins = config.plugin_set()?.label();
        write_json(
            &self.manifest_path(),
            &RunManifest {
                layout_version: RUN_LAYOUT_VERSION,
                tool_version: env!("CARGO_PKG_VERSION").to_string(),
                status: RunStatus::Running,
                strategy: config.strategy.name().to_string(),
                plugins,
                seed: config.seed,
                protocol_hash: protocol.hash(),
                sessions_total: protocol.num_sessions(),
                sessions_completed: 0,
            },
        )
    }

    pub fn manifest(&self) -> Result<RunManifest> {
        read_json(&self.manifest_path())
    }

    pub fn set_status(&self, status: RunStatus, completed: Option<usize>) -> Result<()> {
        let mut m = self.manifest()?;
        m.status = status;
        if let Some(c) = completed {
            m.sessions_completed = c;
        }
        write_json(&self.manifest_path(), &m)
    }

    pub fn completed_session(&self, i: usize) -> Result<Option<SessionRecord>> {
        let p = self.session_path(i);
        if !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }

    pub fn partial_session(&self, i: usize) -> Result<Option<PartialSession>> {
        let p = self.partial_path(i);
        if !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }

    pub fn write_partial(&self, i: usize, partial: &PartialSession) -> Result<()> {
        write_json(&self.partial_path(i), partial)
    }

    pub fn log_epoch(&self, session: usize, epoch: usize, loss: f64, seconds: f64) -> Result<()> {
        append_line(
            &self.timing_path(),
            &format!("session={session} epoch={epoch} loss={loss:.6} seconds={seconds:.6}"),
        )
    }

    /// Records a finished session and refreshes the run-level files.
    pub fn finish_session(&self, record: &RunRecord) -> Result<()> {
        let last = record.sessions.last().expect("a finished session");
        write_json(&self.session_path(last.session_index), last)?;
        let partial = self.partial_path(last.session_index);
        if partial.exists() {
            fs::remove_file(partial)?;
        }
        write_jsonl(&self.metrics_path(), record.sessions.iter().map(|s| &s.metrics))?;
        write_jsonl(
            &self.snapshots_path(),
            record.sessions.iter().flat_map(|s| s.snapshots.iter()),
        )?;
        write_json(&self.summary_path(), &RunSummary::from_record(record))?;
        self.set_status(RunStatus::Running, Some(record.sessions.len()))
    }

    pub fn write_diagnostics(&self, value: &serde_json::Value) -> Result<()> {
        write_json(&self.diagnostics_path(), value)
    }

    /// Reads a finished (or partially finished) run back.
    pub fn load_record(&self) -> Result<RunRecord> {
        let manifest = self.manifest()?;
        let config: TrainConfig = read_json(&self.config_path())?;
        let mut sessions = Vec::new();
        for i in 0..manifest.sessions_total {
            match self.completed_session(i)? {
                Some(s) => sessions.push(s),
                None => break,
            }
        }
        Ok(RunRecord {
            config,
            protocol_hash: manifest.protocol_hash,
            sessions,
            models: Vec::new(),
        })
    }

    pub fn load_summary(&self) -> Result<RunSummary> {
        read_json(&self.summary_path())
    }

    pub fn load_metrics(&self) -> Result<Vec<SessionMetrics>> {
        read_jsonl(&self.metrics_path())
    }

    pub fn load_snapshots(&self) -> Result<Vec<Snapshot>> {
        read_jsonl(&self.snapshots_path())
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::ingestion(path, e.to_string()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::corrupt(path, format!("line {}: {e}", n + 1)))
        })
        .collect()
}
