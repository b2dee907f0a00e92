//! Label persistence: the JSON Lines label file plus two sidecars, one
//! describing sessions and one recording per-label timings.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use pixelpick_core::domain::append_label;
use pixelpick_core::{AnnotationDatabase, DomainError, LabelledPixel, PixelRef};
use serde::{Deserialize, Serialize};

use crate::session::SessionRecord;

/// One line of the timings sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub session: String,
    pub index: usize,
    pub image: String,
    pub row: usize,
    pub col: usize,
    pub elapsed_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
}

pub struct Store {
    pub db: AnnotationDatabase,
    labels_path: PathBuf,
    sessions_path: PathBuf,
    timings_path: PathBuf,
}

fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

/// Drops an unterminated final line left by an interrupted write.
fn trim_partial_line(path: &Path) -> Result<(), StoreError> {
    let io = |source| StoreError::Io { path: path.to_path_buf(), source };
    let bytes = fs::read(path).map_err(io)?;
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    log::warn!("{}: dropping {} bytes of an incomplete final line", path.display(), bytes.len() - keep);
    OpenOptions::new().write(true).open(path).and_then(|f| f.set_len(keep as u64)).map_err(io)
}

impl Store {
    /// Opens the label file at `labels_path`, creating nothing until the
    /// first write.
    pub fn open(labels_path: &Path, num_classes: usize) -> Result<Self, StoreError> {
        let sessions_path = sidecar(labels_path, ".sessions.json");
        let timings_path = sidecar(labels_path, ".timings.jsonl");
        let db = if labels_path.exists() {
            trim_partial_line(labels_path)?;
            AnnotationDatabase::load(labels_path, num_classes)?
        } else {
            AnnotationDatabase::new(num_classes)
        };
        Ok(Self { db, labels_path: labels_path.to_path_buf(), sessions_path, timings_path })
    }

    pub fn max_round(&self) -> u32 {
        self.db.entries().last().map_or(0, |e| e.round)
    }

    pub fn load_sessions(&self) -> Result<Vec<SessionRecord>, StoreError> {
        if !self.sessions_path.exists() {
            return Ok(Vec::new());
        }
        let path = &self.sessions_path;
        let text = fs::read_to_string(path).map_err(|source| StoreError::Io { path: path.clone(), source })?;
        serde_json::from_str(&text).map_err(|e| StoreError::Parse { path: path.clone(), message: e.to_string() })
    }

    pub fn load_timings(&self) -> Result<Vec<TimingRecord>, StoreError> {
        let path = &self.timings_path;
        if !path.exists() {
            return Ok(Vec::new());
        }
        trim_partial_line(path)?;
        let text = fs::read_to_string(path).map_err(|source| StoreError::Io { path: path.clone(), source })?;
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| StoreError::Parse { path: path.clone(), message: format!("line {}: {e}", n + 1) })
            })
            .collect()
    }

    /// Rewrites the session sidecar through a temporary file.
    pub fn save_sessions(&self, sessions: &[SessionRecord]) -> Result<(), StoreError> {
        let path = &self.sessions_path;
        let tmp = sidecar(path, ".tmp");
        let io = |source| StoreError::Io { path: path.clone(), source };
        let text = serde_json::to_string_pretty(sessions).expect("session records serialize");
        let mut f = fs::File::create(&tmp).map_err(io)?;
        f.write_all(text.as_bytes()).map_err(io)?;
        f.sync_all().map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    /// Persists a label, then its timing, then records it in memory. The
    /// caller has already checked that the label is new and valid.
    pub fn record(&mut self, lp: &LabelledPixel, session: &str, index: usize, elapsed_ms: u64) -> Result<(), StoreError> {
        append_label(&self.labels_path, lp)?;
        let timing = TimingRecord {
            session: session.to_string(),
            index,
            image: lp.pixel.image_id.clone(),
            row: lp.pixel.row,
            col: lp.pixel.col,
            elapsed_ms,
        };
        let path = &self.timings_path;
        let io = |source| StoreError::Io { path: path.clone(), source };
        let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        writeln!(f, "{}", serde_json::to_string(&timing).expect("timing serializes")).map_err(io)?;
        f.sync_data().map_err(io)?;
        self.db.insert(lp.clone())?;
        Ok(())
    }

    pub fn contains(&self, pixel: &PixelRef) -> bool {
        self.db.contains(pixel)
    }
}
