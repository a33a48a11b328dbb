//! Resumable, bounded-memory streaming of raw source records.
//!
//! A snapshot is a set of line-delimited files enumerated in lexicographic
//! order; every non-blank line is one source-native record. A stream can be
//! checkpointed at any batch boundary and reopened from the checkpoint
//! without re-emitting or skipping records.

mod http;
mod store;

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::schema::SourceId;
use crate::util::write_atomic;

pub use http::{HttpStore, RetryPolicy};
pub use store::{LocalStore, SnapshotStore};

const DEFAULT_CHUNK: usize = 256 * 1024;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("location {location} is unreadable: {reason}")]
    LocationUnreadable { location: String, reason: String },
    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },
    /// Transient failure; the stream position is unchanged and the call may be retried.
    #[error("I/O failure: {0}")]
    Io(String),
    #[error("invalid source config: {0}")]
    InvalidConfig(String),
}

fn default_batch_size() -> usize {
    1000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub source: SourceId,
    /// Directory path, `file://` URI, or `http(s)://` base URL.
    pub location: String,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Where the stream commits its checkpoint. Without one, commits are
    /// in-memory only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<PathBuf>,
    /// Optional per-source field map for real dump layouts (see `transform`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field_map: Option<PathBuf>,
}

impl SourceConfig {
    pub fn new(source: SourceId, location: impl Into<String>) -> SourceConfig {
        SourceConfig {
            source,
            location: location.into(),
            batch_size: default_batch_size(),
            checkpoint_path: None,
            field_map: None,
        }
    }
}

/// Position of the next unread line: file index in the sorted file list and
/// zero-based line index inside that file.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Offset {
    pub file_index: usize,
    pub line_index: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRecord {
    pub source: SourceId,
    pub payload: Vec<u8>,
    pub offset: Offset,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub source: SourceId,
    #[serde(flatten)]
    pub last_committed_offset: Offset,
    pub records_emitted: u64,
}

impl Checkpoint {
    pub fn start(source: SourceId) -> Checkpoint {
        Checkpoint {
            source,
            last_committed_offset: Offset::default(),
            records_emitted: 0,
        }
    }

    /// Reads a checkpoint file; `Ok(None)` when it does not exist.
    pub fn load(path: &Path) -> Result<Option<Checkpoint>, IngestError> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(IngestError::Io(format!("{}: {e}", path.display()))),
        };
        serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| IngestError::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut bytes = serde_json::to_vec(self).expect("checkpoint serializes");
        bytes.push(b'\n');
        write_atomic(path, &bytes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Position {
    file_index: usize,
    line_index: u64,
    byte_offset: u64,
}

/// Bytes of the current file starting at file offset `start`.
#[derive(Default)]
struct Window {
    data: Vec<u8>,
    start: u64,
    eof: bool,
}

/// Ordered, resumable stream of raw records from one source.
pub struct RecordStream {
    source: SourceId,
    store: Box<dyn SnapshotStore>,
    files: Vec<String>,
    pos: Position,
    window: Window,
    records_emitted: u64,
    committed: Checkpoint,
    checkpoint_path: Option<PathBuf>,
    chunk_size: usize,
}

/// Opens the configured location and positions the stream after the last
/// committed checkpoint, if any.
pub fn open_stream(config: &SourceConfig) -> Result<RecordStream, IngestError> {
    if config.batch_size == 0 {
        return Err(IngestError::InvalidConfig("batch_size must be >= 1".into()));
    }
    let store: Box<dyn SnapshotStore> = open_store(&config.location)?;
    RecordStream::open(config.source, store, config.checkpoint_path.clone())
}

pub fn open_store(location: &str) -> Result<Box<dyn SnapshotStore>, IngestError> {
    if location.starts_with("http://") || location.starts_with("https://") {
        return Ok(Box::new(HttpStore::new(location, RetryPolicy::default())));
    }
    let path = PathBuf::from(location.strip_prefix("file://").unwrap_or(location));
    if !path.is_dir() {
        return Err(IngestError::LocationUnreadable {
            location: location.to_string(),
            reason: "not a readable directory".into(),
        });
    }
    Ok(Box::new(LocalStore::new(path)))
}

impl RecordStream {
    pub fn open(
        source: SourceId,
        mut store: Box<dyn SnapshotStore>,
        checkpoint_path: Option<PathBuf>,
    ) -> Result<RecordStream, IngestError> {
        let mut files = store.list_files()?;
        files.sort();
        let checkpoint = match &checkpoint_path {
            Some(p) => Checkpoint::load(p)?,
            None => None,
        };
        let mut stream = RecordStream {
            source,
            store,
            files,
            pos: Position {
                file_index: 0,
                line_index: 0,
                byte_offset: 0,
            },
            window: Window::default(),
            records_emitted: 0,
            committed: Checkpoint::start(source),
            checkpoint_path,
            chunk_size: DEFAULT_CHUNK,
        };
        if let Some(cp) = checkpoint {
            stream.resume_from(cp)?;
        }
        Ok(stream)
    }

    pub fn with_chunk_size(mut self, chunk_size: usize) -> RecordStream {
        self.chunk_size = chunk_size.max(1);
        self
    }

    fn corrupt(&self, reason: String) -> IngestError {
        IngestError::CorruptCheckpoint {
            path: self.checkpoint_path.clone().unwrap_or_default(),
            reason,
        }
    }

    fn resume_from(&mut self, cp: Checkpoint) -> Result<(), IngestError> {
        if cp.source != self.source {
            return Err(self.corrupt(format!("checkpoint is for {}, stream is {}", cp.source, self.source)));
        }
        let Offset { file_index, line_index } = cp.last_committed_offset;
        if file_index > self.files.len() || (file_index == self.files.len() && line_index > 0) {
            return Err(self.corrupt(format!(
                "offset ({file_index}, {line_index}) is beyond the {} snapshot files",
                self.files.len()
            )));
        }
        self.pos = Position {
            file_index,
            line_index: 0,
            byte_offset: 0,
        };
        self.window = Window::default();
        for _ in 0..line_index {
            if self.read_raw_line()?.is_none() {
                return Err(self.corrupt(format!(
                    "file {} has fewer than {line_index} lines",
                    self.files[file_index]
                )));
            }
        }
        self.records_emitted = cp.records_emitted;
        self.committed = cp;
        Ok(())
    }

    pub fn source(&self) -> SourceId {
        self.source
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    /// Offset of the next unread line.
    pub fn cursor(&self) -> Offset {
        Offset {
            file_index: self.pos.file_index,
            line_index: self.pos.line_index,
        }
    }

    pub fn records_emitted(&self) -> u64 {
        self.records_emitted
    }

    pub fn last_checkpoint(&self) -> Checkpoint {
        self.committed
    }

    /// Next line of the current file, or `None` at its end. Does not move to
    /// the next file.
    fn read_raw_line(&mut self) -> Result<Option<Vec<u8>>, IngestError> {
        let Some(name) = self.files.get(self.pos.file_index).cloned() else {
            return Ok(None);
        };
        loop {
            let rel = (self.pos.byte_offset - self.window.start) as usize;
            if let Some(nl) = self.window.data[rel..].iter().position(|&b| b == b'\n') {
                let line = self.window.data[rel..rel + nl].to_vec();
                self.pos.line_index += 1;
                self.pos.byte_offset += nl as u64 + 1;
                return Ok(Some(line));
            }
            if self.window.eof {
                if rel < self.window.data.len() {
                    let line = self.window.data[rel..].to_vec();
                    self.pos.line_index += 1;
                    self.pos.byte_offset += line.len() as u64;
                    return Ok(Some(line));
                }
                return Ok(None);
            }
            if rel > 0 {
                self.window.data.drain(..rel);
                self.window.start += rel as u64;
            }
            let at = self.window.start + self.window.data.len() as u64;
            let chunk = self.store.read_at(&name, at, self.chunk_size)?;
            if chunk.is_empty() {
                self.window.eof = true;
            } else {
                self.window.data.extend_from_slice(&chunk);
            }
        }
    }

    fn next_record(&mut self) -> Result<Option<RawRecord>, IngestError> {
        while self.pos.file_index < self.files.len() {
            let offset = self.cursor();
            match self.read_raw_line()? {
                Some(mut line) => {
                    if line.last() == Some(&b'\r') {
                        line.pop();
                    }
                    if line.iter().all(u8::is_ascii_whitespace) {
                        continue;
                    }
                    return Ok(Some(RawRecord {
                        source: self.source,
                        payload: line,
                        offset,
                    }));
                }
                None => {
                    self.pos = Position {
                        file_index: self.pos.file_index + 1,
                        line_index: 0,
                        byte_offset: 0,
                    };
                    self.window = Window::default();
                }
            }
        }
        Ok(None)
    }

    /// Returns up to `n` records; fewer only at the end of the stream. On an
    /// I/O failure the position is rolled back to where the call started.
    pub fn next_batch(&mut self, n: usize) -> Result<Vec<RawRecord>, IngestError> {
        assert!(n >= 1, "batch size must be >= 1");
        let saved_pos = self.pos;
        let saved_emitted = self.records_emitted;
        let mut batch = Vec::with_capacity(n.min(4096));
        while batch.len() < n {
            match self.next_record() {
                Ok(Some(r)) => {
                    self.records_emitted += 1;
                    batch.push(r);
                }
                Ok(None) => break,
                Err(e) => {
                    self.pos = saved_pos;
                    self.records_emitted = saved_emitted;
                    self.window = Window {
                        data: Vec::new(),
                        start: saved_pos.byte_offset,
                        eof: false,
                    };
                    return Err(e);
                }
            }
        }
        Ok(batch)
    }

    /// Durably records the current position. Reopening from the returned
    /// checkpoint resumes exactly after the last record handed out.
    pub fn commit_checkpoint(&mut self) -> Result<Checkpoint, IngestError> {
        let cp = Checkpoint {
            source: self.source,
            last_committed_offset: self.cursor(),
            records_emitted: self.records_emitted,
        };
        debug_assert!(cp.last_committed_offset >= self.committed.last_committed_offset);
        if let Some(path) = &self.checkpoint_path {
            cp.save(path)
                .map_err(|e| IngestError::Io(format!("{}: {e}", path.display())))?;
        }
        self.committed = cp;
        Ok(cp)
    }
}

impl Iterator for RecordStream {
    type Item = Result<RawRecord, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_batch(1) {
            Ok(mut b) => b.pop().map(Ok),
            Err(e) => Some(Err(e)),
        }
    }
}
