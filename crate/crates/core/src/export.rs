//! Sharded, byte-deterministic dataset export and the run manifest.
//!
//! Frames are grouped into (functional, source) cells. Each cell is sorted
//! by `frame_id` with an external merge sort (in-memory runs spilled to a
//! work directory once they reach `sort_run_frames`), deduplicated, and
//! cut into fixed-size JSONL shards under `out/<Functional>/<Source>/`.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::curate::{FilterConfig, FilterStats};
use crate::schema::{Frame, Functional, SourceId};
use crate::util::{temp_sibling, write_atomic};

pub const SCHEMA_VERSION: &str = "1.0";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum ExportError {
    #[error("frame {frame_id} exported twice with different content")]
    DuplicateConflict { frame_id: String },
    #[error("count mismatch in {what}: expected {expected}, found {found}")]
    CountMismatch { what: String, expected: u64, found: u64 },
    #[error("corrupt shard {path}: {reason}")]
    CorruptShard { path: String, reason: String },
    #[error("I/O failure: {0}")]
    Io(String),
}

impl From<io::Error> for ExportError {
    fn from(e: io::Error) -> Self {
        ExportError::Io(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub functional: Functional,
    pub source: SourceId,
    pub frame_count: u64,
    pub byte_count: u64,
    /// Hex SHA-256 of the JSONL bytes.
    pub content_hash: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportOptions {
    pub max_frames_per_shard: usize,
    /// In-memory sort run size before spilling to disk.
    pub sort_run_frames: usize,
    /// Also write a column-oriented JSON mirror next to every shard.
    pub columnar: bool,
}

impl Default for ExportOptions {
    fn default() -> Self {
        ExportOptions {
            max_frames_per_shard: 100_000,
            sort_run_frames: 50_000,
            columnar: false,
        }
    }
}

pub fn cell_dir(functional: Functional, source: SourceId) -> String {
    format!("{}/{}", functional.name(), source.name())
}

pub fn shard_name(index: usize) -> String {
    format!("shard-{index:05}.jsonl")
}

#[derive(Default)]
struct CellSorter {
    buffer: Vec<(String, String)>,
    runs: Vec<PathBuf>,
}

/// Accepts frames in any order and writes sorted shards on [`finish`].
///
/// [`finish`]: ShardWriter::finish
pub struct ShardWriter {
    out_dir: PathBuf,
    work_dir: PathBuf,
    opts: ExportOptions,
    cells: BTreeMap<(Functional, SourceId), CellSorter>,
    run_counter: usize,
}

impl ShardWriter {
    pub fn new(out_dir: &Path, work_dir: &Path, opts: ExportOptions) -> Result<ShardWriter, ExportError> {
        assert!(opts.max_frames_per_shard >= 1, "max_frames_per_shard must be >= 1");
        fs::create_dir_all(work_dir)?;
        Ok(ShardWriter {
            out_dir: out_dir.to_path_buf(),
            work_dir: work_dir.to_path_buf(),
            opts,
            cells: BTreeMap::new(),
            run_counter: 0,
        })
    }

    pub fn push(&mut self, frame: &Frame) -> Result<(), ExportError> {
        self.push_line(frame.functional, frame.source, frame.frame_id.clone(), frame.to_json_line())
    }

    /// Pushes an already serialized frame line.
    pub fn push_line(
        &mut self,
        functional: Functional,
        source: SourceId,
        frame_id: String,
        line: String,
    ) -> Result<(), ExportError> {
        let cell = self.cells.entry((functional, source)).or_default();
        cell.buffer.push((frame_id, line));
        if cell.buffer.len() >= self.opts.sort_run_frames.max(1) {
            let path = self.work_dir.join(format!("run-{:06}.tsv", self.run_counter));
            self.run_counter += 1;
            spill(&mut cell.buffer, &path)?;
            cell.runs.push(path);
        }
        Ok(())
    }

    /// Sorts, deduplicates and writes every cell. Existing shards from an
    /// earlier export into the same directory are replaced.
    pub fn finish(mut self) -> Result<Vec<Shard>, ExportError> {
        clear_shards(&self.out_dir)?;
        let mut shards = Vec::new();
        let cells = std::mem::take(&mut self.cells);
        for ((functional, source), mut cell) in cells {
            let dir = self.out_dir.join(functional.name()).join(source.name());
            fs::create_dir_all(&dir)?;
            let mut out = CellOutput::new(&self.out_dir, functional, source, &self.opts);
            if cell.runs.is_empty() {
                cell.buffer.sort_by(|a, b| a.0.cmp(&b.0));
                dedupe_into(cell.buffer.into_iter().map(Ok), &mut out)?;
            } else {
                if !cell.buffer.is_empty() {
                    let path = self.work_dir.join(format!("run-{:06}.tsv", self.run_counter));
                    self.run_counter += 1;
                    spill(&mut cell.buffer, &path)?;
                    cell.runs.push(path);
                }
                dedupe_into(MergeIter::open(&cell.runs)?, &mut out)?;
                for run in &cell.runs {
                    let _ = fs::remove_file(run);
                }
            }
            shards.extend(out.finish()?);
        }
        Ok(shards)
    }
}

/// Removes shard files (and their columnar mirrors) left by a previous export.
fn clear_shards(out_dir: &Path) -> Result<(), ExportError> {
    for functional in Functional::ALL {
        for source in SourceId::ALL {
            let dir = out_dir.join(functional.name()).join(source.name());
            let Ok(entries) = fs::read_dir(&dir) else { continue };
            for entry in entries {
                let entry = entry?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if name.starts_with("shard-") {
                    fs::remove_file(entry.path())?;
                }
            }
        }
    }
    Ok(())
}

fn spill(buffer: &mut Vec<(String, String)>, path: &Path) -> Result<(), ExportError> {
    buffer.sort_by(|a, b| a.0.cmp(&b.0));
    let mut w = BufWriter::new(File::create(path)?);
    for (id, line) in buffer.drain(..) {
        // Both halves are JSON text, which never contains a raw tab or newline.
        serde_json::to_writer(&mut w, &id).map_err(|e| ExportError::Io(e.to_string()))?;
        w.write_all(b"\t")?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

struct RunReader {
    lines: io::Lines<BufReader<File>>,
}

impl RunReader {
    fn next_entry(&mut self) -> Result<Option<(String, String)>, ExportError> {
        let Some(line) = self.lines.next().transpose()? else {
            return Ok(None);
        };
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| ExportError::Io("malformed sort run".into()))?;
        let id: String = serde_json::from_str(id).map_err(|e| ExportError::Io(e.to_string()))?;
        Ok(Some((id, rest.to_string())))
    }
}

/// K-way merge over sorted run files. Ties resolve by run index, which
/// only matters for duplicates that are then checked for byte equality.
struct MergeIter {
    readers: Vec<RunReader>,
    heap: BinaryHeap<Reverse<(String, usize, String)>>,
}

impl MergeIter {
    fn open(runs: &[PathBuf]) -> Result<MergeIter, ExportError> {
        let mut readers = Vec::with_capacity(runs.len());
        let mut heap = BinaryHeap::new();
        for (i, path) in runs.iter().enumerate() {
            let mut r = RunReader {
                lines: BufReader::with_capacity(1 << 16, File::open(path)?).lines(),
            };
            if let Some((id, line)) = r.next_entry()? {
                heap.push(Reverse((id, i, line)));
            }
            readers.push(r);
        }
        Ok(MergeIter { readers, heap })
    }
}

impl Iterator for MergeIter {
    type Item = Result<(String, String), ExportError>;

    fn next(&mut self) -> Option<Self::Item> {
        let Reverse((id, i, line)) = self.heap.pop()?;
        match self.readers[i].next_entry() {
            Ok(Some((nid, nline))) => self.heap.push(Reverse((nid, i, nline))),
            Ok(None) => {}
            Err(e) => return Some(Err(e)),
        }
        Some(Ok((id, line)))
    }
}

fn dedupe_into(
    sorted: impl Iterator<Item = Result<(String, String), ExportError>>,
    out: &mut CellOutput,
) -> Result<(), ExportError> {
    let mut prev: Option<(String, String)> = None;
    for item in sorted {
        let (id, line) = item?;
        if let Some((pid, pline)) = &prev {
            if *pid == id {
                if *pline != line {
                    return Err(ExportError::DuplicateConflict { frame_id: id });
                }
                continue;
            }
        }
        if let Some((_, pline)) = prev.take() {
            out.write_line(&pline)?;
        }
        prev = Some((id, line));
    }
    if let Some((_, pline)) = prev {
        out.write_line(&pline)?;
    }
    Ok(())
}

struct OpenShard {
    index: usize,
    path: PathBuf,
    writer: BufWriter<File>,
    hasher: Sha256,
    frames: u64,
    bytes: u64,
    columns: Option<Vec<String>>,
}

struct CellOutput<'a> {
    out_dir: &'a Path,
    functional: Functional,
    source: SourceId,
    opts: &'a ExportOptions,
    current: Option<OpenShard>,
    next_index: usize,
    done: Vec<Shard>,
}

impl<'a> CellOutput<'a> {
    fn new(out_dir: &'a Path, functional: Functional, source: SourceId, opts: &'a ExportOptions) -> Self {
        CellOutput {
            out_dir,
            functional,
            source,
            opts,
            current: None,
            next_index: 0,
            done: Vec::new(),
        }
    }

    fn write_line(&mut self, line: &str) -> Result<(), ExportError> {
        if self.current.is_none() {
            let index = self.next_index;
            self.next_index += 1;
            let path = self
                .out_dir
                .join(self.functional.name())
                .join(self.source.name())
                .join(shard_name(index));
            let writer = BufWriter::new(File::create(temp_sibling(&path))?);
            self.current = Some(OpenShard {
                index,
                path,
                writer,
                hasher: Sha256::new(),
                frames: 0,
                bytes: 0,
                columns: self.opts.columnar.then(Vec::new),
            });
        }
        let shard = self.current.as_mut().expect("opened above");
        shard.writer.write_all(line.as_bytes())?;
        shard.writer.write_all(b"\n")?;
        shard.hasher.update(line.as_bytes());
        shard.hasher.update(b"\n");
        shard.frames += 1;
        shard.bytes += line.len() as u64 + 1;
        if let Some(cols) = shard.columns.as_mut() {
            cols.push(line.to_string());
        }
        if shard.frames as usize >= self.opts.max_frames_per_shard {
            self.close()?;
        }
        Ok(())
    }

    fn close(&mut self) -> Result<(), ExportError> {
        let Some(shard) = self.current.take() else { return Ok(()) };
        let file = shard.writer.into_inner().map_err(|e| ExportError::Io(e.to_string()))?;
        file.sync_all()?;
        fs::rename(temp_sibling(&shard.path), &shard.path)?;
        if let Some(lines) = shard.columns {
            let columns = columnar(&lines)?;
            write_atomic(&shard.path.with_extension("columns.json"), columns.as_bytes())?;
        }
        self.done.push(Shard {
            path: format!("{}/{}", cell_dir(self.functional, self.source), shard_name(shard.index)),
            functional: self.functional,
            source: self.source,
            frame_count: shard.frames,
            byte_count: shard.bytes,
            content_hash: hex::encode(shard.hasher.finalize()),
        });
        Ok(())
    }

    fn finish(mut self) -> Result<Vec<Shard>, ExportError> {
        self.close()?;
        Ok(self.done)
    }
}

/// Column-oriented rendering of a shard: one array per frame field, with
/// `null` for absent optional values. Same logical schema as the JSONL.
fn columnar(lines: &[String]) -> Result<String, ExportError> {
    const FIELDS: [&str; 14] = [
        "frame_id",
        "trajectory_id",
        "relaxation_step",
        "relaxation_number",
        "lattice",
        "species",
        "positions",
        "energy",
        "forces",
        "stress",
        "functional",
        "source",
        "source_record_id",
        "space_group",
    ];
    let mut cols: BTreeMap<&str, Vec<Value>> = FIELDS.iter().map(|f| (*f, Vec::new())).collect();
    for line in lines {
        let v: Value = serde_json::from_str(line).map_err(|e| ExportError::Io(e.to_string()))?;
        for f in FIELDS {
            cols.get_mut(f).expect("known field").push(v.get(f).cloned().unwrap_or(Value::Null));
        }
    }
    serde_json::to_string(&cols).map_err(|e| ExportError::Io(e.to_string()))
}

/// Convenience wrapper: export a finite frame collection.
pub fn write_shards(
    frames: impl IntoIterator<Item = Frame>,
    out_dir: &Path,
    work_dir: &Path,
    opts: ExportOptions,
) -> Result<Vec<Shard>, ExportError> {
    let mut w = ShardWriter::new(out_dir, work_dir, opts)?;
    for f in frames {
        w.push(&f)?;
    }
    w.finish()
}

/// Iterates the frames of one shard in file order.
pub fn read_shard(out_dir: &Path, shard: &Shard) -> Result<impl Iterator<Item = Result<Frame, ExportError>>, ExportError> {
    let path = out_dir.join(&shard.path);
    let display = shard.path.clone();
    let reader = BufReader::with_capacity(1 << 16, File::open(&path)?);
    Ok(reader.lines().map(move |line| {
        let line = line?;
        Frame::from_json_line(&line).map_err(|e| ExportError::CorruptShard {
            path: display.clone(),
            reason: e.to_string(),
        })
    }))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellCount {
    pub functional: Functional,
    pub source: SourceId,
    pub n_trajectories: u64,
    pub n_frames: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: String,
    pub filter_config: FilterConfig,
    pub filter_stats: FilterStats,
    pub cells: Vec<CellCount>,
    pub shards: Vec<Shard>,
    pub created_at: String,
    pub pipeline_git_ref: String,
}

/// Timestamp recorded in manifests: `SOURCE_DATE_EPOCH` when set, else the
/// Unix epoch, so that re-runs produce identical bytes.
pub fn reproducible_timestamp() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok())
        .unwrap_or(0);
    chrono::DateTime::from_timestamp(secs, 0)
        .unwrap_or_default()
        .format("%Y-%m-%dT%H:%M:%SZ")
        .to_string()
}

pub fn pipeline_git_ref() -> String {
    option_env!("TRAJFORGE_GIT_REF")
        .map(String::from)
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Builds the manifest by re-reading every shard. Per-shard frame counts,
/// byte counts and hashes are verified against the files, and the total is
/// compared with `expected_frames` (the count the upstream stream emitted)
/// when given.
pub fn build_manifest(
    out_dir: &Path,
    shards: &[Shard],
    filter_config: FilterConfig,
    filter_stats: FilterStats,
    expected_frames: Option<u64>,
) -> Result<Manifest, ExportError> {
    let mut cells: BTreeMap<(Functional, SourceId), (HashSet<String>, u64)> = BTreeMap::new();
    let mut total = 0u64;
    for shard in shards {
        let bytes = fs::read(out_dir.join(&shard.path))?;
        let hash = hex::encode(Sha256::digest(&bytes));
        if hash != shard.content_hash {
            return Err(ExportError::CorruptShard {
                path: shard.path.clone(),
                reason: "content hash differs from export record".into(),
            });
        }
        if bytes.len() as u64 != shard.byte_count {
            return Err(ExportError::CountMismatch {
                what: format!("{} bytes", shard.path),
                expected: shard.byte_count,
                found: bytes.len() as u64,
            });
        }
        let cell = cells.entry((shard.functional, shard.source)).or_default();
        let mut n = 0u64;
        for line in bytes.split(|&b| b == b'\n').filter(|l| !l.is_empty()) {
            let text = std::str::from_utf8(line).map_err(|e| ExportError::CorruptShard {
                path: shard.path.clone(),
                reason: e.to_string(),
            })?;
            let frame = Frame::from_json_line(text).map_err(|e| ExportError::CorruptShard {
                path: shard.path.clone(),
                reason: e.to_string(),
            })?;
            if frame.functional != shard.functional || frame.source != shard.source {
                return Err(ExportError::CorruptShard {
                    path: shard.path.clone(),
                    reason: format!("frame {} belongs to another cell", frame.frame_id),
                });
            }
            if !cell.0.contains(&frame.trajectory_id) {
                cell.0.insert(frame.trajectory_id);
            }
            n += 1;
        }
        if n != shard.frame_count {
            return Err(ExportError::CountMismatch {
                what: format!("{} frames", shard.path),
                expected: shard.frame_count,
                found: n,
            });
        }
        cell.1 += n;
        total += n;
    }
    if let Some(expected) = expected_frames {
        if expected != total {
            return Err(ExportError::CountMismatch {
                what: "exported frames".into(),
                expected,
                found: total,
            });
        }
    }
    let mut shards = shards.to_vec();
    shards.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(Manifest {
        schema_version: SCHEMA_VERSION.into(),
        filter_config,
        filter_stats,
        cells: cells
            .into_iter()
            .map(|((functional, source), (trajs, n))| CellCount {
                functional,
                source,
                n_trajectories: trajs.len() as u64,
                n_frames: n,
            })
            .collect(),
        shards,
        created_at: reproducible_timestamp(),
        pipeline_git_ref: pipeline_git_ref(),
    })
}

impl Manifest {
    /// Canonical bytes: keys sorted at every level, two-space indent,
    /// trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("manifest serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, ExportError> {
        let path = out_dir.join(MANIFEST_FILE);
        write_atomic(&path, self.to_canonical_json().as_bytes())?;
        Ok(path)
    }

    pub fn load(out_dir: &Path) -> Result<Manifest, ExportError> {
        let path = out_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| ExportError::CorruptShard {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    pub fn shards_for(&self, functional: Functional) -> impl Iterator<Item = &Shard> {
        self.shards.iter().filter(move |s| s.functional == functional)
    }
}
