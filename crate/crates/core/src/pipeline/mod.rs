//! Stage orchestration: fetch → transform → filter → export → split/stats/pes.
//!
//! Every stage reads the previous stage's files under `out/.work` and
//! writes its own with atomic renames, finishing with a marker in
//! `.work/state/<stage>.json`. A re-run skips stages whose marker exists
//! and, inside a stage, batches or buckets whose outputs exist, so an
//! interrupted run resumes where it stopped and ends with the same bytes.

pub mod config;
pub mod parallel;

use std::borrow::Cow;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::analysis::{write_stats, StatsAccumulator};
use crate::curate::{run_filters, FilterConfig, FilterStats};
use crate::export::{build_manifest, read_shard, ExportOptions, Manifest, Shard, ShardWriter};
use crate::ingest::{open_stream, IngestError, Offset, RawRecord};
use crate::pes::{fit_pca, formation_energy_per_atom, overlay_from_descriptors, PcaModel, ReferenceEnergies, Soap};
use crate::schema::{ElementSymbol, Frame, Functional, SourceId, Trajectory};
use crate::splits::{balance_sources, check_split, stratified_split, Label, SplitError, TrajMeta};
use crate::transform::{dispatch, DispatchStats, FieldMap, FieldMaps, Reject};
use crate::util::{list_files, stable_hash, sub_seed, write_atomic};

pub use config::{check_dependencies, validate_config, ConfigInvalid, PesConfig, PipelineConfig, Stage, StatsConfig};
pub use parallel::{ordered_map, PoolStats};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigInvalid),
    #[error("stage {stage} failed{}: {cause}", .offset.as_ref().map(|o| format!(" at {o}")).unwrap_or_default())]
    StageFailure {
        stage: Stage,
        offset: Option<String>,
        cause: String,
    },
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::StageFailure { .. } => 3,
        }
    }
}

fn fail(stage: Stage, cause: impl ToString) -> PipelineError {
    PipelineError::StageFailure {
        stage,
        offset: None,
        cause: cause.to_string(),
    }
}

fn fail_at(stage: Stage, offset: String, cause: impl ToString) -> PipelineError {
    PipelineError::StageFailure {
        stage,
        offset: Some(offset),
        cause: cause.to_string(),
    }
}

/// File layout of one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: &Path) -> Layout {
        Layout { out: out.to_path_buf() }
    }
    pub fn work(&self) -> PathBuf {
        self.out.join(".work")
    }
    pub fn marker(&self, stage: Stage) -> PathBuf {
        self.work().join("state").join(format!("{}.json", stage.name()))
    }
    pub fn checkpoint(&self, source: SourceId) -> PathBuf {
        self.work().join("checkpoints").join(format!("{}.json", source.slug()))
    }
    pub fn raw_dir(&self, source: SourceId) -> PathBuf {
        self.work().join("raw").join(source.slug())
    }
    pub fn frames_dir(&self, source: SourceId) -> PathBuf {
        self.work().join("frames").join(source.slug())
    }
    pub fn buckets_dir(&self) -> PathBuf {
        self.work().join("buckets")
    }
    pub fn filtered_dir(&self) -> PathBuf {
        self.work().join("filtered")
    }
    pub fn sort_dir(&self) -> PathBuf {
        self.work().join("sort")
    }
    pub fn rejects(&self) -> PathBuf {
        self.out.join("rejects.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.out.join("run_report.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.out.join(crate::export::MANIFEST_FILE)
    }
    pub fn splits_dir(&self) -> PathBuf {
        self.out.join("splits")
    }
    pub fn stats_dir(&self) -> PathBuf {
        self.out.join("stats")
    }
    pub fn pes_dir(&self) -> PathBuf {
        self.out.join("pes")
    }
}

pub fn stage_done(out: &Path, stage: Stage) -> bool {
    Layout::new(out).marker(stage).is_file()
}

/// What a completed stage recorded about itself.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub records_in: u64,
    pub records_out: u64,
    pub rejected: u64,
    pub dropped: u64,
    pub detail: Value,
}

fn load_marker(layout: &Layout, stage: Stage) -> Option<StageSummary> {
    let text = fs::read_to_string(layout.marker(stage)).ok()?;
    serde_json::from_str(&text).ok()
}

fn save_marker(layout: &Layout, stage: Stage, s: &StageSummary) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(s).expect("summary serializes");
    text.push('\n');
    write_atomic(&layout.marker(stage), text.as_bytes()).map_err(|e| fail(stage, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: Stage,
    pub wall_seconds: f64,
    /// Completed by an earlier run and not re-executed.
    pub skipped: bool,
    pub records_in: u64,
    pub records_out: u64,
    pub rejected: u64,
    pub dropped: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub stages: Vec<StageReport>,
    pub dispatch_stats: Option<DispatchStats>,
    pub filter_stats: Option<FilterStats>,
    pub manifest_path: Option<PathBuf>,
    pub reject_sink_path: Option<PathBuf>,
    /// Every cross-stage count identity that could be checked held.
    pub conservation_ok: bool,
    pub conservation_notes: Vec<String>,
    /// Peak number of batches between producer and consumer in any stage.
    pub peak_batches_in_flight: usize,
}

/// Test and operator hooks around a run.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    /// Return right after this stage's marker is written.
    pub stop_after: Option<Stage>,
    /// Abort with a stage failure after this many batches have been staged
    /// by fetch or transform, leaving partial work behind.
    pub fail_after_batches: Option<usize>,
    /// Re-run stages even if their marker exists.
    pub force: bool,
}

/// Runs the configured stages in order.
pub fn run(cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    run_with(cfg, &RunControl::default())
}

pub fn run_with(cfg: &PipelineConfig, ctrl: &RunControl) -> Result<RunReport, PipelineError> {
    cfg.check_values()?;
    check_dependencies(cfg)?;
    let layout = Layout::new(&cfg.out_dir);
    fs::create_dir_all(layout.work()).map_err(|e| fail(cfg.stages.first().copied().unwrap_or(Stage::Fetch), e))?;
    let mut report = RunReport::default();
    let mut budget = ctrl.fail_after_batches;
    for &stage in &cfg.stages {
        let t0 = Instant::now();
        let (summary, skipped) = match load_marker(&layout, stage) {
            Some(s) if !ctrl.force => (s, true),
            previous => {
                if previous.is_some() {
                    clear_stage_work(cfg, &layout, stage)?;
                }
                log::info!("stage {stage}: starting");
                let mut peak = 0;
                let s = match stage {
                    Stage::Fetch => fetch(cfg, &layout, &mut budget)?,
                    Stage::Transform => transform(cfg, &layout, &mut budget, &mut peak)?,
                    Stage::Filter => filter(cfg, &layout, &mut peak)?,
                    Stage::Export => export(cfg, &layout)?,
                    Stage::Split => split(cfg, &layout)?,
                    Stage::Stats => stats(cfg, &layout, &mut peak)?,
                    Stage::Pes => pes(cfg, &layout, &mut peak)?,
                };
                save_marker(&layout, stage, &s)?;
                invalidate_dependents(&layout, stage)?;
                report.peak_batches_in_flight = report.peak_batches_in_flight.max(peak);
                (s, false)
            }
        };
        log::info!(
            "stage {stage}: in {} out {} rejected {} dropped {}{}",
            summary.records_in,
            summary.records_out,
            summary.rejected,
            summary.dropped,
            if skipped { " (already complete)" } else { "" }
        );
        report.stages.push(StageReport {
            stage,
            wall_seconds: t0.elapsed().as_secs_f64(),
            skipped,
            records_in: summary.records_in,
            records_out: summary.records_out,
            rejected: summary.rejected,
            dropped: summary.dropped,
        });
        if ctrl.stop_after == Some(stage) {
            break;
        }
    }
    finish_report(&layout, &mut report)?;
    Ok(report)
}

/// Removes a stage's intermediate files so a forced re-run starts clean
/// instead of reusing batches from the previous execution.
fn clear_stage_work(cfg: &PipelineConfig, layout: &Layout, stage: Stage) -> Result<(), PipelineError> {
    let dirs: Vec<PathBuf> = match stage {
        Stage::Fetch => vec![layout.work().join("raw"), layout.work().join("checkpoints")],
        Stage::Transform => vec![layout.work().join("frames")],
        Stage::Filter => vec![layout.buckets_dir(), layout.filtered_dir()],
        Stage::Export => vec![layout.sort_dir()],
        Stage::Split | Stage::Stats | Stage::Pes => vec![],
    };
    if stage == Stage::Fetch {
        for p in cfg.sources.iter().filter_map(|s| s.checkpoint_path.as_ref()) {
            match fs::remove_file(p) {
                Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(fail(stage, e)),
                _ => {}
            }
        }
    }
    for d in dirs {
        match fs::remove_dir_all(&d) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(fail(stage, e)),
            _ => {}
        }
    }
    Ok(())
}

/// Drops completion markers of every stage that consumed `stage`'s output.
fn invalidate_dependents(layout: &Layout, stage: Stage) -> Result<(), PipelineError> {
    for s in Stage::ALL.iter().filter(|s| s.depends_on(stage)) {
        match fs::remove_file(layout.marker(*s)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => return Err(fail(stage, e)),
            _ => {}
        }
    }
    Ok(())
}

fn finish_report(layout: &Layout, report: &mut RunReport) -> Result<(), PipelineError> {
    let fetch = load_marker(layout, Stage::Fetch);
    let transform = load_marker(layout, Stage::Transform);
    let filter = load_marker(layout, Stage::Filter);
    let export = load_marker(layout, Stage::Export);
    report.dispatch_stats = transform.as_ref().and_then(|t| serde_json::from_value(t.detail["dispatch"].clone()).ok());
    report.filter_stats = filter.as_ref().and_then(|f| serde_json::from_value(f.detail["filter_stats"].clone()).ok());
    if transform.is_some() {
        report.reject_sink_path = Some(layout.rejects());
    }
    if export.is_some() {
        report.manifest_path = Some(layout.manifest());
    }
    let mut ok = true;
    let mut notes = Vec::new();
    let mut check = |name: &str, a: u64, b: u64| {
        let holds = a == b;
        ok &= holds;
        notes.push(format!("{name}: {a} == {b} {}", if holds { "ok" } else { "VIOLATED" }));
    };
    if let (Some(f), Some(t)) = (&fetch, &transform) {
        check("fetched records == transform input", f.records_out, t.records_in);
    }
    if let Some(d) = &report.dispatch_stats {
        check("transform input == accepted + rejected", d.records_in, d.accepted + d.rejected);
    }
    if let (Some(d), Some(fs)) = (&report.dispatch_stats, &report.filter_stats) {
        check("transformed frames == filter input", d.frames_out, fs.frames_in);
    }
    if let Some(fs) = &report.filter_stats {
        check("filter input == output + dropped", fs.frames_in, fs.frames_out + fs.dropped_frames());
    }
    if let (Some(fs), Some(e)) = (&report.filter_stats, &export) {
        check("filtered frames == exported frames", fs.frames_out, e.records_out);
    }
    report.conservation_ok = ok;
    report.conservation_notes = notes;
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    write_atomic(&layout.report(), text.as_bytes()).map_err(|e| fail(Stage::Export, e))
}

fn consume_budget(budget: &mut Option<usize>, stage: Stage) -> Result<(), PipelineError> {
    if let Some(left) = budget.as_mut() {
        if *left == 0 {
            return Err(fail(stage, "interrupted by run control"));
        }
        *left -= 1;
    }
    Ok(())
}

fn batch_name(start: u64) -> String {
    format!("batch-{start:012}")
}

/// A fetched raw line as staged on disk.
#[derive(Serialize, Deserialize)]
struct StagedRecord<'a> {
    file_index: usize,
    line_index: u64,
    #[serde(borrow)]
    payload: Cow<'a, str>,
}

fn fetch(cfg: &PipelineConfig, layout: &Layout, budget: &mut Option<usize>) -> Result<StageSummary, PipelineError> {
    let stage = Stage::Fetch;
    let mut per_source = BTreeMap::new();
    let mut total = 0;
    for src in &cfg.sources {
        let mut sc = src.clone();
        if sc.checkpoint_path.is_none() {
            sc.checkpoint_path = Some(layout.checkpoint(src.source));
        }
        let ingest_err = |e: IngestError| fail_at(stage, src.source.name().to_string(), e);
        let mut stream = open_stream(&sc).map_err(ingest_err)?;
        let dir = layout.raw_dir(src.source);
        fs::create_dir_all(&dir).map_err(|e| fail(stage, e))?;
        loop {
            let start = stream.records_emitted();
            let at = stream.cursor();
            let batch = stream.next_batch(sc.batch_size).map_err(|e| {
                fail_at(stage, format!("{} file {} line {}", src.source, at.file_index, at.line_index), e)
            })?;
            if batch.is_empty() {
                break;
            }
            consume_budget(budget, stage)?;
            let mut buf = Vec::with_capacity(batch.iter().map(|r| r.payload.len() + 48).sum());
            for r in &batch {
                let staged = StagedRecord {
                    file_index: r.offset.file_index,
                    line_index: r.offset.line_index,
                    payload: String::from_utf8_lossy(&r.payload),
                };
                serde_json::to_writer(&mut buf, &staged).expect("staged record serializes");
                buf.push(b'\n');
            }
            let path = dir.join(format!("{}.jsonl", batch_name(start)));
            write_atomic(&path, &buf).map_err(|e| fail(stage, e))?;
            stream.commit_checkpoint().map_err(ingest_err)?;
        }
        per_source.insert(src.source.name(), stream.records_emitted());
        total += stream.records_emitted();
    }
    Ok(StageSummary {
        records_in: total,
        records_out: total,
        detail: json!({ "records_per_source": per_source }),
        ..Default::default()
    })
}

struct TransformJob {
    source: SourceId,
    input: PathBuf,
    frames: PathBuf,
    rejects: PathBuf,
    stats: PathBuf,
}

fn transform_batch(job: &TransformJob, maps: &FieldMaps) -> Result<DispatchStats, PipelineError> {
    let stage = Stage::Transform;
    if let Ok(text) = fs::read_to_string(&job.stats) {
        if let Ok(stats) = serde_json::from_str(&text) {
            return Ok(stats);
        }
    }
    let input = fs::read_to_string(&job.input).map_err(|e| fail(stage, format!("{}: {e}", job.input.display())))?;
    let mut frames = String::new();
    let mut rejects = String::new();
    let mut stats = DispatchStats::default();
    for (i, line) in input.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let staged: StagedRecord = serde_json::from_str(line)
            .map_err(|e| fail_at(stage, format!("{} line {}", job.input.display(), i), e))?;
        let raw = RawRecord {
            source: job.source,
            payload: staged.payload.as_bytes().to_vec(),
            offset: Offset {
                file_index: staged.file_index,
                line_index: staged.line_index,
            },
        };
        let outcome = dispatch(&raw, maps);
        stats.record(&outcome);
        match outcome {
            Ok(fs) => {
                for f in fs {
                    frames.push_str(&f.to_json_line());
                    frames.push('\n');
                }
            }
            Err(reject) => {
                rejects.push_str(&serde_json::to_string(&reject).expect("reject serializes"));
                rejects.push('\n');
            }
        }
    }
    write_atomic(&job.frames, frames.as_bytes()).map_err(|e| fail(stage, e))?;
    write_atomic(&job.rejects, rejects.as_bytes()).map_err(|e| fail(stage, e))?;
    // Written last: its presence marks the batch as complete.
    let text = serde_json::to_string(&stats).expect("stats serialize");
    write_atomic(&job.stats, text.as_bytes()).map_err(|e| fail(stage, e))?;
    Ok(stats)
}

fn transform(
    cfg: &PipelineConfig,
    layout: &Layout,
    budget: &mut Option<usize>,
    peak: &mut usize,
) -> Result<StageSummary, PipelineError> {
    let stage = Stage::Transform;
    let mut maps = FieldMaps::default();
    let mut jobs = Vec::new();
    for src in &cfg.sources {
        if let Some(path) = &src.field_map {
            let map = FieldMap::load(path).map_err(|e| fail(stage, e))?;
            maps.0.insert(src.source, map);
        }
        let out_dir = layout.frames_dir(src.source);
        fs::create_dir_all(&out_dir).map_err(|e| fail(stage, e))?;
        for input in list_files(&layout.raw_dir(src.source), ".jsonl").map_err(|e| fail(stage, e))? {
            let stem = input.file_stem().expect("listed file").to_string_lossy().into_owned();
            jobs.push(TransformJob {
                source: src.source,
                frames: out_dir.join(format!("{stem}.jsonl")),
                rejects: out_dir.join(format!("{stem}.rejects.jsonl")),
                stats: out_dir.join(format!("{stem}.stats.json")),
                input,
            });
        }
    }
    let rejects_path = layout.rejects();
    let tmp = crate::util::temp_sibling(&rejects_path);
    let mut rejects_out = BufWriter::new(File::create(&tmp).map_err(|e| fail(stage, e))?);
    let mut total = DispatchStats::default();
    let mut fresh = 0usize;
    let pool = ordered_map(
        jobs.iter().map(|j| (j, j.stats.exists())),
        cfg.workers,
        cfg.workers * 2,
        |(job, was_done)| transform_batch(job, &maps).map(|s| (job, s, was_done)),
        |r| {
            let (job, stats, was_done) = r?;
            total.merge(&stats);
            let rejects = fs::read(&job.rejects).map_err(|e| fail(stage, e))?;
            rejects_out.write_all(&rejects).map_err(|e| fail(stage, e))?;
            if !was_done {
                fresh += 1;
                consume_budget(budget, stage)?;
            }
            Ok::<_, PipelineError>(())
        },
    )?;
    *peak = pool.peak_in_flight;
    rejects_out.flush().map_err(|e| fail(stage, e))?;
    drop(rejects_out);
    fs::rename(&tmp, &rejects_path).map_err(|e| fail(stage, e))?;
    log::debug!("transform: {fresh} batches processed, {} reused", jobs.len() - fresh);

    if total.records_in > 0 {
        let rate = total.rejected as f64 / total.records_in as f64;
        if rate > cfg.max_reject_rate {
            return Err(fail(
                stage,
                format!(
                    "reject rate {:.4} ({} of {}) exceeds max_reject_rate {}; see {}",
                    rate,
                    total.rejected,
                    total.records_in,
                    cfg.max_reject_rate,
                    rejects_path.display()
                ),
            ));
        }
    }
    Ok(StageSummary {
        records_in: total.records_in,
        records_out: total.accepted,
        rejected: total.rejected,
        dropped: total.empty,
        detail: json!({ "dispatch": total, "frames_out": total.frames_out }),
    })
}

#[derive(Deserialize)]
struct FrameKey<'a> {
    #[serde(borrow)]
    frame_id: Cow<'a, str>,
    #[serde(borrow)]
    trajectory_id: Cow<'a, str>,
    functional: Functional,
    source: SourceId,
}

fn bucket_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("bucket-{i:05}.jsonl"))
}

/// Hash-partitions transformed frames by trajectory id so that each
/// bucket holds whole trajectories.
fn partition(cfg: &PipelineConfig, layout: &Layout, total_frames: u64) -> Result<usize, PipelineError> {
    let stage = Stage::Filter;
    let dir = layout.buckets_dir();
    let done = dir.join("partition.json");
    if let Ok(text) = fs::read_to_string(&done) {
        if let Some(n) = serde_json::from_str::<Value>(&text).ok().and_then(|v| v["n_buckets"].as_u64()) {
            return Ok(n as usize);
        }
    }
    let n_buckets = (total_frames.div_ceil(cfg.bucket_frames as u64) as usize).clamp(1, 512);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).map_err(|e| fail(stage, e))?;
    let mut writers = (0..n_buckets)
        .map(|i| File::create(bucket_path(&dir, i)).map(|f| BufWriter::with_capacity(1 << 16, f)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| fail(stage, e))?;
    let seed = sub_seed(cfg.seed, "partition");
    for src in &cfg.sources {
        for file in list_files(&layout.frames_dir(src.source), ".jsonl").map_err(|e| fail(stage, e))? {
            if file.to_string_lossy().ends_with(".rejects.jsonl") {
                continue;
            }
            let reader = BufReader::new(File::open(&file).map_err(|e| fail(stage, e))?);
            for line in reader.lines() {
                let line = line.map_err(|e| fail(stage, e))?;
                if line.is_empty() {
                    continue;
                }
                let key: FrameKey = serde_json::from_str(&line).map_err(|e| fail_at(stage, file.display().to_string(), e))?;
                let b = (stable_hash(seed, key.trajectory_id.as_bytes()) % n_buckets as u64) as usize;
                writers[b].write_all(line.as_bytes()).map_err(|e| fail(stage, e))?;
                writers[b].write_all(b"\n").map_err(|e| fail(stage, e))?;
            }
        }
    }
    for w in writers {
        w.into_inner()
            .map_err(|e| fail(stage, e.to_string()))?
            .sync_all()
            .map_err(|e| fail(stage, e))?;
    }
    write_atomic(&done, json!({ "n_buckets": n_buckets }).to_string().as_bytes()).map_err(|e| fail(stage, e))?;
    Ok(n_buckets)
}

fn filter_bucket(i: usize, layout: &Layout, cfg: &FilterConfig) -> Result<FilterStats, PipelineError> {
    let stage = Stage::Filter;
    let out = layout.filtered_dir().join(format!("bucket-{i:05}.jsonl"));
    let stats_path = out.with_extension("stats.json");
    if let Ok(text) = fs::read_to_string(&stats_path) {
        if let Ok(s) = serde_json::from_str(&text) {
            return Ok(s);
        }
    }
    let input = bucket_path(&layout.buckets_dir(), i);
    let reader = BufReader::new(File::open(&input).map_err(|e| fail(stage, e))?);
    let mut frames = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| fail(stage, e))?;
        if !line.is_empty() {
            frames.push(Frame::from_json_line(&line).map_err(|e| fail_at(stage, input.display().to_string(), e))?);
        }
    }
    let (kept, stats) = run_filters(frames, cfg);
    let mut text = String::new();
    for t in &kept {
        for f in t.frames() {
            text.push_str(&f.to_json_line());
            text.push('\n');
        }
    }
    write_atomic(&out, text.as_bytes()).map_err(|e| fail(stage, e))?;
    write_atomic(&stats_path, serde_json::to_string(&stats).expect("stats").as_bytes()).map_err(|e| fail(stage, e))?;
    Ok(stats)
}

fn filter(cfg: &PipelineConfig, layout: &Layout, peak: &mut usize) -> Result<StageSummary, PipelineError> {
    let stage = Stage::Filter;
    let frames_in = load_marker(layout, Stage::Transform)
        .and_then(|m| m.detail["frames_out"].as_u64())
        .unwrap_or(0);
    let n_buckets = partition(cfg, layout, frames_in)?;
    fs::create_dir_all(layout.filtered_dir()).map_err(|e| fail(stage, e))?;
    let mut total = FilterStats::default();
    let pool = ordered_map(
        0..n_buckets,
        cfg.workers,
        cfg.workers * 2,
        |i| filter_bucket(i, layout, &cfg.filter),
        |r| {
            total.merge(&r?);
            Ok::<_, PipelineError>(())
        },
    )?;
    *peak = pool.peak_in_flight;
    if !total.is_conserved() {
        return Err(fail(stage, format!("filter counts do not balance: {total:?}")));
    }
    Ok(StageSummary {
        records_in: total.frames_in,
        records_out: total.frames_out,
        dropped: total.dropped_frames(),
        detail: json!({ "filter_stats": total, "filter_config": cfg.filter, "n_buckets": n_buckets }),
        ..Default::default()
    })
}

fn export(cfg: &PipelineConfig, layout: &Layout) -> Result<StageSummary, PipelineError> {
    let stage = Stage::Export;
    let marker = load_marker(layout, Stage::Filter).ok_or_else(|| fail(stage, "filter outputs missing"))?;
    let filter_stats: FilterStats =
        serde_json::from_value(marker.detail["filter_stats"].clone()).map_err(|e| fail(stage, e))?;
    let filter_config: FilterConfig =
        serde_json::from_value(marker.detail["filter_config"].clone()).map_err(|e| fail(stage, e))?;
    let opts = ExportOptions {
        max_frames_per_shard: cfg.max_frames_per_shard,
        sort_run_frames: cfg.sort_run_frames,
        columnar: cfg.columnar,
    };
    let _ = fs::remove_dir_all(layout.sort_dir());
    let mut writer = ShardWriter::new(&layout.out, &layout.sort_dir(), opts).map_err(|e| fail(stage, e))?;
    let mut n = 0u64;
    for file in list_files(&layout.filtered_dir(), ".jsonl").map_err(|e| fail(stage, e))? {
        let reader = BufReader::new(File::open(&file).map_err(|e| fail(stage, e))?);
        for line in reader.lines() {
            let line = line.map_err(|e| fail(stage, e))?;
            if line.is_empty() {
                continue;
            }
            let key: FrameKey = serde_json::from_str(&line).map_err(|e| fail_at(stage, file.display().to_string(), e))?;
            let (functional, source, id) = (key.functional, key.source, key.frame_id.into_owned());
            writer.push_line(functional, source, id, line).map_err(|e| fail(stage, e))?;
            n += 1;
        }
    }
    let shards = writer.finish().map_err(|e| fail(stage, e))?;
    let manifest = build_manifest(&layout.out, &shards, filter_config, filter_stats, Some(filter_stats.frames_out))
        .map_err(|e| fail(stage, e))?;
    manifest.write(&layout.out).map_err(|e| fail(stage, e))?;
    let exported: u64 = manifest.cells.iter().map(|c| c.n_frames).sum();
    Ok(StageSummary {
        records_in: n,
        records_out: exported,
        dropped: n - exported,
        detail: json!({ "shards": shards.len() }),
        ..Default::default()
    })
}

fn load_manifest(layout: &Layout, stage: Stage) -> Result<Manifest, PipelineError> {
    Manifest::load(&layout.out).map_err(|e| fail(stage, e))
}

/// Calls `f` with every trajectory stored in `shards`, which must belong
/// to one (functional, source) cell and be in path order. Shards are
/// sorted by frame id, so a trajectory's frames are contiguous.
pub fn for_each_trajectory(
    out: &Path,
    shards: &[&Shard],
    mut f: impl FnMut(Trajectory) -> Result<(), String>,
) -> Result<(), String> {
    let mut closed: HashSet<String> = HashSet::new();
    let mut current: Vec<Frame> = Vec::new();
    let mut flush = |current: &mut Vec<Frame>, closed: &mut HashSet<String>| -> Result<(), String> {
        if current.is_empty() {
            return Ok(());
        }
        let id = current[0].trajectory_id.clone();
        if !closed.insert(id.clone()) {
            return Err(format!("trajectory {id} is not contiguous in the export"));
        }
        let t = Trajectory::from_frames(std::mem::take(current)).map_err(|e| e.to_string())?;
        f(t)
    };
    for shard in shards {
        for frame in read_shard(out, shard).map_err(|e| e.to_string())? {
            let frame = frame.map_err(|e| e.to_string())?;
            if current.first().is_some_and(|c| c.trajectory_id != frame.trajectory_id) {
                flush(&mut current, &mut closed)?;
            }
            current.push(frame);
        }
    }
    flush(&mut current, &mut closed)
}

fn cells_of(manifest: &Manifest) -> BTreeMap<(Functional, SourceId), Vec<&Shard>> {
    let mut cells: BTreeMap<(Functional, SourceId), Vec<&Shard>> = BTreeMap::new();
    for s in &manifest.shards {
        cells.entry((s.functional, s.source)).or_default().push(s);
    }
    cells
}

fn split(cfg: &PipelineConfig, layout: &Layout) -> Result<StageSummary, PipelineError> {
    let stage = Stage::Split;
    let manifest = load_manifest(layout, stage)?;
    let dir = layout.splits_dir();
    fs::create_dir_all(&dir).map_err(|e| fail(stage, e))?;
    let mut by_functional: BTreeMap<Functional, Vec<TrajMeta>> = BTreeMap::new();
    for ((functional, _), shards) in cells_of(&manifest) {
        let metas = by_functional.entry(functional).or_default();
        for_each_trajectory(&layout.out, &shards, |t| {
            metas.push(TrajMeta::from(&t));
            Ok(())
        })
        .map_err(|e| fail(stage, e))?;
    }
    let mut summary = serde_json::Map::new();
    let (mut n_in, mut n_out) = (0u64, 0u64);
    for functional in Functional::ALL {
        let path = dir.join(format!("{}.jsonl", functional.name()));
        let Some(metas) = by_functional.get_mut(&functional) else {
            let _ = fs::remove_file(&path);
            continue;
        };
        metas.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
        n_in += metas.len() as u64;
        let selected = balance_sources(metas, &cfg.split).map_err(|e| fail_at(stage, functional.name().into(), e))?;
        let mut per_source: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &selected {
            *per_source.entry(t.source.name()).or_default() += 1;
        }
        let entry = match stratified_split(&selected, &cfg.split) {
            Ok(a) => {
                check_split(&selected, &a).map_err(|e| fail_at(stage, functional.name().into(), e))?;
                a.write(&path).map_err(|e| fail(stage, e))?;
                n_out += a.labels.len() as u64;
                json!({
                    "status": "ok",
                    "n_trajectories": selected.len(),
                    "n_available": metas.len(),
                    "per_source": per_source,
                    "n_train": a.count(Label::Train),
                    "n_test": a.count(Label::Test),
                    "reassigned_to_train": a.reassigned,
                })
            }
            Err(SplitError::Infeasible(why)) => {
                let _ = fs::remove_file(&path);
                json!({
                    "status": "infeasible",
                    "reason": why,
                    "n_trajectories": selected.len(),
                    "n_available": metas.len(),
                    "per_source": per_source,
                })
            }
            Err(e) => return Err(fail_at(stage, functional.name().into(), e)),
        };
        summary.insert(functional.name().into(), entry);
    }
    let summary = json!({
        "seed": cfg.split.seed,
        "test_fraction": cfg.split.test_fraction,
        "target_size": cfg.split.target_size,
        "functionals": summary,
    });
    let mut text = serde_json::to_string_pretty(&summary).expect("json");
    text.push('\n');
    write_atomic(&dir.join("summary.json"), text.as_bytes()).map_err(|e| fail(stage, e))?;
    Ok(StageSummary {
        records_in: n_in,
        records_out: n_out,
        dropped: n_in - n_out,
        detail: summary,
        ..Default::default()
    })
}

fn stats(cfg: &PipelineConfig, layout: &Layout, peak: &mut usize) -> Result<StageSummary, PipelineError> {
    let stage = Stage::Stats;
    let manifest = load_manifest(layout, stage)?;
    let cells: Vec<((Functional, SourceId), Vec<&Shard>)> = cells_of(&manifest).into_iter().collect();
    let mut per_functional: BTreeMap<Functional, (StatsAccumulator, BTreeSet<SourceId>)> = BTreeMap::new();
    let profile_bins = cfg.stats.profile_bins;
    let pool = ordered_map(
        cells.iter(),
        cfg.workers,
        cfg.workers * 2,
        |((functional, source), shards)| {
            let mut acc = StatsAccumulator::new(profile_bins);
            for_each_trajectory(&layout.out, shards, |t| acc.push(&t).map_err(|e| e.to_string()))
                .map(|()| (*functional, *source, acc))
        },
        |r| {
            let (functional, source, acc) = r.map_err(|e| fail(stage, e))?;
            let entry = per_functional
                .entry(functional)
                .or_insert_with(|| (StatsAccumulator::new(profile_bins), BTreeSet::new()));
            entry.0.merge(&acc);
            entry.1.insert(source);
            Ok::<_, PipelineError>(())
        },
    )?;
    *peak = pool.peak_in_flight;
    let mut n = 0;
    for (functional, (acc, sources)) in &per_functional {
        let dir = layout.stats_dir().join(functional.name());
        let extra = json!({
            "functional": functional,
            "sources": sources,
        });
        write_stats(&dir, acc, cfg.stats.length_bins, extra).map_err(|e| fail(stage, e))?;
        n += acc.n_trajectories();
    }
    Ok(StageSummary {
        records_in: n,
        records_out: n,
        detail: json!({ "functionals": per_functional.keys().collect::<Vec<_>>() }),
        ..Default::default()
    })
}

fn csv_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
}

fn pes(cfg: &PipelineConfig, layout: &Layout, peak: &mut usize) -> Result<StageSummary, PipelineError> {
    let stage = Stage::Pes;
    let pc: &PesConfig = &cfg.pes;
    let manifest = load_manifest(layout, stage)?;
    let elements: BTreeSet<ElementSymbol> = pc.elements.iter().copied().collect();
    let species: Vec<ElementSymbol> = elements.iter().copied().collect();
    let soap = Soap::new(pc.soap, &species).map_err(|e| fail(stage, e))?;
    let refs = match &pc.refs {
        Some(p) => {
            let all = ReferenceEnergies::load(p).map_err(|e| fail(stage, e))?;
            Some(all.for_functional(pc.functional).cloned().ok_or_else(|| {
                fail(stage, format!("{} has no table for {}", p.display(), pc.functional))
            })?)
        }
        None => None,
    };

    let mut trajs = Vec::new();
    for ((functional, _), shards) in cells_of(&manifest) {
        if functional != pc.functional {
            continue;
        }
        for_each_trajectory(&layout.out, &shards, |t| {
            if t.composition().elements().all(|e| elements.contains(&e)) {
                trajs.push(t);
            }
            Ok(())
        })
        .map_err(|e| fail(stage, e))?;
    }
    trajs.sort_by(|a, b| a.id().cmp(b.id()));

    let mut descriptors: Vec<Vec<Vec<f64>>> = Vec::with_capacity(trajs.len());
    let pool = ordered_map(
        trajs.iter(),
        cfg.workers,
        cfg.workers * 2,
        |t| t.frames().iter().map(|f| soap.descriptor(f)).collect::<Result<Vec<_>, _>>(),
        |r| {
            descriptors.push(r.map_err(|e| fail(stage, e))?);
            Ok::<_, PipelineError>(())
        },
    )?;
    *peak = pool.peak_in_flight;
    let rows: Vec<Vec<f64>> = descriptors.iter().flatten().cloned().collect();

    let (model, fit_on) = match &pc.fit_on {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| fail(stage, format!("{}: {e}", path.display())))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| fail(stage, e))?;
            let model: PcaModel = serde_json::from_value(v["pca"].clone()).map_err(|e| fail(stage, e))?;
            (model, path.display().to_string())
        }
        None => {
            if rows.len() < pc.components {
                return Err(fail(
                    stage,
                    format!("{} frames in the {:?} subset, need at least {}", rows.len(), elements, pc.components),
                ));
            }
            (fit_pca(&rows, pc.components).map_err(|e| fail(stage, e))?, "self".to_string())
        }
    };
    if model.rank_deficient {
        log::warn!("pes: only {} non-degenerate components", model.k());
    }

    let dir = layout.pes_dir();
    fs::create_dir_all(&dir).map_err(|e| fail(stage, e))?;
    let pcs: Vec<String> = (1..=model.k()).map(|i| format!("pc{i}")).collect();
    let mut points = format!("frame_id,trajectory_id,{},formation_energy_ev_per_atom\n", pcs.join(","));
    for (t, ds) in trajs.iter().zip(&descriptors) {
        for (f, d) in t.frames().iter().zip(ds) {
            let coords = model.project(d).map_err(|e| fail(stage, e))?;
            let ef = match &refs {
                Some(r) => format!("{}", formation_energy_per_atom(f, r).map_err(|e| fail_at(stage, f.frame_id.clone(), e))?),
                None => String::new(),
            };
            let _ = writeln!(points, "{},{},{},{}", f.frame_id, f.trajectory_id, csv_floats(&coords), ef);
        }
    }
    write_atomic(&dir.join("points.csv"), points.as_bytes()).map_err(|e| fail(stage, e))?;

    let seed = sub_seed(cfg.seed, "pes-sampling");
    let mut order: Vec<usize> = (0..trajs.len()).collect();
    order.sort_by_key(|&i| (stable_hash(seed, trajs[i].id().as_bytes()), trajs[i].id().to_string()));
    order.truncate(pc.overlay_trajectories);
    order.sort();
    let mut overlay = format!("trajectory_id,point_index,frame_id,{},marker\n", pcs.join(","));
    for i in order {
        let line = overlay_from_descriptors(&trajs[i], &descriptors[i], &model).map_err(|e| fail(stage, e))?;
        for (k, p) in line.points.iter().enumerate() {
            let marker = match p.marker {
                Some(crate::pes::Marker::Initial) => "initial",
                Some(crate::pes::Marker::Final) => "final",
                Some(crate::pes::Marker::Both) => "initial+final",
                None => "",
            };
            let _ = writeln!(overlay, "{},{k},{},{},{marker}", line.trajectory_id, p.frame_id, csv_floats(&p.coords));
        }
    }
    write_atomic(&dir.join("trajectories.csv"), overlay.as_bytes()).map_err(|e| fail(stage, e))?;

    let model_json = json!({
        "functional": pc.functional,
        "elements": species,
        "soap": pc.soap,
        "descriptor_dimension": soap.dimension(),
        "radial_basis": "orthonormalized polynomial (r_cut - r)^(a+2), a = 1..n_max",
        "sigma_note": "Gaussian width is not fixed by the method description; value is configurable",
        "fit_on": fit_on,
        "n_frames": rows.len(),
        "n_trajectories": trajs.len(),
        "pca": model,
    });
    let mut text = serde_json::to_string_pretty(&model_json).expect("json");
    text.push('\n');
    write_atomic(&dir.join("model.json"), text.as_bytes()).map_err(|e| fail(stage, e))?;
    Ok(StageSummary {
        records_in: rows.len() as u64,
        records_out: rows.len() as u64,
        detail: json!({ "n_trajectories": trajs.len() }),
        ..Default::default()
    })
}

/// Verifies that the rejects file holds well-formed reject records.
pub fn read_rejects(path: &Path) -> Result<Vec<Reject>, String> {
    let text = fs::read_to_string(path).map_err(|e| e.to_string())?;
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}
