//! Shared helpers for integration tests: synthetic data, independent
//! reference implementations and output-tree comparison.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};
use trajforge::curate::{FilterConfig, FilterStats};
use trajforge::ingest::{Offset, RawRecord};
use trajforge::pes::SoapParams;
use trajforge::pipeline::PipelineConfig;
use trajforge::schema::{canonical_frame_id, canonical_trajectory_id, ElementSymbol, Frame, Functional, SourceId};
use trajforge::transform::{dispatch, FieldMaps};

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// The committed fixture config, writing to `out`.
pub fn fixture_config(out: &Path, workers: usize) -> PipelineConfig {
    let dir = fixture_dir();
    let text = fs::read_to_string(dir.join("pipeline.json")).unwrap();
    let mut cfg = PipelineConfig::parse(&text, &dir).unwrap();
    cfg.out_dir = out.to_path_buf();
    cfg.workers = workers;
    cfg
}

/// Every output file except the work area and the run report, keyed by
/// relative path.
pub fn output_tree(out: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            if rel == ".work" || rel == "run_report.json" {
                continue;
            }
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                acc.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(out, out, &mut acc);
    acc
}

/// Names the first differing file, for readable assertion failures.
pub fn first_difference(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Option<String> {
    let keys: BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .find(|k| a.get(*k) != b.get(*k))
        .map(|k| format!("{k}: {} vs {} bytes", a.get(k).map_or(0, Vec::len), b.get(k).map_or(0, Vec::len)))
}

pub fn cubic(a: f64) -> [[f64; 3]; 3] {
    [[a, 0.0, 0.0], [0.0, a, 0.0], [0.0, 0.0, a]]
}

#[allow(clippy::too_many_arguments)]
pub fn frame(
    source: SourceId,
    record: &str,
    number: i64,
    step: i64,
    species: &[&str],
    positions: Vec<[f64; 3]>,
    energy: Option<f64>,
    forces: Option<Vec<[f64; 3]>>,
) -> Frame {
    Frame {
        frame_id: canonical_frame_id(source, record, number, step),
        trajectory_id: canonical_trajectory_id(source, record),
        relaxation_step: step,
        relaxation_number: number,
        lattice: cubic(6.0),
        species: species.iter().map(|s| s.to_string()).collect(),
        positions,
        energy,
        forces,
        stress: None,
        functional: Functional::Pbe,
        source,
        source_record_id: record.to_string(),
        space_group: None,
    }
}

// ---------------------------------------------------------------------------
// Filter corpus with planted violations and a brute-force reference filter.

/// Last-step energy gaps around the 0.02 eV threshold.
pub const ENERGY_GAPS: [f64; 7] = [0.0, 0.005, 0.0199, 0.02, 0.020000001, 0.0201, 0.5];
/// Final force rows with norms around the 0.2 eV/Å threshold.
pub const FINAL_FORCES: [[f64; 3]; 7] = [
    [0.0, 0.0, 0.0],
    [0.1, 0.0, 0.0],
    [0.0, 0.1999, 0.0],
    [0.0, 0.12, 0.16],
    [0.2, 0.0, 0.0],
    [0.0, 0.0, 0.2001],
    [0.6, 0.8, 0.0],
];

/// `n_traj` trajectories with random lengths, stage numbers and atom
/// counts; each draws a last energy gap, a final force row and a chance of
/// frames missing targets. Frames are returned shuffled.
pub fn planted_filter_corpus(seed: u64, n_traj: usize) -> Vec<Frame> {
    let mut rng = StdRng::seed_from_u64(seed);
    let elements = ["Fe", "Cu", "O", "Si", "Li", "Ni"];
    let mut frames = Vec::new();
    for t in 0..n_traj {
        let source = [SourceId::MaterialsProject, SourceId::Alexandria, SourceId::Oqmd][t % 3];
        let record = format!("syn-{t:05}");
        let n_atoms = rng.random_range(1..=4usize);
        let species: Vec<&str> = (0..n_atoms).map(|_| elements[rng.random_range(0..elements.len())]).collect();
        let numbers: Vec<i64> = if source == SourceId::Oqmd { vec![1, 2, 3] } else { vec![1] };
        let mut keys = Vec::new();
        for &num in &numbers {
            let len = rng.random_range(1..=5i64);
            keys.extend((0..len).map(|s| (num, s)));
        }
        let gap = ENERGY_GAPS[rng.random_range(0..ENERGY_GAPS.len())] * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        let final_row = FINAL_FORCES[rng.random_range(0..FINAL_FORCES.len())];
        let p_missing = if rng.random_bool(0.3) { 0.25 } else { 0.0 };
        let base = -3.0 * n_atoms as f64;
        let k = keys.len();
        for (i, &(num, step)) in keys.iter().enumerate() {
            let from_end = (k - 1 - i) as i32;
            let energy = match from_end {
                0 => base,
                1 => base + gap,
                _ => base + gap + 0.3 * 1.7f64.powi(from_end - 1),
            };
            let mut forces: Vec<[f64; 3]> = (0..n_atoms)
                .map(|_| [rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0])
                .collect();
            if from_end == 0 {
                forces[0] = final_row;
            } else {
                forces[0] = [0.5 + 0.1 * from_end as f64, 0.0, 0.0];
            }
            let positions = (0..n_atoms).map(|a| [1.4 * a as f64 + rng.random_range(0.0..0.1), 1.0, 1.0]).collect();
            let mut f = frame(source, &record, num, step, &species, positions, Some(energy), Some(forces));
            if rng.random_bool(p_missing) {
                if rng.random_bool(0.5) {
                    f.energy = None;
                } else {
                    f.forces = None;
                }
            }
            frames.push(f);
        }
    }
    // Fisher-Yates with the same generator keeps the corpus reproducible.
    for i in (1..frames.len()).rev() {
        let j = rng.random_range(0..=i);
        frames.swap(i, j);
    }
    frames
}

fn frame_ok(f: &Frame) -> bool {
    let n = f.species.len();
    let finite = |v: &[[f64; 3]]| v.iter().flatten().all(|x| x.is_finite());
    let l = &f.lattice;
    let det = l[0][0] * (l[1][1] * l[2][2] - l[1][2] * l[2][1]) - l[0][1] * (l[1][0] * l[2][2] - l[1][2] * l[2][0])
        + l[0][2] * (l[1][0] * l[2][1] - l[1][1] * l[2][0]);
    n > 0
        && !f.frame_id.is_empty()
        && f.positions.len() == n
        && f.forces.as_ref().is_some_and(|x| x.len() == n && finite(x))
        && f.energy.is_some_and(f64::is_finite)
        && f.stress.as_ref().is_none_or(|s| finite(s))
        && finite(&f.positions)
        && finite(l)
        && det > 0.0
        && f.species.iter().all(|s| trajforge::schema::ElementSymbol::parse(s).is_some())
        && f.relaxation_step >= 0
        && f.relaxation_number >= 1
}

/// Straightforward restatement of the filter rules. Returns kept frames per
/// trajectory in step order, plus counts.
pub fn reference_filter(frames: &[Frame], cfg: &FilterConfig) -> (BTreeMap<String, Vec<Frame>>, FilterStats) {
    let mut stats = FilterStats { frames_in: frames.len() as u64, ..Default::default() };
    let mut groups: Vec<(String, Vec<Frame>)> = Vec::new();
    for f in frames {
        if f.energy.is_none() || f.forces.is_none() {
            stats.frames_dropped_missing_targets += 1;
            continue;
        }
        if !frame_ok(f) {
            stats.frames_dropped_schema += 1;
            continue;
        }
        match groups.iter_mut().find(|(id, _)| *id == f.trajectory_id) {
            Some((_, g)) => g.push(f.clone()),
            None => groups.push((f.trajectory_id.clone(), vec![f.clone()])),
        }
    }
    let mut kept = BTreeMap::new();
    for (id, mut g) in groups {
        g.sort_by_key(|f| (f.relaxation_number, f.relaxation_step));
        let n = g.len();
        let converged = n < 2 || (g[n - 2].energy.unwrap() - g[n - 1].energy.unwrap()).abs() <= cfg.energy_convergence_threshold;
        let last_max = g[n - 1]
            .forces
            .as_ref()
            .unwrap()
            .iter()
            .map(|r| (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt())
            .fold(0.0, f64::max);
        if !converged {
            stats.trajectories_dropped_convergence += 1;
            stats.frames_dropped_convergence += n as u64;
        } else if last_max > cfg.final_force_threshold {
            stats.trajectories_dropped_final_force += 1;
            stats.frames_dropped_final_force += n as u64;
        } else {
            stats.frames_out += n as u64;
            kept.insert(id, g);
        }
    }
    (kept, stats)
}

// ---------------------------------------------------------------------------
// Brute-force export of the fixture corpus, used to produce and check the
// golden manifest.

pub struct ReferenceExport {
    pub manifest: String,
    /// Shard bytes keyed by relative path.
    pub shards: BTreeMap<String, Vec<u8>>,
}

fn json_name<T: serde::Serialize>(v: &T) -> serde_json::Value {
    serde_json::to_value(v).unwrap()
}

/// Reads every fixture line directly, converts it with the per-source
/// rules, filters with [`reference_filter`], sorts each cell in memory and
/// cuts shards, without any of the pipeline machinery.
pub fn reference_export(cfg: &PipelineConfig) -> ReferenceExport {
    let maps = FieldMaps::default();
    let mut frames = Vec::new();
    for src in &cfg.sources {
        let mut files: Vec<PathBuf> = fs::read_dir(&src.location)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "jsonl"))
            .collect();
        files.sort();
        for (fi, file) in files.iter().enumerate() {
            let text = fs::read_to_string(file).unwrap();
            for (li, line) in text.split('\n').enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let raw = RawRecord {
                    source: src.source,
                    payload: line.as_bytes().to_vec(),
                    offset: Offset { file_index: fi, line_index: li as u64 },
                };
                if let Ok(fs) = dispatch(&raw, &maps) {
                    frames.extend(fs);
                }
            }
        }
    }
    let (kept, stats) = reference_filter(&frames, &cfg.filter);

    let mut cells: BTreeMap<(Functional, SourceId), Vec<(String, String, String)>> = BTreeMap::new();
    for g in kept.values() {
        for f in g {
            cells
                .entry((f.functional, f.source))
                .or_default()
                .push((f.frame_id.clone(), f.trajectory_id.clone(), f.to_json_line()));
        }
    }
    let mut shards = BTreeMap::new();
    let mut shard_entries = Vec::new();
    let mut cell_entries = Vec::new();
    for ((functional, source), mut rows) in cells {
        rows.sort();
        rows.dedup();
        let trajs: BTreeSet<&String> = rows.iter().map(|r| &r.1).collect();
        cell_entries.push(serde_json::json!({
            "functional": json_name(&functional),
            "source": json_name(&source),
            "n_trajectories": trajs.len(),
            "n_frames": rows.len(),
        }));
        for (i, chunk) in rows.chunks(cfg.max_frames_per_shard).enumerate() {
            let mut bytes = Vec::new();
            for (_, _, line) in chunk {
                bytes.extend_from_slice(line.as_bytes());
                bytes.push(b'\n');
            }
            let path = format!("{}/{}/shard-{i:05}.jsonl", functional.name(), source.name());
            shard_entries.push(serde_json::json!({
                "path": path,
                "functional": json_name(&functional),
                "source": json_name(&source),
                "frame_count": chunk.len(),
                "byte_count": bytes.len(),
                "content_hash": hex::encode(Sha256::digest(&bytes)),
            }));
            shards.insert(path, bytes);
        }
    }
    shard_entries.sort_by(|a, b| a["path"].as_str().cmp(&b["path"].as_str()));
    let manifest = serde_json::json!({
        "schema_version": "1.0",
        "filter_config": json_name(&cfg.filter),
        "filter_stats": json_name(&stats),
        "cells": cell_entries,
        "shards": shard_entries,
        "created_at": trajforge::export::reproducible_timestamp(),
        "pipeline_git_ref": trajforge::export::pipeline_git_ref(),
    });
    let mut text = serde_json::to_string_pretty(&manifest).unwrap();
    text.push('\n');
    ReferenceExport { manifest: text, shards }
}

// ---------------------------------------------------------------------------
// Large synthetic source snapshots.

/// Writes `n_tasks` Materials Project task records, each with
/// `steps_per_task` ionic steps of `atoms` atoms, across `n_files` files.
/// Returns the number of frames the corpus expands to.
pub fn write_mp_snapshot(dir: &Path, n_tasks: usize, steps_per_task: usize, atoms: usize, n_files: usize, seed: u64) -> u64 {
    fs::create_dir_all(dir).unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let elements = ["Fe", "Cu", "Al", "Ni", "O", "Si", "Li", "Mg"];
    let per_file = n_tasks.div_ceil(n_files);
    let mut written = 0;
    for fi in 0..n_files {
        let file = fs::File::create(dir.join(format!("tasks-{fi:04}.jsonl"))).unwrap();
        let mut w = std::io::BufWriter::new(file);
        for t in (fi * per_file)..((fi + 1) * per_file).min(n_tasks) {
            let species: Vec<&str> = (0..atoms).map(|_| elements[rng.random_range(0..elements.len())]).collect();
            let a = 2.5 * (atoms as f64).cbrt() + 1.5;
            let mut line = String::with_capacity(steps_per_task * (160 + atoms * 110));
            line.push_str(&format!("{{\"task_id\":\"mp-{t}\",\"functional\":\"GGA\",\"ionic_steps\":["));
            for s in 0..steps_per_task {
                if s > 0 {
                    line.push(',');
                }
                let decay = 0.5f64.powi(s as i32);
                let energy = -4.0 * atoms as f64 - 0.01 * (t % 13) as f64 + 0.3 * decay;
                let pos: Vec<String> = (0..atoms)
                    .map(|i| {
                        let x = (i as f64 * 0.37).fract() * a + rng.random_range(-0.1..0.1) * decay;
                        let y = (i as f64 * 0.61).fract() * a + rng.random_range(-0.1..0.1) * decay;
                        let z = (i as f64 * 0.83).fract() * a;
                        format!("[{x},{y},{z}]")
                    })
                    .collect();
                let frc: Vec<String> = (0..atoms)
                    .map(|_| format!("[{},{},{}]", rng.random_range(-0.1..0.1) * decay, rng.random_range(-0.1..0.1) * decay, 0.0))
                    .collect();
                line.push_str(&format!(
                    "{{\"structure\":{{\"lattice\":[[{a},0,0],[0,{a},0],[0,0,{a}]],\"species\":{},\"positions\":[{}]}},\"energy\":{energy},\"forces\":[{}]}}",
                    serde_json::to_string(&species).unwrap(),
                    pos.join(","),
                    frc.join(",")
                ));
            }
            line.push_str("]}\n");
            w.write_all(line.as_bytes()).unwrap();
            written += steps_per_task as u64;
        }
        w.flush().unwrap();
    }
    written
}

// ---------------------------------------------------------------------------
// Linear algebra oracle.

/// One-sided Jacobi SVD of a row-major `m × n` matrix. Returns singular
/// values (descending) and the matching right singular vectors.
pub fn jacobi_svd(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let m = rows.len();
    let n = rows[0].len();
    // Work on columns of A and accumulate V.
    let mut a: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| rows[i][j]).collect()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha: f64 = a[p].iter().map(|x| x * x).sum();
                let beta: f64 = a[q].iter().map(|x| x * x).sum();
                let gamma: f64 = a[p].iter().zip(&a[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-300 || gamma.abs() <= 1e-17 * (alpha * beta).sqrt() {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for k in 0..m {
                    let (x, y) = (a[p][k], a[q][k]);
                    a[p][k] = c * x - s * y;
                    a[q][k] = s * x + c * y;
                }
                for k in 0..n {
                    let (x, y) = (v[p][k], v[q][k]);
                    v[p][k] = c * x - s * y;
                    v[q][k] = s * x + c * y;
                }
            }
        }
        if off < 1e-15 {
            break;
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|j| (a[j].iter().map(|x| x * x).sum::<f64>().sqrt(), v[j].clone()))
        .collect();
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0));
    pairs.into_iter().unzip()
}

// ---------------------------------------------------------------------------
// Random structures for descriptor tests.

pub fn random_rotation(rng: &mut StdRng) -> [[f64; 3]; 3] {
    // Uniform random unit quaternion.
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let tau = std::f64::consts::TAU;
    let (a, b, c, d) = (
        (1.0 - u1).sqrt() * (tau * u2).sin(),
        (1.0 - u1).sqrt() * (tau * u2).cos(),
        u1.sqrt() * (tau * u3).sin(),
        u1.sqrt() * (tau * u3).cos(),
    );
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a - b * b + c * c - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ]
}

pub fn rotate(r: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        r[0][0] * v[0] + r[0][1] * v[1] + r[0][2] * v[2],
        r[1][0] * v[0] + r[1][1] * v[1] + r[1][2] * v[2],
        r[2][0] * v[0] + r[2][1] * v[1] + r[2][2] * v[2],
    ]
}

/// A periodic structure of `n` atoms from `species` in a sheared cell
/// with atoms kept at least 1.2 Å apart.
pub fn random_structure(rng: &mut StdRng, n: usize, species: &[&str]) -> Frame {
    let a = 3.0 + rng.random_range(0.0..2.5);
    let lattice = [
        [a, 0.0, 0.0],
        [rng.random_range(-0.5..0.5), a * rng.random_range(0.9..1.2), 0.0],
        [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), a * rng.random_range(0.9..1.2)],
    ];
    let mut positions: Vec<[f64; 3]> = Vec::new();
    while positions.len() < n {
        let (u, v, w): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
        let p = [
            u * lattice[0][0] + v * lattice[1][0] + w * lattice[2][0],
            u * lattice[0][1] + v * lattice[1][1] + w * lattice[2][1],
            u * lattice[0][2] + v * lattice[1][2] + w * lattice[2][2],
        ];
        let clear = positions.iter().all(|q| {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() > 1.2
        });
        if clear || positions.len() + 1 > n + 50 {
            positions.push(p);
        }
    }
    let sp: Vec<&str> = (0..n).map(|_| species[rng.random_range(0..species.len())]).collect();
    let mut f = frame(SourceId::Alexandria, "rand", 1, 0, &sp, positions, Some(-1.0), None);
    f.lattice = lattice;
    f
}

// ---------------------------------------------------------------------------
// Quadrature and SOAP oracles.

/// Gauss-Legendre nodes and weights on [-1, 1] by Newton iteration on P_n.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let (p, dp) = if n == 1 { (z, 1.0) } else { (p1, n as f64 * (z * p1 - p0) / (z * z - 1.0)) };
            let dz = p / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                let (mut q0, mut q1) = (1.0, z);
                for k in 2..=n {
                    let q2 = ((2 * k - 1) as f64 * z * q1 - (k - 1) as f64 * q0) / k as f64;
                    q0 = q1;
                    q1 = q2;
                }
                let d = if n == 1 { 1.0 } else { n as f64 * (z * q1 - q0) / (z * z - 1.0) };
                x[i] = z;
                w[i] = 2.0 / ((1.0 - z * z) * d * d);
                break;
            }
        }
    }
    (x, w)
}

/// Composite rule on [a, b].
pub fn composite(a: f64, b: f64, panels: usize, order: usize) -> Vec<(f64, f64)> {
    let (x, w) = gauss_legendre(order);
    let h = (b - a) / panels as f64;
    let mut out = Vec::new();
    for p in 0..panels {
        let lo = a + p as f64 * h;
        for (xi, wi) in x.iter().zip(&w) {
            out.push((lo + 0.5 * h * (xi + 1.0), 0.5 * h * wi));
        }
    }
    out
}

pub fn legendre(l: usize, u: f64) -> f64 {
    let (mut p0, mut p1) = (1.0, u);
    if l == 0 {
        return 1.0;
    }
    for k in 2..=l {
        let p2 = ((2 * k - 1) as f64 * u * p1 - (k - 1) as f64 * p0) / k as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// Löwdin-orthonormal polynomial basis from the closed-form overlap of
/// (1 - r/r_c)^p, p = 3..n_max+2, with S^{-1/2} from a Jacobi SVD.
pub struct OracleBasis {
    r_cut: f64,
    norms: Vec<f64>,
    transform: Vec<Vec<f64>>,
}

impl OracleBasis {
    pub fn new(r_cut: f64, n_max: usize) -> Self {
        let p = |a: usize| (a + 3) as f64;
        let moment = |s: f64| r_cut.powi(3) * 2.0 / ((s + 1.0) * (s + 2.0) * (s + 3.0));
        let norms: Vec<f64> = (0..n_max).map(|a| moment(2.0 * p(a)).sqrt()).collect();
        let s: Vec<Vec<f64>> = (0..n_max)
            .map(|a| (0..n_max).map(|b| moment(p(a) + p(b)) / (norms[a] * norms[b])).collect())
            .collect();
        let (vals, vecs) = jacobi_svd(&s);
        let transform = (0..n_max)
            .map(|i| {
                (0..n_max)
                    .map(|j| (0..n_max).map(|k| vecs[k][i] * vecs[k][j] / vals[k].sqrt()).sum())
                    .collect()
            })
            .collect();
        OracleBasis { r_cut, norms, transform }
    }

    pub fn eval(&self, r: f64) -> Vec<f64> {
        let x = 1.0 - r / self.r_cut;
        let raw: Vec<f64> = (0..self.norms.len()).map(|a| x.powi(a as i32 + 3) / self.norms[a]).collect();
        self.transform.iter().map(|row| row.iter().zip(&raw).map(|(t, u)| t * u).sum()).collect()
    }
}

pub fn dimer(a: &str, b: &str, d: f64, dir: [f64; 3]) -> Frame {
    let norm = (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]).sqrt();
    let c = 15.0;
    let pos_b = [c + d * dir[0] / norm, c + d * dir[1] / norm, c + d * dir[2] / norm];
    let mut f = frame(SourceId::Alexandria, "dimer", 1, 0, &[a, b], vec![[c, c, c], pos_b], Some(-1.0), None);
    f.lattice = cubic(30.0);
    f
}

/// Dimer spectrum from the defining integral. With the bond on the z axis
/// only m = 0 survives:
/// c^Z_{nl} = 2π ∫ r² g_n(r) ∫ Y_l0(u) ρ_Z(r, u) du dr, where ρ_Z sums the
/// Gaussians of the atoms of species Z (the centre sits at the origin).
pub fn oracle_dimer(params: &SoapParams, species: [ElementSymbol; 2], d: f64) -> Vec<f64> {
    let (n_max, l_max, s2) = (params.n_max, params.l_max, params.sigma * params.sigma);
    let basis = OracleBasis::new(params.r_cut, n_max);
    let mut layout: Vec<ElementSymbol> = species.to_vec();
    layout.sort();
    layout.dedup();
    let r_nodes = composite(0.0, params.r_cut, 160, 10);
    let u_nodes = composite(-1.0, 1.0, 160, 10);
    let radial: Vec<Vec<f64>> = r_nodes.iter().map(|&(r, _)| basis.eval(r)).collect();
    let mut total = vec![0.0; 0];
    for centre in 0..2 {
        // c[z][n][l]
        let mut c = vec![vec![vec![0.0; l_max + 1]; n_max]; layout.len()];
        let zc = layout.iter().position(|e| *e == species[centre]).unwrap();
        let zn = layout.iter().position(|e| *e == species[1 - centre]).unwrap();
        for (ri, &(r, wr)) in r_nodes.iter().enumerate() {
            for &(u, wu) in &u_nodes {
                let self_density = (-r * r / (2.0 * s2)).exp();
                let other = (-(r * r + d * d - 2.0 * r * d * u) / (2.0 * s2)).exp();
                for l in 0..=l_max {
                    let y = ((2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)).sqrt() * legendre(l, u);
                    for n in 0..n_max {
                        let k = 2.0 * std::f64::consts::PI * wr * wu * r * r * radial[ri][n] * y;
                        c[zc][n][l] += k * self_density;
                        c[zn][n][l] += k * other;
                    }
                }
            }
        }
        let mut p = Vec::new();
        for z1 in 0..layout.len() {
            for z2 in z1..layout.len() {
                for n in 0..n_max {
                    for n2 in n..n_max {
                        for l in 0..=l_max {
                            let pref = std::f64::consts::PI * (8.0 / (2 * l + 1) as f64).sqrt();
                            p.push(pref * c[z1][n][l] * c[z2][n2][l]);
                        }
                    }
                }
            }
        }
        if total.is_empty() {
            total = vec![0.0; p.len()];
        }
        total.iter_mut().zip(&p).for_each(|(t, v)| *t += 0.5 * v);
    }
    total
}

