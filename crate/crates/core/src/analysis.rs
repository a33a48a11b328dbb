//! Dataset statistics as mergeable accumulators and plot-ready CSV tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::schema::{ElementSymbol, Frame, SourceId, Trajectory};
use crate::util::write_atomic;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnalysisError {
    #[error("frame {0} has no forces")]
    MissingForces(String),
    #[error("frame {0} has no energy")]
    MissingEnergy(String),
    #[error("I/O failure: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Linear,
    Log10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub scale: Scale,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Log10-spaced histogram over `[1, max]` from a value → multiplicity map.
///
/// Bins are right-closed, with the first bin also closed on the left:
/// `[e0, e1], (e1, e2], ...`, so lengths `[1, 10, 100]` over two decades
/// count `[2, 1]`.
pub fn log_histogram(values: &BTreeMap<usize, u64>, n_bins: usize) -> Histogram {
    assert!(n_bins >= 1, "n_bins must be >= 1");
    let max = values.keys().next_back().copied().unwrap_or(1).max(1) as f64;
    let top = max.log10();
    let mut bin_edges: Vec<f64> = (0..=n_bins).map(|i| 10f64.powf(top * i as f64 / n_bins as f64)).collect();
    bin_edges[0] = 1.0;
    bin_edges[n_bins] = max;
    let mut counts = vec![0u64; n_bins];
    for (&v, &c) in values {
        let v = v as f64;
        let bin = (0..n_bins)
            .find(|&i| v <= bin_edges[i + 1] * (1.0 + 1e-12))
            .unwrap_or(n_bins - 1);
        counts[bin] += c;
    }
    Histogram { bin_edges, counts, scale: Scale::Log10 }
}

pub fn trajectory_length_histogram(trajs: &[Trajectory], n_bins: usize) -> Histogram {
    let mut lengths = BTreeMap::new();
    for t in trajs {
        *lengths.entry(t.len()).or_insert(0) += 1;
    }
    log_histogram(&lengths, n_bins)
}

/// Unit-width linear histogram over integer values `1..=max`.
fn integer_histogram(values: &BTreeMap<usize, u64>) -> Histogram {
    let max = values.keys().next_back().copied().unwrap_or(0);
    let bin_edges = (0..=max).map(|i| i as f64 + 0.5).collect();
    let mut counts = vec![0u64; max];
    for (&v, &c) in values {
        if v >= 1 {
            counts[v - 1] += c;
        }
    }
    Histogram { bin_edges, counts, scale: Scale::Linear }
}

pub fn max_force_norm(frame: &Frame) -> Result<f64, AnalysisError> {
    frame
        .forces
        .as_deref()
        .map(crate::curate::max_force_norm)
        .ok_or_else(|| AnalysisError::MissingForces(frame.frame_id.clone()))
}

/// Streaming mean and population variance (Welford), mergeable with
/// Chan's pairwise update.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunningStats {
    pub n: u64,
    pub mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, o: &RunningStats) {
        if o.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *o;
            return;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        self.mean += d * o.n as f64 / n as f64;
        self.m2 += o.m2 + d * d * (self.n as f64 * o.n as f64 / n as f64);
        self.n = n;
    }

    pub fn variance(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            (self.m2 / self.n as f64).max(0.0)
        }
    }

    pub fn std(&self) -> f64 {
        self.variance().sqrt()
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.mean
        }
    }
}

/// Bin of frame `t` in a `len`-frame trajectory. Fraction is `t / (len-1)`;
/// bins are `[k/n, (k+1)/n)` with the last one closed, and a single frame
/// sits at fraction 1. Integer arithmetic keeps edge cases exact.
pub fn fraction_bin(t: usize, len: usize, n_bins: usize) -> usize {
    if len <= 1 {
        return n_bins - 1;
    }
    ((t as u128 * n_bins as u128 / (len as u128 - 1)) as usize).min(n_bins - 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileCurve {
    pub bin_centers: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub n: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileAccumulator {
    bins: Vec<RunningStats>,
}

impl ProfileAccumulator {
    pub fn new(n_bins: usize) -> Self {
        assert!(n_bins >= 1, "n_bins must be >= 1");
        ProfileAccumulator { bins: vec![RunningStats::default(); n_bins] }
    }

    pub fn n_bins(&self) -> usize {
        self.bins.len()
    }

    /// Adds one trajectory given its per-frame values in canonical order.
    pub fn push_series(&mut self, values: &[f64]) {
        let n = self.bins.len();
        for (t, &v) in values.iter().enumerate() {
            self.bins[fraction_bin(t, values.len(), n)].push(v);
        }
    }

    pub fn merge(&mut self, o: &ProfileAccumulator) {
        assert_eq!(self.bins.len(), o.bins.len(), "bin count mismatch");
        for (a, b) in self.bins.iter_mut().zip(&o.bins) {
            a.merge(b);
        }
    }

    pub fn curve(&self) -> ProfileCurve {
        let n = self.bins.len() as f64;
        ProfileCurve {
            bin_centers: (0..self.bins.len()).map(|k| (k as f64 + 0.5) / n).collect(),
            mean: self.bins.iter().map(RunningStats::mean).collect(),
            std: self.bins.iter().map(RunningStats::std).collect(),
            n: self.bins.iter().map(|b| b.n).collect(),
        }
    }
}

/// Per-atom `(E^t - E^T) / N` for every frame of a trajectory.
pub fn delta_e_series(traj: &Trajectory) -> Result<Vec<f64>, AnalysisError> {
    let last = traj.last();
    let e_final = last.energy.ok_or_else(|| AnalysisError::MissingEnergy(last.frame_id.clone()))?;
    traj.frames()
        .iter()
        .map(|f| {
            let e = f.energy.ok_or_else(|| AnalysisError::MissingEnergy(f.frame_id.clone()))?;
            Ok((e - e_final) / f.n_atoms() as f64)
        })
        .collect()
}

pub fn force_series(traj: &Trajectory) -> Result<Vec<f64>, AnalysisError> {
    traj.frames().iter().map(max_force_norm).collect()
}

pub fn delta_e_profile(trajs: &[Trajectory], n_bins: usize) -> Result<ProfileCurve, AnalysisError> {
    let mut acc = ProfileAccumulator::new(n_bins);
    for t in trajs {
        acc.push_series(&delta_e_series(t)?);
    }
    Ok(acc.curve())
}

pub fn force_profile(trajs: &[Trajectory], n_bins: usize) -> Result<ProfileCurve, AnalysisError> {
    let mut acc = ProfileAccumulator::new(n_bins);
    for t in trajs {
        acc.push_series(&force_series(t)?);
    }
    Ok(acc.curve())
}

pub fn element_trajectory_counts(trajs: &[Trajectory]) -> BTreeMap<ElementSymbol, u64> {
    let mut counts = BTreeMap::new();
    for t in trajs {
        for e in t.composition().elements() {
            *counts.entry(e).or_insert(0) += 1;
        }
    }
    counts
}

/// Frame count of each relaxation stage of a trajectory.
pub fn stage_lengths(traj: &Trajectory) -> BTreeMap<i64, usize> {
    let mut m = BTreeMap::new();
    for f in traj.frames() {
        *m.entry(f.relaxation_number).or_insert(0) += 1;
    }
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageHistogram {
    /// Trajectories that have this stage.
    pub n: u64,
    pub histogram: Histogram,
}

pub fn relaxation_stage_histogram(trajs: &[Trajectory]) -> BTreeMap<i64, StageHistogram> {
    let mut acc = StatsAccumulator::new(1);
    for t in trajs {
        acc.push_stages(t);
    }
    acc.stage_histograms()
}

/// Mean of per-frame maximum force norms and mean of per-trajectory
/// maxima, for one source.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MaxForceMeans {
    pub per_frame: RunningStats,
    pub per_trajectory: RunningStats,
}

/// Everything the stats stage reports, accumulated one trajectory at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct StatsAccumulator {
    pub lengths: BTreeMap<usize, u64>,
    pub delta_e: ProfileAccumulator,
    pub force: ProfileAccumulator,
    pub elements: BTreeMap<ElementSymbol, u64>,
    /// relaxation_number → frames-in-stage → trajectory count.
    pub stages: BTreeMap<i64, BTreeMap<usize, u64>>,
    pub max_force: BTreeMap<SourceId, MaxForceMeans>,
}

impl StatsAccumulator {
    pub fn new(profile_bins: usize) -> Self {
        StatsAccumulator {
            lengths: BTreeMap::new(),
            delta_e: ProfileAccumulator::new(profile_bins),
            force: ProfileAccumulator::new(profile_bins),
            elements: BTreeMap::new(),
            stages: BTreeMap::new(),
            max_force: BTreeMap::new(),
        }
    }

    fn push_stages(&mut self, t: &Trajectory) {
        for (stage, len) in stage_lengths(t) {
            *self.stages.entry(stage).or_default().entry(len).or_insert(0) += 1;
        }
    }

    pub fn push(&mut self, t: &Trajectory) -> Result<(), AnalysisError> {
        let de = delta_e_series(t)?;
        let forces = force_series(t)?;
        *self.lengths.entry(t.len()).or_insert(0) += 1;
        self.delta_e.push_series(&de);
        self.force.push_series(&forces);
        for e in t.composition().elements() {
            *self.elements.entry(e).or_insert(0) += 1;
        }
        self.push_stages(t);
        let m = self.max_force.entry(t.source()).or_default();
        for &f in &forces {
            m.per_frame.push(f);
        }
        m.per_trajectory.push(forces.iter().copied().fold(0.0, f64::max));
        Ok(())
    }

    pub fn merge(&mut self, o: &StatsAccumulator) {
        for (k, v) in &o.lengths {
            *self.lengths.entry(*k).or_insert(0) += v;
        }
        self.delta_e.merge(&o.delta_e);
        self.force.merge(&o.force);
        for (k, v) in &o.elements {
            *self.elements.entry(*k).or_insert(0) += v;
        }
        for (stage, hist) in &o.stages {
            let mine = self.stages.entry(*stage).or_default();
            for (k, v) in hist {
                *mine.entry(*k).or_insert(0) += v;
            }
        }
        for (s, m) in &o.max_force {
            let mine = self.max_force.entry(*s).or_default();
            mine.per_frame.merge(&m.per_frame);
            mine.per_trajectory.merge(&m.per_trajectory);
        }
    }

    pub fn n_trajectories(&self) -> u64 {
        self.lengths.values().sum()
    }

    pub fn stage_histograms(&self) -> BTreeMap<i64, StageHistogram> {
        self.stages
            .iter()
            .map(|(stage, lens)| {
                (*stage, StageHistogram { n: lens.values().sum(), histogram: integer_histogram(lens) })
            })
            .collect()
    }
}

fn fmt_f64(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

fn profile_csv(c: &ProfileCurve, label: &str) -> String {
    let mut s = format!("bin_center,mean_{label},std_{label},n\n");
    for i in 0..c.n.len() {
        let _ = writeln!(s, "{},{},{},{}", fmt_f64(c.bin_centers[i]), fmt_f64(c.mean[i]), fmt_f64(c.std[i]), c.n[i]);
    }
    s
}

fn histogram_csv(h: &Histogram) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in h.counts.iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", fmt_f64(h.bin_edges[i]), fmt_f64(h.bin_edges[i + 1]), c);
    }
    s
}

pub const STATS_FILES: [&str; 6] = [
    "trajectory_lengths.csv",
    "delta_e_profile.csv",
    "force_profile.csv",
    "element_counts.csv",
    "relaxation_stages.csv",
    "mean_max_force.csv",
];

/// Writes the CSV tables and `metadata.json` for one accumulator.
pub fn write_stats(dir: &Path, acc: &StatsAccumulator, length_bins: usize, extra: serde_json::Value) -> Result<(), AnalysisError> {
    let io = |e: std::io::Error| AnalysisError::Io(e.to_string());
    let hist = log_histogram(&acc.lengths, length_bins);
    write_atomic(&dir.join(STATS_FILES[0]), histogram_csv(&hist).as_bytes()).map_err(io)?;
    write_atomic(&dir.join(STATS_FILES[1]), profile_csv(&acc.delta_e.curve(), "delta_e_per_atom_ev").as_bytes()).map_err(io)?;
    write_atomic(&dir.join(STATS_FILES[2]), profile_csv(&acc.force.curve(), "max_force_ev_per_a").as_bytes()).map_err(io)?;

    let mut s = String::from("element,n_trajectories\n");
    for (e, n) in &acc.elements {
        let _ = writeln!(s, "{e},{n}");
    }
    write_atomic(&dir.join(STATS_FILES[3]), s.as_bytes()).map_err(io)?;

    let mut s = String::from("relaxation_number,n_trajectories,steps,count\n");
    for (stage, sh) in acc.stage_histograms() {
        for (i, c) in sh.histogram.counts.iter().enumerate() {
            if *c > 0 {
                let _ = writeln!(s, "{stage},{},{},{c}", sh.n, i + 1);
            }
        }
    }
    write_atomic(&dir.join(STATS_FILES[4]), s.as_bytes()).map_err(io)?;

    let mut s = String::from("source,mean_per_frame_max_force,n_frames,mean_per_trajectory_max_force,n_trajectories\n");
    for (src, m) in &acc.max_force {
        let _ = writeln!(
            s,
            "{src},{},{},{},{}",
            fmt_f64(m.per_frame.mean()),
            m.per_frame.n,
            fmt_f64(m.per_trajectory.mean()),
            m.per_trajectory.n
        );
    }
    write_atomic(&dir.join(STATS_FILES[5]), s.as_bytes()).map_err(io)?;

    let mut meta = serde_json::json!({
        "n_trajectories": acc.n_trajectories(),
        "profile_bins": acc.delta_e.n_bins(),
        "length_bins": length_bins,
        "fraction_definition": "t/(T-1) for frame t of a T-frame trajectory; a single frame sits at 1.0; bins [k/n,(k+1)/n) with the last closed",
        "std": "population",
        "length_histogram_bins": "log10-spaced; first bin closed, others (lo, hi]",
        "max_force_means": "per_frame averages every frame's max atomic force norm; per_trajectory averages each trajectory's largest such value",
        "units": {"delta_e": "eV/atom", "force": "eV/Angstrom"},
    });
    if let (Some(m), serde_json::Value::Object(extra)) = (meta.as_object_mut(), extra) {
        m.extend(extra);
    }
    let mut text = serde_json::to_string_pretty(&meta).expect("json");
    text.push('\n');
    write_atomic(&dir.join("metadata.json"), text.as_bytes()).map_err(io)
}
