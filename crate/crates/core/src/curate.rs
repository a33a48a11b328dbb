//! Frame- and trajectory-level quality filters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::schema::{assemble_trajectories_lenient, validate_frame, Frame, Functional, Trajectory};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    /// eV, absolute (not per atom).
    #[serde(default = "default_energy")]
    pub energy_convergence_threshold: f64,
    /// eV/Å.
    #[serde(default = "default_force")]
    pub final_force_threshold: f64,
}

fn default_energy() -> f64 {
    0.02
}

fn default_force() -> f64 {
    0.2
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            energy_convergence_threshold: default_energy(),
            final_force_threshold: default_force(),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        // NaN fails both comparisons and is rejected with the rest.
        if !(self.energy_convergence_threshold > 0.0) {
            return Err("energy_convergence_threshold must be > 0".into());
        }
        if !(self.final_force_threshold > 0.0) {
            return Err("final_force_threshold must be > 0".into());
        }
        Ok(())
    }
}

/// Counts for one filter run. Trajectory-level drops are tracked both as
/// trajectory counts and as the number of frames they removed, so that
/// `frames_out == frames_in - dropped_frames()` always holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub frames_in: u64,
    pub frames_dropped_missing_targets: u64,
    pub frames_dropped_schema: u64,
    pub trajectories_dropped_convergence: u64,
    pub frames_dropped_convergence: u64,
    pub trajectories_dropped_final_force: u64,
    pub frames_dropped_final_force: u64,
    pub frames_out: u64,
}

impl FilterStats {
    pub fn dropped_frames(&self) -> u64 {
        self.frames_dropped_missing_targets
            + self.frames_dropped_schema
            + self.frames_dropped_convergence
            + self.frames_dropped_final_force
    }

    pub fn is_conserved(&self) -> bool {
        self.frames_in == self.frames_out + self.dropped_frames()
    }

    pub fn merge(&mut self, o: &FilterStats) {
        self.frames_in += o.frames_in;
        self.frames_dropped_missing_targets += o.frames_dropped_missing_targets;
        self.frames_dropped_schema += o.frames_dropped_schema;
        self.trajectories_dropped_convergence += o.trajectories_dropped_convergence;
        self.frames_dropped_convergence += o.frames_dropped_convergence;
        self.trajectories_dropped_final_force += o.trajectories_dropped_final_force;
        self.frames_dropped_final_force += o.frames_dropped_final_force;
        self.frames_out += o.frames_out;
    }
}

pub fn filter_frame_completeness(frame: &Frame) -> bool {
    frame.has_targets()
}

/// Single-frame trajectories have no penultimate step and are kept.
pub fn filter_convergence(traj: &Trajectory, cfg: &FilterConfig) -> bool {
    let frames = traj.frames();
    if frames.len() < 2 {
        return true;
    }
    let (Some(prev), Some(last)) = (frames[frames.len() - 2].energy, frames[frames.len() - 1].energy) else {
        return false;
    };
    (prev - last).abs() <= cfg.energy_convergence_threshold
}

pub fn max_force_norm(forces: &[[f64; 3]]) -> f64 {
    forces
        .iter()
        .map(|f| (f[0] * f[0] + f[1] * f[1] + f[2] * f[2]).sqrt())
        .fold(0.0, f64::max)
}

pub fn filter_final_force(traj: &Trajectory, cfg: &FilterConfig) -> bool {
    match &traj.last().forces {
        Some(forces) => max_force_norm(forces) <= cfg.final_force_threshold,
        None => false,
    }
}

/// Applies completeness, schema validation, reassembly, convergence and
/// final-force filtering, in that order. Frames that survive the
/// per-frame checks but cannot be assembled into a consistent trajectory
/// (duplicate step keys, composition changes) are counted as schema drops.
/// The output is sorted by trajectory id regardless of input order.
pub fn run_filters(frames: impl IntoIterator<Item = Frame>, cfg: &FilterConfig) -> (Vec<Trajectory>, FilterStats) {
    let mut stats = FilterStats::default();
    let mut survivors = Vec::new();
    for frame in frames {
        stats.frames_in += 1;
        if !filter_frame_completeness(&frame) {
            stats.frames_dropped_missing_targets += 1;
        } else if !validate_frame(&frame).is_valid() {
            stats.frames_dropped_schema += 1;
        } else {
            survivors.push(frame);
        }
    }
    let (trajs, failed) = assemble_trajectories_lenient(survivors);
    for (id, n, err) in &failed {
        log::debug!("dropping {id} ({n} frames): {err}");
        stats.frames_dropped_schema += *n as u64;
    }
    let mut kept = Vec::with_capacity(trajs.len());
    for traj in trajs {
        if !filter_convergence(&traj, cfg) {
            stats.trajectories_dropped_convergence += 1;
            stats.frames_dropped_convergence += traj.len() as u64;
        } else if !filter_final_force(&traj, cfg) {
            stats.trajectories_dropped_final_force += 1;
            stats.frames_dropped_final_force += traj.len() as u64;
        } else {
            stats.frames_out += traj.len() as u64;
            kept.push(traj);
        }
    }
    debug_assert!(stats.is_conserved());
    (kept, stats)
}

/// Groups frames by functional, preserving input order within each group.
pub fn partition_by_functional(frames: impl IntoIterator<Item = Frame>) -> BTreeMap<Functional, Vec<Frame>> {
    let mut parts: BTreeMap<Functional, Vec<Frame>> = BTreeMap::new();
    for f in frames {
        parts.entry(f.functional).or_default().push(f);
    }
    parts
}
