use std::collections::BTreeMap;

use super::frame::{Composition, Frame, Functional, SourceId};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AssemblyError {
    #[error("trajectory {trajectory_id}: frame {frame_id} has composition {found}, expected {expected}")]
    CompositionMismatch {
        trajectory_id: String,
        frame_id: String,
        expected: String,
        found: String,
    },
    #[error("trajectory {trajectory_id}: duplicate key (relaxation_number {relaxation_number}, relaxation_step {relaxation_step})")]
    DuplicateKey {
        trajectory_id: String,
        relaxation_number: i64,
        relaxation_step: i64,
    },
    #[error("trajectory {trajectory_id}: frame {frame_id} disagrees on {field}")]
    ProvenanceMismatch {
        trajectory_id: String,
        frame_id: String,
        field: &'static str,
    },
    #[error("frame {0} has unknown element symbols")]
    UnknownElement(String),
}

impl AssemblyError {
    pub fn trajectory_id(&self) -> Option<&str> {
        match self {
            AssemblyError::CompositionMismatch { trajectory_id, .. }
            | AssemblyError::DuplicateKey { trajectory_id, .. }
            | AssemblyError::ProvenanceMismatch { trajectory_id, .. } => Some(trajectory_id),
            AssemblyError::UnknownElement(_) => None,
        }
    }
}

/// Frames of one geometry optimization in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    trajectory_id: String,
    frames: Vec<Frame>,
    composition: Composition,
}

impl Trajectory {
    /// Builds a trajectory from frames sharing one `trajectory_id`, in any order.
    pub fn from_frames(mut frames: Vec<Frame>) -> Result<Trajectory, AssemblyError> {
        assert!(!frames.is_empty(), "a trajectory needs at least one frame");
        frames.sort_by_key(Frame::step_key);
        let first = &frames[0];
        let trajectory_id = first.trajectory_id.clone();
        let composition = first
            .composition()
            .ok_or_else(|| AssemblyError::UnknownElement(first.frame_id.clone()))?;

        for pair in frames.windows(2) {
            if pair[0].step_key() == pair[1].step_key() {
                return Err(AssemblyError::DuplicateKey {
                    trajectory_id,
                    relaxation_number: pair[1].relaxation_number,
                    relaxation_step: pair[1].relaxation_step,
                });
            }
        }
        for frame in &frames[1..] {
            debug_assert_eq!(frame.trajectory_id, trajectory_id);
            let mismatch = |field| AssemblyError::ProvenanceMismatch {
                trajectory_id: trajectory_id.clone(),
                frame_id: frame.frame_id.clone(),
                field,
            };
            if frame.functional != first.functional {
                return Err(mismatch("functional"));
            }
            if frame.source != first.source {
                return Err(mismatch("source"));
            }
            let found = frame
                .composition()
                .ok_or_else(|| AssemblyError::UnknownElement(frame.frame_id.clone()))?;
            if found != composition {
                return Err(AssemblyError::CompositionMismatch {
                    trajectory_id: trajectory_id.clone(),
                    frame_id: frame.frame_id.clone(),
                    expected: composition.formula(),
                    found: found.formula(),
                });
            }
        }
        Ok(Trajectory {
            trajectory_id,
            frames,
            composition,
        })
    }

    pub fn id(&self) -> &str {
        &self.trajectory_id
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn composition(&self) -> &Composition {
        &self.composition
    }

    pub fn functional(&self) -> Functional {
        self.frames[0].functional
    }

    pub fn source(&self) -> SourceId {
        self.frames[0].source
    }

    pub fn first(&self) -> &Frame {
        &self.frames[0]
    }

    pub fn last(&self) -> &Frame {
        self.frames.last().expect("trajectories are non-empty")
    }

    pub fn n_atoms(&self) -> usize {
        self.frames[0].n_atoms()
    }
}

/// Groups frames by `trajectory_id` and orders each group by
/// `(relaxation_number, relaxation_step)`. Output is sorted by trajectory id,
/// so it does not depend on input order.
pub fn assemble_trajectories(
    frames: impl IntoIterator<Item = Frame>,
) -> Result<Vec<Trajectory>, AssemblyError> {
    group_by_trajectory(frames)
        .into_values()
        .map(Trajectory::from_frames)
        .collect()
}

/// Like [`assemble_trajectories`] but keeps going past inconsistent
/// trajectories, returning them as errors alongside the good ones.
pub fn assemble_trajectories_lenient(
    frames: impl IntoIterator<Item = Frame>,
) -> (Vec<Trajectory>, Vec<(String, usize, AssemblyError)>) {
    let mut good = Vec::new();
    let mut bad = Vec::new();
    for (id, group) in group_by_trajectory(frames) {
        let n = group.len();
        match Trajectory::from_frames(group) {
            Ok(t) => good.push(t),
            Err(e) => bad.push((id, n, e)),
        }
    }
    (good, bad)
}

fn group_by_trajectory(frames: impl IntoIterator<Item = Frame>) -> BTreeMap<String, Vec<Frame>> {
    let mut groups: BTreeMap<String, Vec<Frame>> = BTreeMap::new();
    for frame in frames {
        groups.entry(frame.trajectory_id.clone()).or_default().push(frame);
    }
    groups
}
