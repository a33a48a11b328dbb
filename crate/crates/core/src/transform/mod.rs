//! Per-source conversion of raw records into unified [`Frame`]s.
//!
//! Transformers are pure: the same record always yields the same frames,
//! and every target value is copied from the payload without unit
//! conversion (all three sources report eV and eV/Å).

mod fieldmap;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::ingest::{Offset, RawRecord};
use crate::schema::{canonical_frame_id, canonical_trajectory_id, Frame, Functional, Mat3, SourceId, Vec3};
use crate::util::truncate_utf8;

pub use fieldmap::{FieldMap, FieldSpec};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TransformError {
    #[error("parse failure: {0}")]
    Parse(String),
    #[error("unknown functional '{0}'")]
    UnknownFunctional(String),
    #[error("calculation '{0}' appears more than once")]
    DuplicateStage(String),
}

impl TransformError {
    pub fn kind(&self) -> &'static str {
        match self {
            TransformError::Parse(_) => "ParseFailure",
            TransformError::UnknownFunctional(_) => "UnknownFunctional",
            TransformError::DuplicateStage(_) => "DuplicateStage",
        }
    }
}

/// Maps a source-reported functional name to the closed [`Functional`] set.
/// Matching ignores case; anything not listed is rejected.
pub fn resolve_functional(name: &str) -> Result<Functional, TransformError> {
    let f = match name.trim().to_ascii_uppercase().as_str() {
        "GGA" | "GGA+U" | "PBE" | "PBE+U" => Functional::Pbe,
        "PBESOL" | "PBE_SOL" | "PBESOL+U" => Functional::PbeSol,
        "SCAN" | "SCAN+U" => Functional::Scan,
        "R2SCAN" | "R2SCAN+U" => Functional::R2Scan,
        _ => return Err(TransformError::UnknownFunctional(name.to_string())),
    };
    Ok(f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawStructure {
    pub lattice: Mat3,
    pub species: Vec<String>,
    /// Cartesian, Å.
    pub positions: Vec<Vec3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpIonicStep {
    pub structure: RawStructure,
    #[serde(default)]
    pub energy: Option<f64>,
    #[serde(default)]
    pub forces: Option<Vec<Vec3>>,
    #[serde(default)]
    pub stress: Option<Mat3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpRawTask {
    pub task_id: String,
    #[serde(default)]
    pub deprecated: bool,
    pub functional: String,
    pub ionic_steps: Vec<MpIonicStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlexStep {
    pub structure: RawStructure,
    #[serde(default)]
    pub energy: Option<f64>,
    #[serde(default)]
    pub forces: Option<Vec<Vec3>>,
    #[serde(default)]
    pub stress: Option<Mat3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlexRawEntry {
    pub entry_id: String,
    pub functional: String,
    pub steps: Vec<AlexStep>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OqmdLabel {
    #[serde(rename = "coarse relaxation")]
    CoarseRelaxation,
    #[serde(rename = "relaxation")]
    Relaxation,
    #[serde(rename = "fine relaxation")]
    FineRelaxation,
}

impl OqmdLabel {
    /// Stages are numbered by increasing fidelity.
    pub fn relaxation_number(self) -> i64 {
        match self {
            OqmdLabel::CoarseRelaxation => 1,
            OqmdLabel::Relaxation => 2,
            OqmdLabel::FineRelaxation => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OqmdLabel::CoarseRelaxation => "coarse relaxation",
            OqmdLabel::Relaxation => "relaxation",
            OqmdLabel::FineRelaxation => "fine relaxation",
        }
    }
}

/// A structure with the targets computed on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OqmdStructure {
    pub lattice: Mat3,
    pub species: Vec<String>,
    pub positions: Vec<Vec3>,
    #[serde(default)]
    pub energy: Option<f64>,
    #[serde(default)]
    pub forces: Option<Vec<Vec3>>,
    #[serde(default)]
    pub stress: Option<Mat3>,
}

impl OqmdStructure {
    /// Energy and forces present, with one force row per atom.
    fn has_targets(&self) -> bool {
        self.energy.is_some()
            && self
                .forces
                .as_ref()
                .is_some_and(|f| f.len() == self.species.len())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OqmdCalculation {
    pub label: OqmdLabel,
    pub input_structure: OqmdStructure,
    pub output_structure: OqmdStructure,
}

fn pbe() -> String {
    "PBE".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OqmdRawEntry {
    pub entry_id: String,
    #[serde(default = "pbe")]
    pub functional: String,
    pub calculations: Vec<OqmdCalculation>,
}

#[allow(clippy::too_many_arguments)]
fn make_frame(
    source: SourceId,
    record_id: &str,
    functional: Functional,
    relaxation_number: i64,
    relaxation_step: i64,
    lattice: Mat3,
    species: Vec<String>,
    positions: Vec<Vec3>,
    energy: Option<f64>,
    forces: Option<Vec<Vec3>>,
    stress: Option<Mat3>,
) -> Frame {
    Frame {
        frame_id: canonical_frame_id(source, record_id, relaxation_number, relaxation_step),
        trajectory_id: canonical_trajectory_id(source, record_id),
        relaxation_step,
        relaxation_number,
        lattice,
        species,
        positions,
        energy,
        forces,
        stress,
        functional,
        source,
        source_record_id: record_id.to_string(),
        space_group: None,
    }
}

/// Materials Project task: one frame per ionic step, all in relaxation 1.
/// Deprecated tasks produce nothing.
pub fn transform_mp(raw: &MpRawTask) -> Result<Vec<Frame>, TransformError> {
    if raw.deprecated {
        return Ok(Vec::new());
    }
    let functional = resolve_functional(&raw.functional)?;
    Ok(raw
        .ionic_steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            make_frame(
                SourceId::MaterialsProject,
                &raw.task_id,
                functional,
                1,
                i as i64,
                step.structure.lattice,
                step.structure.species.clone(),
                step.structure.positions.clone(),
                step.energy,
                step.forces.clone(),
                step.stress,
            )
        })
        .collect())
}

/// Alexandria entry: one frame per step; entries containing Yb are excluded.
pub fn transform_alexandria(raw: &AlexRawEntry) -> Result<Vec<Frame>, TransformError> {
    if raw.steps.is_empty() {
        return Err(TransformError::Parse(format!("entry {} has no steps", raw.entry_id)));
    }
    let has_yb = raw
        .steps
        .iter()
        .any(|s| s.structure.species.iter().any(|sp| sp == "Yb"));
    if has_yb {
        return Ok(Vec::new());
    }
    let functional = resolve_functional(&raw.functional)?;
    Ok(raw
        .steps
        .iter()
        .enumerate()
        .map(|(i, step)| {
            make_frame(
                SourceId::Alexandria,
                &raw.entry_id,
                functional,
                1,
                i as i64,
                step.structure.lattice,
                step.structure.species.clone(),
                step.structure.positions.clone(),
                step.energy,
                step.forces.clone(),
                step.stress,
            )
        })
        .collect())
}

/// OQMD entry: every calculation stage contributes its input structure
/// (step 0) and output structure (step 1), numbered coarse=1, plain=2,
/// fine=3. A calculation missing targets on either structure contributes
/// nothing; the remaining stages are kept as numbered.
pub fn transform_oqmd(raw: &OqmdRawEntry) -> Result<Vec<Frame>, TransformError> {
    let functional = resolve_functional(&raw.functional)?;
    let mut by_stage: BTreeMap<OqmdLabel, &OqmdCalculation> = BTreeMap::new();
    for calc in &raw.calculations {
        if by_stage.insert(calc.label, calc).is_some() {
            return Err(TransformError::DuplicateStage(calc.label.name().into()));
        }
    }
    let mut frames = Vec::new();
    for (label, calc) in by_stage {
        if !(calc.input_structure.has_targets() && calc.output_structure.has_targets()) {
            continue;
        }
        let rn = label.relaxation_number();
        for (step, s) in [(0, &calc.input_structure), (1, &calc.output_structure)] {
            frames.push(make_frame(
                SourceId::Oqmd,
                &raw.entry_id,
                functional,
                rn,
                step,
                s.lattice,
                s.species.clone(),
                s.positions.clone(),
                s.energy,
                s.forces.clone(),
                s.stress,
            ));
        }
    }
    Ok(frames)
}

/// Field maps keyed by source; sources without one use the canonical layout.
#[derive(Clone, Debug, Default)]
pub struct FieldMaps(pub HashMap<SourceId, FieldMap>);

impl FieldMaps {
    pub fn get(&self, source: SourceId) -> Option<&FieldMap> {
        self.0.get(&source)
    }
}

/// Record routed to the reject sink.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reject {
    pub source: SourceId,
    pub offset: Offset,
    pub reason: String,
    pub payload_excerpt: String,
}

pub const EXCERPT_BYTES: usize = 256;

impl Reject {
    pub fn new(raw: &RawRecord, error: &TransformError) -> Reject {
        let text = String::from_utf8_lossy(&raw.payload);
        Reject {
            source: raw.source,
            offset: raw.offset,
            reason: format!("{}: {}", error.kind(), error),
            payload_excerpt: truncate_utf8(&text, EXCERPT_BYTES).to_string(),
        }
    }
}

fn parse<T: serde::de::DeserializeOwned>(
    raw: &RawRecord,
    map: Option<&FieldMap>,
) -> Result<T, TransformError> {
    let parse_err = |e: serde_json::Error| TransformError::Parse(e.to_string());
    match map {
        None => serde_json::from_slice(&raw.payload).map_err(parse_err),
        Some(map) => {
            let doc: serde_json::Value = serde_json::from_slice(&raw.payload).map_err(parse_err)?;
            serde_json::from_value(map.apply(&doc)).map_err(parse_err)
        }
    }
}

/// Routes a raw record to its source transformer.
pub fn dispatch(raw: &RawRecord, maps: &FieldMaps) -> Result<Vec<Frame>, Reject> {
    let map = maps.get(raw.source);
    let result = match raw.source {
        SourceId::MaterialsProject => parse::<MpRawTask>(raw, map).and_then(|r| transform_mp(&r)),
        SourceId::Alexandria => parse::<AlexRawEntry>(raw, map).and_then(|r| transform_alexandria(&r)),
        SourceId::Oqmd => parse::<OqmdRawEntry>(raw, map).and_then(|r| transform_oqmd(&r)),
    };
    result.map_err(|e| Reject::new(raw, &e))
}

/// Record-level accounting for a transform run.
///
/// `accepted + rejected == records_in`; accepted records may legitimately
/// yield zero frames (deprecated, Yb, no complete stage), counted in `empty`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchStats {
    pub records_in: u64,
    pub accepted: u64,
    pub rejected: u64,
    pub empty: u64,
    pub frames_out: u64,
}

impl DispatchStats {
    pub fn record(&mut self, outcome: &Result<Vec<Frame>, Reject>) {
        self.records_in += 1;
        match outcome {
            Ok(frames) => {
                self.accepted += 1;
                if frames.is_empty() {
                    self.empty += 1;
                }
                self.frames_out += frames.len() as u64;
            }
            Err(_) => self.rejected += 1,
        }
    }

    pub fn merge(&mut self, other: &DispatchStats) {
        self.records_in += other.records_in;
        self.accepted += other.accepted;
        self.rejected += other.rejected;
        self.empty += other.empty;
        self.frames_out += other.frames_out;
    }
}
