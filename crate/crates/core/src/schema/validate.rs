use serde::{Deserialize, Serialize};

use super::element::ElementSymbol;
use super::frame::{det3, Frame};

/// Identifier of a violated frame invariant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RuleId {
    EmptyStructure,
    PositionShape,
    ForceShape,
    NonFinite,
    CellVolume,
    UnknownElement,
    NegativeStep,
    RelaxationNumber,
    EmptyIdentifier,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: RuleId,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub frame_id: String,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, rule: RuleId) -> bool {
        self.violations.iter().any(|v| v.rule_id == rule)
    }
}

/// Checks every frame invariant and reports all violations at once.
pub fn validate_frame(frame: &Frame) -> ValidationReport {
    let mut violations = Vec::new();
    let mut push = |rule_id, message: String| violations.push(Violation { rule_id, message });

    if frame.frame_id.is_empty() || frame.trajectory_id.is_empty() {
        push(RuleId::EmptyIdentifier, "frame_id and trajectory_id must be non-empty".into());
    }
    let n = frame.species.len();
    if n == 0 {
        push(RuleId::EmptyStructure, "structure has no atoms".into());
    }
    if frame.positions.len() != n {
        push(
            RuleId::PositionShape,
            format!("{} position rows for {} species", frame.positions.len(), n),
        );
    }
    if let Some(forces) = &frame.forces {
        if forces.len() != n {
            push(RuleId::ForceShape, format!("{} force rows for {} species", forces.len(), n));
        }
    }

    let mut non_finite = Vec::new();
    if !frame.lattice.iter().flatten().all(|v| v.is_finite()) {
        non_finite.push("lattice");
    }
    if !frame.positions.iter().flatten().all(|v| v.is_finite()) {
        non_finite.push("positions");
    }
    if frame.energy.is_some_and(|e| !e.is_finite()) {
        non_finite.push("energy");
    }
    if frame.forces.as_ref().is_some_and(|f| !f.iter().flatten().all(|v| v.is_finite())) {
        non_finite.push("forces");
    }
    if frame.stress.as_ref().is_some_and(|s| !s.iter().flatten().all(|v| v.is_finite())) {
        non_finite.push("stress");
    }
    if !non_finite.is_empty() {
        push(RuleId::NonFinite, format!("non-finite values in {}", non_finite.join(", ")));
    }

    let det = det3(&frame.lattice);
    if !(det > 0.0) {
        push(RuleId::CellVolume, format!("lattice determinant {det} is not positive"));
    }

    let unknown: Vec<&str> = frame
        .species
        .iter()
        .filter(|s| ElementSymbol::parse(s).is_none())
        .map(String::as_str)
        .collect();
    if !unknown.is_empty() {
        push(RuleId::UnknownElement, format!("unknown element symbols {unknown:?}"));
    }
    if frame.relaxation_step < 0 {
        push(RuleId::NegativeStep, format!("relaxation_step {} < 0", frame.relaxation_step));
    }
    if frame.relaxation_number < 1 {
        push(
            RuleId::RelaxationNumber,
            format!("relaxation_number {} < 1", frame.relaxation_number),
        );
    }

    ValidationReport {
        frame_id: frame.frame_id.clone(),
        violations,
    }
}
