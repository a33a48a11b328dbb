//! Potential-energy-surface projection: SOAP descriptors of a chemical
//! subset, a PCA fit, formation energies and trajectory overlays.

pub mod bessel;
pub mod harmonics;
pub mod pca;
pub mod quadrature;
pub mod radial;
pub mod soap;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::schema::{ElementSymbol, Frame, Functional, Trajectory};

pub use pca::{fit_pca, MeanPass, PcaModel, ScatterPass};
pub use soap::{neighbour_lists, Averaging, Soap, SoapParams};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PesError {
    #[error("frame {0} has no atoms")]
    EmptyStructure(String),
    #[error("frame {0}: degenerate cell or non-finite descriptor")]
    NumericalOverflow(String),
    #[error("species {0} is outside the descriptor's element set")]
    UnexpectedSpecies(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("no reference energy for {0}")]
    MissingReference(String),
    #[error("frame {0} has no energy")]
    MissingEnergy(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

/// Parses a comma-separated element list such as `Fe,Cu,Al,Ni`.
pub fn parse_elements(list: &str) -> Result<BTreeSet<ElementSymbol>, String> {
    let set: BTreeSet<ElementSymbol> = list
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| ElementSymbol::parse(s).ok_or_else(|| format!("unknown element '{s}'")))
        .collect::<Result<_, _>>()?;
    if set.is_empty() {
        return Err("element list is empty".into());
    }
    Ok(set)
}

/// True when every species of the frame is in `elements`.
pub fn in_chemical_subset(frame: &Frame, elements: &BTreeSet<ElementSymbol>) -> bool {
    frame
        .species
        .iter()
        .all(|s| ElementSymbol::parse(s).is_some_and(|e| elements.contains(&e)))
}

pub fn select_chemical_subset(frames: impl IntoIterator<Item = Frame>, elements: &BTreeSet<ElementSymbol>) -> Vec<Frame> {
    frames.into_iter().filter(|f| in_chemical_subset(f, elements)).collect()
}

/// Elemental reference energies in eV/atom, keyed by functional name in
/// the JSON file: `{"PBE": {"Fe": -8.47, ...}, ...}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReferenceEnergies(pub BTreeMap<Functional, BTreeMap<ElementSymbol, f64>>);

impl ReferenceEnergies {
    pub fn load(path: &Path) -> Result<ReferenceEnergies, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn for_functional(&self, f: Functional) -> Option<&BTreeMap<ElementSymbol, f64>> {
        self.0.get(&f)
    }
}

/// `(E - Σ_i n_i μ_i) / N` in eV/atom.
pub fn formation_energy_per_atom(frame: &Frame, refs: &BTreeMap<ElementSymbol, f64>) -> Result<f64, PesError> {
    let energy = frame.energy.ok_or_else(|| PesError::MissingEnergy(frame.frame_id.clone()))?;
    let mut reference = 0.0;
    for s in &frame.species {
        let mu = ElementSymbol::parse(s)
            .and_then(|e| refs.get(&e))
            .ok_or_else(|| PesError::MissingReference(s.clone()))?;
        reference += mu;
    }
    Ok((energy - reference) / frame.n_atoms() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Marker {
    Initial,
    Final,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverlayPoint {
    pub frame_id: String,
    pub coords: Vec<f64>,
    pub marker: Option<Marker>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub trajectory_id: String,
    pub points: Vec<OverlayPoint>,
}

/// One polyline per trajectory, points in canonical frame order with the
/// first flagged initial and the last final.
pub fn trajectory_overlay(
    trajs: &[Trajectory],
    soap: &Soap,
    model: &PcaModel,
) -> Result<Vec<Polyline>, PesError> {
    trajs
        .iter()
        .map(|t| {
            let descriptors = t
                .frames()
                .iter()
                .map(|f| soap.descriptor(f))
                .collect::<Result<Vec<_>, _>>()?;
            overlay_from_descriptors(t, &descriptors, model)
        })
        .collect()
}

pub fn overlay_from_descriptors(t: &Trajectory, descriptors: &[Vec<f64>], model: &PcaModel) -> Result<Polyline, PesError> {
    let last = t.len() - 1;
    let points = t
        .frames()
        .iter()
        .zip(descriptors)
        .enumerate()
        .map(|(i, (f, d))| {
            let marker = match (i == 0, i == last) {
                (true, true) => Some(Marker::Both),
                (true, false) => Some(Marker::Initial),
                (false, true) => Some(Marker::Final),
                _ => None,
            };
            Ok(OverlayPoint {
                frame_id: f.frame_id.clone(),
                coords: model.project(d)?,
                marker,
            })
        })
        .collect::<Result<Vec<_>, PesError>>()?;
    Ok(Polyline {
        trajectory_id: t.id().to_string(),
        points,
    })
}
