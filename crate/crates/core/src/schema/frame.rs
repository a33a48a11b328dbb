use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::element::ElementSymbol;

/// Exchange-correlation functional a frame was computed with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Functional {
    #[serde(rename = "PBE")]
    Pbe,
    #[serde(rename = "PBESol")]
    PbeSol,
    #[serde(rename = "SCAN")]
    Scan,
    #[serde(rename = "r2SCAN")]
    R2Scan,
}

impl Functional {
    pub const ALL: [Functional; 4] = [
        Functional::Pbe,
        Functional::PbeSol,
        Functional::Scan,
        Functional::R2Scan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Functional::Pbe => "PBE",
            Functional::PbeSol => "PBESol",
            Functional::Scan => "SCAN",
            Functional::R2Scan => "r2SCAN",
        }
    }
}

impl fmt::Display for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Functional {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Functional::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| format!("unknown functional '{s}'"))
    }
}

/// Upstream database a record was fetched from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SourceId {
    MaterialsProject,
    Alexandria,
    #[serde(rename = "OQMD")]
    Oqmd,
}

impl SourceId {
    pub const ALL: [SourceId; 3] = [SourceId::MaterialsProject, SourceId::Alexandria, SourceId::Oqmd];

    pub fn name(self) -> &'static str {
        match self {
            SourceId::MaterialsProject => "MaterialsProject",
            SourceId::Alexandria => "Alexandria",
            SourceId::Oqmd => "OQMD",
        }
    }

    /// Short lowercase tag used as the leading component of identifiers.
    pub fn slug(self) -> &'static str {
        match self {
            SourceId::MaterialsProject => "mp",
            SourceId::Alexandria => "alexandria",
            SourceId::Oqmd => "oqmd",
        }
    }
}

impl fmt::Display for SourceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SourceId::ALL
            .into_iter()
            .find(|src| src.name() == s || src.slug() == s)
            .ok_or_else(|| format!("unknown source '{s}'"))
    }
}

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

/// One atomic configuration along a relaxation trajectory.
///
/// Positions are Cartesian in Å, lattice rows are the cell vectors. Energy,
/// forces and stress are optional at ingest time; the curation filters decide
/// what survives. Field order here is the field order of the JSONL
/// interchange format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub frame_id: String,
    pub trajectory_id: String,
    pub relaxation_step: i64,
    pub relaxation_number: i64,
    pub lattice: Mat3,
    pub species: Vec<String>,
    pub positions: Vec<Vec3>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forces: Option<Vec<Vec3>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stress: Option<Mat3>,
    pub functional: Functional,
    pub source: SourceId,
    pub source_record_id: String,
    /// Externally supplied space-group label; never computed here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub space_group: Option<String>,
}

impl Frame {
    pub fn n_atoms(&self) -> usize {
        self.species.len()
    }

    /// Sort key inside a trajectory.
    pub fn step_key(&self) -> (i64, i64) {
        (self.relaxation_number, self.relaxation_step)
    }

    /// Element multiset, or `None` if any symbol is not a known element.
    pub fn composition(&self) -> Option<Composition> {
        Composition::from_symbols(self.species.iter().map(String::as_str))
    }

    pub fn has_targets(&self) -> bool {
        self.energy.is_some() && self.forces.is_some()
    }

    /// Fractional coordinates of every atom.
    pub fn fractional_positions(&self) -> Option<Vec<Vec3>> {
        let inv = invert3(&self.lattice)?;
        Some(
            self.positions
                .iter()
                .map(|r| {
                    let mut f = [0.0; 3];
                    for (j, fj) in f.iter_mut().enumerate() {
                        *fj = (0..3).map(|i| r[i] * inv[i][j]).sum();
                    }
                    f
                })
                .collect(),
        )
    }

    /// Canonical JSONL line for this frame (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("frame serialization cannot fail")
    }

    pub fn from_json_line(line: &str) -> Result<Frame, serde_json::Error> {
        serde_json::from_str(line)
    }
}

/// Element counts for one structure.
#[derive(Clone, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Composition(BTreeMap<ElementSymbol, u32>);

impl Composition {
    pub fn from_symbols<'a>(symbols: impl IntoIterator<Item = &'a str>) -> Option<Composition> {
        let mut counts = BTreeMap::new();
        for s in symbols {
            *counts.entry(ElementSymbol::parse(s)?).or_insert(0) += 1;
        }
        Some(Composition(counts))
    }

    pub fn from_elements(elements: impl IntoIterator<Item = ElementSymbol>) -> Composition {
        let mut counts = BTreeMap::new();
        for e in elements {
            *counts.entry(e).or_insert(0) += 1;
        }
        Composition(counts)
    }

    pub fn elements(&self) -> impl Iterator<Item = ElementSymbol> + '_ {
        self.0.keys().copied()
    }

    pub fn count(&self, element: ElementSymbol) -> u32 {
        self.0.get(&element).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ElementSymbol, u32)> + '_ {
        self.0.iter().map(|(&e, &n)| (e, n))
    }

    pub fn n_atoms(&self) -> u32 {
        self.0.values().sum()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, element: ElementSymbol) -> bool {
        self.0.contains_key(&element)
    }

    /// Formula with elements in atomic-number order, e.g. `O3Fe2`.
    pub fn formula(&self) -> String {
        self.0
            .iter()
            .map(|(e, &n)| if n == 1 { e.to_string() } else { format!("{e}{n}") })
            .collect()
    }
}

/// Deterministic, injective frame identifier.
///
/// The source slug never contains a colon and the two trailing components are
/// integers, so the record id in the middle is recovered unambiguously even
/// when it contains colons itself.
pub fn canonical_frame_id(
    source: SourceId,
    source_record_id: &str,
    relaxation_number: i64,
    relaxation_step: i64,
) -> String {
    format!(
        "{}:{}:{}:{}",
        source.slug(),
        source_record_id,
        relaxation_number,
        relaxation_step
    )
}

/// Trajectory identifier shared by every frame of one source record.
pub fn canonical_trajectory_id(source: SourceId, source_record_id: &str) -> String {
    format!("{}:{}", source.slug(), source_record_id)
}

pub fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

pub fn invert3(m: &Mat3) -> Option<Mat3> {
    let det = det3(m);
    if det == 0.0 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            inv[i][j] = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_id_format() {
        assert_eq!(canonical_frame_id(SourceId::Oqmd, "e-123", 2, 0), "oqmd:e-123:2:0");
        assert_eq!(
            canonical_frame_id(SourceId::Oqmd, "e-123", 2, 0),
            canonical_frame_id(SourceId::Oqmd, "e-123", 2, 0)
        );
        assert_ne!(
            canonical_frame_id(SourceId::Oqmd, "e-123", 1, 0),
            canonical_frame_id(SourceId::Oqmd, "e-123", 2, 0)
        );
    }

    #[test]
    fn frame_id_is_injective_with_colons_in_record_id() {
        let a = canonical_frame_id(SourceId::MaterialsProject, "a:1", 1, 0);
        let b = canonical_frame_id(SourceId::MaterialsProject, "a", 11, 0);
        let c = canonical_frame_id(SourceId::MaterialsProject, "a:1:1", 0, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_ne!(b, c);
    }

    #[test]
    fn enum_names_round_trip() {
        for f in Functional::ALL {
            assert_eq!(f.name().parse::<Functional>().unwrap(), f);
            assert_eq!(serde_json::to_string(&f).unwrap(), format!("\"{}\"", f.name()));
        }
        for s in SourceId::ALL {
            assert_eq!(s.name().parse::<SourceId>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{}\"", s.name()));
        }
    }

    #[test]
    fn inverse_and_fractional() {
        let m = [[2.0, 0.0, 0.0], [1.0, 3.0, 0.0], [0.0, 0.5, 4.0]];
        let inv = invert3(&m).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| m[i][k] * inv[k][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-14);
            }
        }
        assert_eq!(det3(&m), 24.0);
    }

    #[test]
    fn formula_and_counts() {
        let c = Composition::from_symbols(["Fe", "O", "Fe", "O", "O"]).unwrap();
        assert_eq!(c.formula(), "O3Fe2");
        assert_eq!(c.n_atoms(), 5);
        assert!(Composition::from_symbols(["Fe", "Xx"]).is_none());
    }
}
