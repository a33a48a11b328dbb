use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::curate::FilterConfig;
use crate::ingest::SourceConfig;
use crate::pes::SoapParams;
use crate::schema::{ElementSymbol, Functional};
use crate::splits::SplitConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Fetch,
    Transform,
    Filter,
    Export,
    Split,
    Stats,
    Pes,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Fetch,
        Stage::Transform,
        Stage::Filter,
        Stage::Export,
        Stage::Split,
        Stage::Stats,
        Stage::Pes,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Fetch => "fetch",
            Stage::Transform => "transform",
            Stage::Filter => "filter",
            Stage::Export => "export",
            Stage::Split => "split",
            Stage::Stats => "stats",
            Stage::Pes => "pes",
        }
    }

    /// The stage whose output this one reads.
    pub fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Fetch => None,
            Stage::Transform => Some(Stage::Fetch),
            Stage::Filter => Some(Stage::Transform),
            Stage::Export => Some(Stage::Filter),
            Stage::Split | Stage::Stats | Stage::Pes => Some(Stage::Export),
        }
    }
}

impl Stage {
    /// True when `self` reads, directly or transitively, the output of `upstream`.
    pub fn depends_on(self, upstream: Stage) -> bool {
        let mut cur = self.prerequisite();
        while let Some(s) = cur {
            if s == upstream {
                return true;
            }
            cur = s.prerequisite();
        }
        false
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage '{s}'"))
    }
}

fn default_stages() -> Vec<Stage> {
    vec![Stage::Fetch, Stage::Transform, Stage::Filter, Stage::Export, Stage::Split, Stage::Stats]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn one() -> usize {
    1
}

fn default_shard() -> usize {
    100_000
}

fn default_sort_run() -> usize {
    50_000
}

fn default_reject_rate() -> f64 {
    0.01
}

fn default_bucket_frames() -> usize {
    200_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsConfig {
    #[serde(default = "default_length_bins")]
    pub length_bins: usize,
    #[serde(default = "default_profile_bins")]
    pub profile_bins: usize,
}

fn default_length_bins() -> usize {
    20
}

fn default_profile_bins() -> usize {
    20
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            length_bins: default_length_bins(),
            profile_bins: default_profile_bins(),
        }
    }
}

fn default_pes_elements() -> Vec<ElementSymbol> {
    ["Fe", "Cu", "Al", "Ni"].iter().filter_map(|s| ElementSymbol::parse(s)).collect()
}

fn default_components() -> usize {
    2
}

fn default_overlay() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PesConfig {
    #[serde(default = "default_pes_elements")]
    pub elements: Vec<ElementSymbol>,
    #[serde(default = "default_pes_functional")]
    pub functional: Functional,
    #[serde(default)]
    pub soap: SoapParams,
    #[serde(default = "default_components")]
    pub components: usize,
    /// Elemental reference energies; without them formation energies are omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub refs: Option<PathBuf>,
    /// Number of trajectories drawn for the path overlay.
    #[serde(default = "default_overlay")]
    pub overlay_trajectories: usize,
    /// Fit the PCA on another exported dataset and only project this one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_on: Option<PathBuf>,
}

fn default_pes_functional() -> Functional {
    Functional::Pbe
}

impl Default for PesConfig {
    fn default() -> Self {
        PesConfig {
            elements: default_pes_elements(),
            functional: default_pes_functional(),
            soap: SoapParams::default(),
            components: default_components(),
            refs: None,
            overlay_trajectories: default_overlay(),
            fit_on: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub sources: Vec<SourceConfig>,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "one")]
    pub workers: usize,
    #[serde(default = "default_shard")]
    pub max_frames_per_shard: usize,
    #[serde(default = "default_stages")]
    pub stages: Vec<Stage>,
    /// Root of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub stats: StatsConfig,
    #[serde(default)]
    pub pes: PesConfig,
    /// Abort the transform stage when rejected / read exceeds this.
    #[serde(default = "default_reject_rate")]
    pub max_reject_rate: f64,
    /// Frames held in memory per sort run during export.
    #[serde(default = "default_sort_run")]
    pub sort_run_frames: usize,
    /// Target frames per trajectory-hash bucket in the filter stage.
    #[serde(default = "default_bucket_frames")]
    pub bucket_frames: usize,
    #[serde(default)]
    pub columnar: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields default")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid config at {field}: {reason}")]
pub struct ConfigInvalid {
    pub field: String,
    pub reason: String,
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigInvalid {
    ConfigInvalid {
        field: field.into(),
        reason: reason.into(),
    }
}

impl PipelineConfig {
    /// Parses JSON text; empty or whitespace-only text means all defaults.
    /// Relative paths are resolved against `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<PipelineConfig, ConfigInvalid> {
        let text = if text.trim().is_empty() { "{}" } else { text };
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: PipelineConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            invalid(if path == "." { "<root>".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.resolve_paths(base_dir);
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.out_dir);
        for s in &mut self.sources {
            let is_url = s.location.contains("://");
            if !is_url && Path::new(&s.location).is_relative() {
                s.location = base.join(&s.location).to_string_lossy().into_owned();
            }
            if let Some(p) = s.checkpoint_path.as_mut() {
                abs(p);
            }
            if let Some(p) = s.field_map.as_mut() {
                abs(p);
            }
        }
        if let Some(p) = self.pes.refs.as_mut() {
            abs(p);
        }
        if let Some(p) = self.pes.fit_on.as_mut() {
            abs(p);
        }
    }

    /// Value-level checks that do not touch the file system.
    pub fn check_values(&self) -> Result<(), ConfigInvalid> {
        self.filter
            .validate()
            .map_err(|r| invalid(format!("filter.{}", r.split(' ').next().unwrap_or("")), r))?;
        if self.workers < 1 {
            return Err(invalid("workers", "must be >= 1"));
        }
        if self.max_frames_per_shard < 1 {
            return Err(invalid("max_frames_per_shard", "must be >= 1"));
        }
        if self.sort_run_frames < 1 {
            return Err(invalid("sort_run_frames", "must be >= 1"));
        }
        if self.bucket_frames < 1 {
            return Err(invalid("bucket_frames", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.max_reject_rate) {
            return Err(invalid("max_reject_rate", "must lie in [0, 1]"));
        }
        self.split
            .validate()
            .map_err(|(f, r)| invalid(format!("split.{f}"), r))?;
        if self.stats.length_bins < 1 {
            return Err(invalid("stats.length_bins", "must be >= 1"));
        }
        if self.stats.profile_bins < 1 {
            return Err(invalid("stats.profile_bins", "must be >= 1"));
        }
        self.pes.soap.validate().map_err(|r| invalid("pes.soap", r))?;
        if self.pes.elements.is_empty() {
            return Err(invalid("pes.elements", "must not be empty"));
        }
        if self.pes.components < 1 {
            return Err(invalid("pes.components", "must be >= 1"));
        }
        let mut seen = BTreeSet::new();
        for (i, s) in self.sources.iter().enumerate() {
            if !seen.insert(s.source) {
                return Err(invalid(format!("sources[{i}].source"), format!("{} listed twice", s.source)));
            }
            if s.batch_size < 1 {
                return Err(invalid(format!("sources[{i}].batch_size"), "must be >= 1"));
            }
        }
        let mut prev: Option<Stage> = None;
        for (i, st) in self.stages.iter().enumerate() {
            if let Some(p) = prev {
                if *st <= p {
                    return Err(invalid(format!("stages[{i}]"), "stages must be listed once, in pipeline order"));
                }
            }
            prev = Some(*st);
        }
        if self.stages.contains(&Stage::Fetch) && self.sources.is_empty() {
            return Err(invalid("sources", "fetch needs at least one source"));
        }
        Ok(())
    }
}

/// Reads, defaults and checks a config file, including that every stage's
/// prerequisite is either scheduled earlier in the same run or already
/// completed in `out_dir`.
pub fn validate_config(path: &Path) -> Result<PipelineConfig, ConfigInvalid> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid("<file>", format!("{}: {e}", path.display())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let cfg = PipelineConfig::parse(&text, &base)?;
    cfg.check_values()?;
    check_dependencies(&cfg)?;
    Ok(cfg)
}

pub fn check_dependencies(cfg: &PipelineConfig) -> Result<(), ConfigInvalid> {
    for (i, st) in cfg.stages.iter().enumerate() {
        if let Some(pre) = st.prerequisite() {
            let scheduled = cfg.stages[..i].contains(&pre);
            if !scheduled && !super::stage_done(&cfg.out_dir, pre) {
                return Err(invalid(
                    format!("stages[{i}]"),
                    format!("{st} needs {pre} outputs, which are neither scheduled nor present"),
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_is_defaults() {
        let cfg = PipelineConfig::parse("  \n", Path::new("/base")).unwrap();
        assert_eq!(cfg.filter, FilterConfig::default());
        assert_eq!(cfg.split.test_fraction, 0.2);
        assert_eq!(cfg.split.source_balance, crate::splits::default_source_balance());
        assert_eq!(cfg.out_dir, PathBuf::from("/base/out"));
        assert_eq!(cfg.workers, 1);
        assert_eq!(cfg.max_reject_rate, 0.01);
    }

    #[test]
    fn unknown_field_reports_path() {
        let err = PipelineConfig::parse(r#"{"filter": {"energy_threshold": 1}}"#, Path::new(".")).unwrap_err();
        assert!(err.field.starts_with("filter"), "{err}");
    }

    #[test]
    fn negative_threshold_rejected() {
        let cfg = PipelineConfig::parse(r#"{"filter": {"final_force_threshold": -0.1}}"#, Path::new(".")).unwrap();
        let err = cfg.check_values().unwrap_err();
        assert_eq!(err.field, "filter.final_force_threshold");
    }

    #[test]
    fn stage_order_enforced() {
        let cfg = PipelineConfig::parse(r#"{"stages": ["filter", "transform"]}"#, Path::new(".")).unwrap();
        assert_eq!(cfg.check_values().unwrap_err().field, "stages[1]");
    }

    #[test]
    fn wrong_type_reports_path() {
        let err = PipelineConfig::parse(r#"{"sources": [{"source": "OQMD", "location": "x", "batch_size": "big"}]}"#, Path::new(".")).unwrap_err();
        assert_eq!(err.field, "sources[0].batch_size");
    }
}
