//! Trajectory-level, element-stratified train/test splits with source
//! balancing.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::schema::{ElementSymbol, SourceId, Trajectory};
use crate::util::{stable_hash, sub_seed, write_atomic};

/// One bit per element, indexed by atomic number − 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ElementSet([u64; 2]);

impl ElementSet {
    pub fn insert(&mut self, e: ElementSymbol) {
        let i = e.index();
        self.0[i / 64] |= 1 << (i % 64);
    }

    pub fn contains(&self, e: ElementSymbol) -> bool {
        let i = e.index();
        self.0[i / 64] & (1 << (i % 64)) != 0
    }

    pub fn union(&self, other: &ElementSet) -> ElementSet {
        ElementSet([self.0[0] | other.0[0], self.0[1] | other.0[1]])
    }

    pub fn is_subset(&self, other: &ElementSet) -> bool {
        self.0[0] & !other.0[0] == 0 && self.0[1] & !other.0[1] == 0
    }

    pub fn is_empty(&self) -> bool {
        self.0 == [0, 0]
    }

    pub fn len(&self) -> usize {
        (self.0[0].count_ones() + self.0[1].count_ones()) as usize
    }

    pub fn iter(&self) -> impl Iterator<Item = ElementSymbol> + '_ {
        ElementSymbol::all().filter(move |e| self.contains(*e))
    }
}

impl FromIterator<ElementSymbol> for ElementSet {
    fn from_iter<I: IntoIterator<Item = ElementSymbol>>(iter: I) -> Self {
        let mut s = ElementSet::default();
        for e in iter {
            s.insert(e);
        }
        s
    }
}

pub fn element_signature(traj: &Trajectory) -> ElementSet {
    traj.composition().elements().collect()
}

/// What the splitter needs to know about a trajectory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrajMeta {
    pub trajectory_id: String,
    pub source: SourceId,
    pub elements: ElementSet,
}

impl From<&Trajectory> for TrajMeta {
    fn from(t: &Trajectory) -> Self {
        TrajMeta {
            trajectory_id: t.id().to_string(),
            source: t.source(),
            elements: element_signature(t),
        }
    }
}

fn default_test_fraction() -> f64 {
    0.2
}

pub fn default_source_balance() -> BTreeMap<SourceId, f64> {
    BTreeMap::from([
        (SourceId::MaterialsProject, 0.10),
        (SourceId::Oqmd, 0.10),
        (SourceId::Alexandria, 0.80),
    ])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_source_balance")]
    pub source_balance: BTreeMap<SourceId, f64>,
    /// Trajectory count to subsample to; `None` takes the largest count
    /// the source balance allows.
    #[serde(default)]
    pub target_size: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: default_test_fraction(),
            seed: 0,
            source_balance: default_source_balance(),
            target_size: None,
        }
    }
}

impl SplitConfig {
    /// Returns the offending field name and reason.
    pub fn validate(&self) -> Result<(), (String, String)> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(("test_fraction".into(), "must lie in (0, 1)".into()));
        }
        for (s, f) in &self.source_balance {
            if !(f.is_finite() && *f >= 0.0) {
                return Err((format!("source_balance.{}", s.name()), "must be a finite non-negative fraction".into()));
            }
        }
        let total: f64 = self.source_balance.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(("source_balance".into(), format!("fractions sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SplitError {
    #[error("split infeasible: {0}")]
    Infeasible(String),
    #[error("source {source_id} has {available} trajectories but its quota is {quota} (deficit {})", .quota - .available)]
    InsufficientPool { source_id: SourceId, available: usize, quota: usize },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitAssignment {
    pub labels: BTreeMap<String, Label>,
    /// Test candidates moved to train by the element-coverage rule.
    pub reassigned: usize,
}

impl SplitAssignment {
    pub fn count(&self, label: Label) -> usize {
        self.labels.values().filter(|l| **l == label).count()
    }

    pub fn ids(&self, label: Label) -> impl Iterator<Item = &str> {
        self.labels.iter().filter(move |(_, l)| **l == label).map(|(id, _)| id.as_str())
    }

    /// JSONL of `{"trajectory_id", "label"}` ordered by trajectory id.
    pub fn to_jsonl(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            trajectory_id: &'a str,
            label: Label,
        }
        let mut out = Vec::new();
        for (id, label) in &self.labels {
            serde_json::to_writer(&mut out, &Row { trajectory_id: id, label: *label }).expect("row serializes");
            out.write_all(b"\n").expect("vec write");
        }
        String::from_utf8(out).expect("json is utf-8")
    }

    pub fn write(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

/// Number of test trajectories for a stratum of size `n`, rounding toward train.
pub fn stratum_test_count(n: usize, test_fraction: f64) -> usize {
    ((n as f64) * test_fraction + 1e-9).floor() as usize
}

fn hash_order<'a>(items: &mut [&'a TrajMeta], seed: u64) {
    items.sort_by_cached_key(|t| (stable_hash(seed, t.trajectory_id.as_bytes()), t.trajectory_id.clone()));
}

/// Splits per exact element-signature stratum. Within a stratum,
/// trajectories are ranked by a seeded hash of their id and the first
/// `floor(n * f)` become test candidates. Candidates carrying an element
/// absent from every train trajectory are then moved to train.
pub fn stratified_split(trajs: &[TrajMeta], cfg: &SplitConfig) -> Result<SplitAssignment, SplitError> {
    if trajs.len() < 2 {
        return Err(SplitError::Infeasible(format!("{} trajectories, need at least 2", trajs.len())));
    }
    let seed = sub_seed(cfg.seed, "split");
    let mut strata: BTreeMap<ElementSet, Vec<&TrajMeta>> = BTreeMap::new();
    for t in trajs {
        strata.entry(t.elements).or_default().push(t);
    }
    let mut labels = BTreeMap::new();
    let mut candidates = Vec::new();
    let mut train_elements = ElementSet::default();
    for members in strata.values_mut() {
        hash_order(members, seed);
        let n_test = stratum_test_count(members.len(), cfg.test_fraction);
        for (i, t) in members.iter().enumerate() {
            if i < n_test {
                candidates.push(*t);
            } else {
                labels.insert(t.trajectory_id.clone(), Label::Train);
                train_elements = train_elements.union(&t.elements);
            }
        }
    }
    // Moving a candidate to train only grows the train element set, so
    // one ordered pass reaches the fixed point.
    hash_order(&mut candidates, seed);
    let mut reassigned = 0;
    for t in candidates {
        if t.elements.is_subset(&train_elements) {
            labels.insert(t.trajectory_id.clone(), Label::Test);
        } else {
            labels.insert(t.trajectory_id.clone(), Label::Train);
            train_elements = train_elements.union(&t.elements);
            reassigned += 1;
        }
    }
    let assignment = SplitAssignment { labels, reassigned };
    if assignment.count(Label::Test) == 0 {
        return Err(SplitError::Infeasible("test set would be empty".into()));
    }
    Ok(assignment)
}

/// Largest-remainder apportionment of `target` over `fractions`, which must
/// be positive and are renormalized to sum to one. Ties on the remainder go
/// to the earlier key.
pub fn largest_remainder_quotas(fractions: &BTreeMap<SourceId, f64>, target: usize) -> BTreeMap<SourceId, usize> {
    let total: f64 = fractions.values().sum();
    if fractions.is_empty() || total <= 0.0 {
        return BTreeMap::new();
    }
    let mut quotas = BTreeMap::new();
    let mut remainders = Vec::new();
    let mut assigned = 0;
    for (i, (s, f)) in fractions.iter().enumerate() {
        let exact = f / total * target as f64;
        let base = (exact + 1e-9).floor() as usize;
        quotas.insert(*s, base);
        assigned += base;
        remainders.push((exact - base as f64, i, *s));
    }
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, _, s) in remainders.into_iter().take(target.saturating_sub(assigned)) {
        *quotas.get_mut(&s).expect("present") += 1;
    }
    quotas
}

/// Largest total whose quotas all fit in their pools. Quotas are not
/// monotone in the total under largest-remainder rounding, so candidates
/// are scanned downwards. A fitting total needs floor(f·T) <= pool for
/// every source, which bounds T below (pool + 1) / f.
pub fn max_balanced_size(fractions: &BTreeMap<SourceId, f64>, pools: &BTreeMap<SourceId, usize>) -> usize {
    let sum: f64 = fractions.values().sum();
    if fractions.is_empty() || sum <= 0.0 {
        return 0;
    }
    let bound = fractions
        .iter()
        .map(|(s, f)| (pools.get(s).copied().unwrap_or(0) + 1) as f64 * sum / f)
        .fold(f64::INFINITY, f64::min);
    let start = (bound.ceil() as usize).saturating_add(1);
    (0..=start)
        .rev()
        .find(|&t| {
            largest_remainder_quotas(fractions, t)
                .iter()
                .all(|(s, q)| *q <= pools.get(s).copied().unwrap_or(0))
        })
        .unwrap_or(0)
}

/// Subsamples each source pool to its quota of `cfg.target_size`. Sources
/// with no trajectories are dropped from the balance and the remaining
/// fractions renormalized. Without a target size the largest total that
/// honours the balance is used, so a functional served by a single source
/// keeps everything.
pub fn balance_sources(trajs: &[TrajMeta], cfg: &SplitConfig) -> Result<Vec<TrajMeta>, SplitError> {
    let mut pools: BTreeMap<SourceId, Vec<&TrajMeta>> = BTreeMap::new();
    for t in trajs {
        pools.entry(t.source).or_default().push(t);
    }
    let fractions: BTreeMap<SourceId, f64> = cfg
        .source_balance
        .iter()
        .filter(|(s, f)| **f > 0.0 && pools.contains_key(s))
        .map(|(s, f)| (*s, *f))
        .collect();
    let target = match cfg.target_size {
        Some(t) => t,
        None => {
            let sizes = pools.iter().map(|(s, p)| (*s, p.len())).collect();
            max_balanced_size(&fractions, &sizes)
        }
    };
    let quotas = largest_remainder_quotas(&fractions, target);
    let seed = sub_seed(cfg.seed, "balance");
    let mut out = Vec::new();
    for (source, quota) in quotas {
        let pool = pools.get_mut(&source).expect("filtered on presence");
        if pool.len() < quota {
            return Err(SplitError::InsufficientPool { source_id: source, available: pool.len(), quota });
        }
        hash_order(pool, seed);
        out.extend(pool.iter().take(quota).map(|t| (*t).clone()));
    }
    out.sort_by(|a, b| a.trajectory_id.cmp(&b.trajectory_id));
    Ok(out)
}

/// Checks the split invariants: no id on both sides and every test element
/// covered by train. Returns a description of the first violation.
pub fn check_split(trajs: &[TrajMeta], a: &SplitAssignment) -> Result<(), String> {
    let by_id: BTreeMap<&str, &TrajMeta> = trajs.iter().map(|t| (t.trajectory_id.as_str(), t)).collect();
    let train: BTreeSet<&str> = a.ids(Label::Train).collect();
    let test: BTreeSet<&str> = a.ids(Label::Test).collect();
    if let Some(id) = train.intersection(&test).next() {
        return Err(format!("{id} in both train and test"));
    }
    let mut covered = ElementSet::default();
    for id in &train {
        covered = covered.union(&by_id.get(id).ok_or(format!("unknown id {id}"))?.elements);
    }
    for id in &test {
        let t = by_id.get(id).ok_or(format!("unknown id {id}"))?;
        if !t.elements.is_subset(&covered) {
            return Err(format!("{id} has elements unseen in train"));
        }
    }
    Ok(())
}
