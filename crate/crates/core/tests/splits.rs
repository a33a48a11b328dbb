use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;
use trajforge::schema::{ElementSymbol, SourceId};
use trajforge::splits::{
    balance_sources, check_split, largest_remainder_quotas, max_balanced_size, stratified_split, ElementSet, Label,
    SplitConfig, SplitError, TrajMeta,
};

fn elements(symbols: &[&str]) -> ElementSet {
    let mut s = ElementSet::default();
    for e in symbols {
        s.insert(ElementSymbol::parse(e).unwrap());
    }
    s
}

const CHEM: [&[&str]; 7] = [&["Fe", "O"], &["Cu"], &["Li", "O"], &["Fe", "Ni"], &["Si", "O"], &["Yb"], &["Al", "Cu", "Ni"]];

fn metas(spec: &[(usize, usize)]) -> Vec<TrajMeta> {
    spec.iter()
        .enumerate()
        .map(|(i, &(src, chem))| TrajMeta {
            trajectory_id: format!("t{i:04}"),
            source: SourceId::ALL[src % 3],
            elements: elements(CHEM[chem % CHEM.len()]),
        })
        .collect()
}

/// Hamilton apportionment restated from scratch with exact rationals on a
/// common denominator; fractions given in thousandths.
fn hamilton(parts: &[(SourceId, u64)], total: u64) -> BTreeMap<SourceId, u64> {
    let denom: u64 = parts.iter().map(|p| p.1).sum();
    let mut q: BTreeMap<SourceId, u64> = parts.iter().map(|&(s, w)| (s, w * total / denom)).collect();
    let mut rem: Vec<(u64, usize, SourceId)> =
        parts.iter().enumerate().map(|(i, &(s, w))| (w * total % denom, i, s)).collect();
    rem.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = total - q.values().sum::<u64>();
    for (_, _, s) in rem.into_iter().take(short as usize) {
        *q.get_mut(&s).unwrap() += 1;
    }
    q
}

fn as_fractions(parts: &[(SourceId, u64)]) -> BTreeMap<SourceId, f64> {
    parts.iter().map(|&(s, w)| (s, w as f64 / 1000.0)).collect()
}

#[test]
fn default_balance_quotas() {
    let f = SplitConfig::default().source_balance;
    for (target, mp, oqmd, alex) in [(10, 1, 1, 8), (31, 3, 3, 25), (5, 1, 0, 4), (1000, 100, 100, 800)] {
        let q = largest_remainder_quotas(&f, target);
        assert_eq!(
            (q[&SourceId::MaterialsProject], q[&SourceId::Oqmd], q[&SourceId::Alexandria]),
            (mp, oqmd, alex),
            "target {target}"
        );
    }
}

#[test]
fn single_member_strata_train_and_tiny_inputs_infeasible() {
    let cfg = SplitConfig { test_fraction: 0.2, ..Default::default() };
    // Every stratum has one member: floor(0.2) = 0, so everything trains
    // and the test set is empty.
    let m = metas(&[(0, 0), (0, 1), (0, 2)]);
    assert!(matches!(stratified_split(&m, &cfg), Err(SplitError::Infeasible(_))));
    assert!(matches!(stratified_split(&m[..1], &cfg), Err(SplitError::Infeasible(_))));
}

#[test]
fn every_test_element_is_covered_by_its_own_stratum() {
    // floor(n f) < n for f < 1, so each stratum with a test candidate keeps
    // a train member with the same elements and nothing is ever moved.
    let mut spec = vec![(1, 5); 5];
    spec.extend([(1, 0); 5]);
    spec.extend([(1, 6); 2]);
    let m = metas(&spec);
    for f in [0.2, 0.4, 0.6, 0.99] {
        let cfg = SplitConfig { test_fraction: f, seed: 3, ..Default::default() };
        let a = stratified_split(&m, &cfg).unwrap();
        assert_eq!(a.reassigned, 0);
        check_split(&m, &a).unwrap();
    }
}

#[test]
fn membership_is_uniform_over_seeds() {
    // One stratum of 10 with f = 0.3: each member should be test with
    // probability 0.3. Over 2000 seeds the per-member rate has standard
    // error ~0.01; allow 5 of them.
    let m = metas(&[(1, 0); 10]);
    let mut hits = vec![0u32; 10];
    let n = 2000;
    for seed in 0..n {
        let cfg = SplitConfig { test_fraction: 0.3, seed, ..Default::default() };
        let a = stratified_split(&m, &cfg).unwrap();
        assert_eq!(a.count(Label::Test), 3);
        for (i, t) in m.iter().enumerate() {
            if a.labels[&t.trajectory_id] == Label::Test {
                hits[i] += 1;
            }
        }
    }
    for (i, h) in hits.iter().enumerate() {
        let rate = *h as f64 / n as f64;
        assert!((rate - 0.3).abs() < 0.05, "member {i}: {rate}");
    }
}

fn meta_strategy() -> impl Strategy<Value = Vec<TrajMeta>> {
    prop::collection::vec((0usize..3, 0usize..7), 0..120).prop_map(|s| metas(&s))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn quotas_match_hamilton(w in prop::collection::vec(1u64..1000, 1..4), total in 0u64..5000) {
        let parts: Vec<(SourceId, u64)> = w.iter().enumerate().map(|(i, &x)| (SourceId::ALL[i], x)).collect();
        let q = largest_remainder_quotas(&as_fractions(&parts), total as usize);
        let want = hamilton(&parts, total);
        prop_assert_eq!(q.values().sum::<usize>() as u64, total);
        for (s, n) in want {
            prop_assert_eq!(q[&s] as u64, n);
        }
    }

    #[test]
    fn max_balanced_size_is_largest_fitting(pools in prop::collection::vec(0usize..60, 3)) {
        let fractions = SplitConfig::default().source_balance;
        let pool_map: BTreeMap<SourceId, usize> = SourceId::ALL.iter().copied().zip(pools.iter().copied()).collect();
        let got = max_balanced_size(&fractions, &pool_map);
        let fits = |t: usize| largest_remainder_quotas(&fractions, t).iter().all(|(s, q)| *q <= pool_map[s]);
        prop_assert!(fits(got));
        // Brute force: nothing larger up to the total pool size fits.
        let total: usize = pools.iter().sum();
        for t in got + 1..=total {
            prop_assert!(!fits(t), "{} also fits", t);
        }
    }

    #[test]
    fn split_is_a_valid_partition(m in meta_strategy(), f in 0.05f64..0.6, seed in any::<u64>()) {
        let cfg = SplitConfig { test_fraction: f, seed, ..Default::default() };
        match stratified_split(&m, &cfg) {
            Ok(a) => {
                prop_assert_eq!(a.labels.len(), m.len());
                // Independent restatement of the invariants.
                let mut covered = BTreeSet::new();
                for t in &m {
                    if a.labels[&t.trajectory_id] == Label::Train {
                        covered.extend(t.elements.iter());
                    }
                }
                for t in &m {
                    if a.labels[&t.trajectory_id] == Label::Test {
                        prop_assert!(t.elements.iter().all(|e| covered.contains(&e)));
                    }
                }
                // Test never exceeds the per-stratum floors.
                let mut strata: BTreeMap<ElementSet, usize> = BTreeMap::new();
                for t in &m {
                    *strata.entry(t.elements).or_default() += 1;
                }
                let cap: usize = strata.values().map(|&n| ((n as f64) * f + 1e-9).floor() as usize).sum();
                prop_assert_eq!(a.count(Label::Test), cap);
                prop_assert_eq!(a.reassigned, 0);
                prop_assert!(check_split(&m, &a).is_ok());
            }
            Err(SplitError::Infeasible(_)) => {
                let mut strata: BTreeMap<ElementSet, usize> = BTreeMap::new();
                for t in &m {
                    *strata.entry(t.elements).or_default() += 1;
                }
                let cap: usize = strata.values().map(|&n| ((n as f64) * f + 1e-9).floor() as usize).sum();
                prop_assert!(m.len() < 2 || cap == 0);
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }

    #[test]
    fn split_ignores_input_order(m in meta_strategy(), seed in any::<u64>(), rot in 0usize..200) {
        let cfg = SplitConfig { test_fraction: 0.25, seed, ..Default::default() };
        let mut shuffled = m.clone();
        if !shuffled.is_empty() {
            let k = rot % shuffled.len();
            shuffled.rotate_left(k);
            shuffled.reverse();
        }
        prop_assert_eq!(stratified_split(&m, &cfg), stratified_split(&shuffled, &cfg));
        prop_assert_eq!(balance_sources(&m, &cfg), balance_sources(&shuffled, &cfg));
    }

    #[test]
    fn balancing_meets_quotas(m in meta_strategy(), seed in any::<u64>(), target in prop::option::of(0usize..80)) {
        let cfg = SplitConfig { seed, target_size: target, ..Default::default() };
        let present: BTreeMap<SourceId, usize> = m.iter().fold(BTreeMap::new(), |mut acc, t| {
            *acc.entry(t.source).or_default() += 1;
            acc
        });
        let fractions: BTreeMap<SourceId, f64> =
            cfg.source_balance.iter().filter(|(s, _)| present.contains_key(s)).map(|(s, f)| (*s, *f)).collect();
        match balance_sources(&m, &cfg) {
            Ok(sel) => {
                let total = target.unwrap_or_else(|| max_balanced_size(&fractions, &present));
                prop_assert_eq!(sel.len(), if fractions.is_empty() { 0 } else { total });
                let quotas = largest_remainder_quotas(&fractions, total);
                for (s, q) in quotas {
                    prop_assert_eq!(sel.iter().filter(|t| t.source == s).count(), q);
                }
                let ids: BTreeSet<&str> = m.iter().map(|t| t.trajectory_id.as_str()).collect();
                prop_assert!(sel.iter().all(|t| ids.contains(t.trajectory_id.as_str())));
            }
            Err(SplitError::InsufficientPool { source_id, available, quota }) => {
                prop_assert!(target.is_some());
                prop_assert_eq!(present.get(&source_id).copied().unwrap_or(0), available);
                prop_assert!(available < quota);
            }
            Err(e) => prop_assert!(false, "{}", e),
        }
    }
}
