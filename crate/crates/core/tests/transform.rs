mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use proptest::prelude::*;
use serde_json::json;
use trajforge::ingest::{Offset, RawRecord};
use trajforge::schema::{validate_frame, Frame, Functional, SourceId};
use trajforge::transform::{dispatch, resolve_functional, DispatchStats, FieldMap, FieldMaps, Reject};

fn corpus(source: SourceId, name: &str) -> Vec<RawRecord> {
    let dir = common::fixture_dir().join("corpus").join(name);
    let mut files: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let mut out = Vec::new();
    for (fi, f) in files.iter().enumerate() {
        for (li, line) in fs::read_to_string(f).unwrap().lines().enumerate() {
            if !line.trim().is_empty() {
                out.push(RawRecord {
                    source,
                    payload: line.as_bytes().to_vec(),
                    offset: Offset { file_index: fi, line_index: li as u64 },
                });
            }
        }
    }
    out
}

fn transform_all() -> (Vec<Frame>, Vec<Reject>, DispatchStats) {
    let maps = FieldMaps::default();
    let mut stats = DispatchStats::default();
    let (mut frames, mut rejects) = (Vec::new(), Vec::new());
    for (source, name) in [
        (SourceId::MaterialsProject, "mp"),
        (SourceId::Alexandria, "alexandria"),
        (SourceId::Oqmd, "oqmd"),
    ] {
        for raw in corpus(source, name) {
            let r = dispatch(&raw, &maps);
            stats.record(&r);
            match r {
                Ok(f) => frames.extend(f),
                Err(e) => rejects.push(e),
            }
        }
    }
    (frames, rejects, stats)
}

#[test]
fn fixture_records_dispatch_as_counted() {
    let (frames, rejects, stats) = transform_all();
    assert_eq!((stats.records_in, stats.accepted, stats.rejected, stats.empty), (84, 82, 2, 3));
    assert_eq!(stats.frames_out, frames.len() as u64);
    assert_eq!(frames.len(), 405);

    let reasons: BTreeSet<&str> = rejects.iter().map(|r| r.reason.split(':').next().unwrap()).collect();
    assert_eq!(reasons, BTreeSet::from(["ParseFailure", "UnknownFunctional"]));
    for r in &rejects {
        assert!(r.payload_excerpt.len() <= 256);
        assert_eq!(r.source, SourceId::MaterialsProject);
    }

    let ids: BTreeSet<&str> = frames.iter().map(|f| f.frame_id.as_str()).collect();
    assert_eq!(ids.len(), frames.len(), "frame ids must be unique");

    // Excluded records leave no trace.
    assert!(!frames.iter().any(|f| f.source_record_id == "mp-1900" || f.source_record_id == "mp-1901"));
    assert!(!frames.iter().any(|f| f.species.iter().any(|s| s == "Yb")));
}

#[test]
fn relaxation_numbering_per_source() {
    let (frames, _, _) = transform_all();
    let mut steps: BTreeMap<&str, Vec<(i64, i64)>> = BTreeMap::new();
    for f in &frames {
        steps.entry(&f.trajectory_id).or_default().push((f.relaxation_number, f.relaxation_step));
        assert_eq!(f.space_group, None);
        match f.source {
            SourceId::MaterialsProject | SourceId::Alexandria => assert_eq!(f.relaxation_number, 1),
            SourceId::Oqmd => {
                assert!((1..=3).contains(&f.relaxation_number));
                assert!(f.relaxation_step == 0 || f.relaxation_step == 1);
                assert_eq!(f.functional, Functional::Pbe);
            }
        }
    }
    for (id, mut s) in steps {
        s.sort();
        if id.starts_with("oqmd:") {
            // Pairs (n, 0), (n, 1) for every kept stage.
            for pair in s.chunks(2) {
                assert_eq!(pair.len(), 2, "{id}");
                assert_eq!((pair[0].1, pair[1].1), (0, 1), "{id}");
            }
        } else {
            let want: Vec<(i64, i64)> = (0..s.len() as i64).map(|i| (1, i)).collect();
            assert_eq!(s, want, "{id}");
        }
    }
    // oqmd-5005 (index 4) loses its coarse stage for missing targets.
    let k4: BTreeSet<i64> = frames.iter().filter(|f| f.source_record_id == "oqmd-5005").map(|f| f.relaxation_number).collect();
    assert!(!k4.contains(&1) && !k4.is_empty(), "{k4:?}");
}

#[test]
fn fixture_frames_are_valid_except_planted_ones() {
    let (frames, _, _) = transform_all();
    let invalid: Vec<&Frame> = frames.iter().filter(|f| !validate_frame(f).is_valid()).collect();
    assert_eq!(invalid.len(), 1, "{:?}", invalid.iter().map(|f| &f.frame_id).collect::<Vec<_>>());
    let missing = frames.iter().filter(|f| !f.has_targets()).count();
    assert_eq!(missing, 1);
}

#[test]
fn functional_names_resolve_case_insensitively() {
    for (name, f) in [
        ("GGA", Functional::Pbe),
        ("gga+u", Functional::Pbe),
        ("PBEsol", Functional::PbeSol),
        ("SCAN", Functional::Scan),
        ("r2SCAN", Functional::R2Scan),
        ("R2SCAN+U", Functional::R2Scan),
    ] {
        assert_eq!(resolve_functional(name).unwrap(), f, "{name}");
    }
    for bad in ["HSE06", "LDA", ""] {
        assert!(resolve_functional(bad).is_err(), "{bad}");
    }
}

#[test]
fn field_map_reads_a_nested_dump_layout() {
    let map: FieldMap = serde_json::from_value(json!({
        "task_id": "/task_id",
        "functional": "/calcs_reversed/0/run_type",
        "ionic_steps": {
            "path": "/calcs_reversed/0/output/ionic_steps",
            "each": {"fields": {"energy": "/e_fr_energy", "forces": "/forces", "structure": "/structure"}}
        }
    }))
    .unwrap();
    let doc = json!({
        "task_id": "mp-77",
        "calcs_reversed": [{
            "run_type": "GGA+U",
            "output": {"ionic_steps": [
                {"e_fr_energy": -5.0, "forces": [[0.1, 0.0, 0.0]],
                 "structure": {"lattice": [[3.0,0,0],[0,3.0,0],[0,0,3.0]], "species": ["Fe"], "positions": [[0,0,0]]}},
                {"e_fr_energy": -5.01, "forces": [[0.0, 0.0, 0.0]],
                 "structure": {"lattice": [[3.0,0,0],[0,3.0,0],[0,0,3.0]], "species": ["Fe"], "positions": [[0.1,0,0]]}}
            ]}
        }]
    });
    let raw = RawRecord {
        source: SourceId::MaterialsProject,
        payload: serde_json::to_vec(&doc).unwrap(),
        offset: Offset { file_index: 0, line_index: 0 },
    };
    let maps = FieldMaps([(SourceId::MaterialsProject, map)].into_iter().collect());
    let frames = dispatch(&raw, &maps).unwrap();
    assert_eq!(frames.len(), 2);
    assert_eq!(frames[1].frame_id, "mp:mp-77:1:1");
    assert_eq!(frames[1].energy, Some(-5.01));
    assert_eq!(frames[0].functional, Functional::Pbe);
    // Without the map the same document is not a canonical task.
    assert!(dispatch(&raw, &FieldMaps::default()).is_err());
}

proptest! {
    #[test]
    fn mp_tasks_expand_to_one_frame_per_step(
        id in "[a-z0-9:-]{1,12}",
        energies in prop::collection::vec(-50.0f64..0.0, 0..8),
        label in prop::sample::select(vec!["GGA", "GGA+U", "PBEsol", "SCAN", "r2SCAN"]),
    ) {
        let steps: Vec<_> = energies.iter().map(|e| json!({
            "structure": {"lattice": [[3.0,0,0],[0,3.0,0],[0,0,3.0]], "species": ["Cu"], "positions": [[0,0,0]]},
            "energy": e,
            "forces": [[0.0, 0.0, 0.0]],
        })).collect();
        let doc = json!({"task_id": id, "functional": label, "ionic_steps": steps});
        let raw = RawRecord {
            source: SourceId::MaterialsProject,
            payload: serde_json::to_vec(&doc).unwrap(),
            offset: Offset { file_index: 0, line_index: 0 },
        };
        let frames = dispatch(&raw, &FieldMaps::default()).unwrap();
        prop_assert_eq!(frames.len(), energies.len());
        for (i, f) in frames.iter().enumerate() {
            prop_assert_eq!(f.relaxation_step, i as i64);
            prop_assert_eq!(f.energy, Some(energies[i]));
            prop_assert_eq!(&f.trajectory_id, &format!("mp:{id}"));
            // JSONL round trip is lossless, floats included.
            prop_assert_eq!(&Frame::from_json_line(&f.to_json_line()).unwrap(), f);
        }
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..200), src in 0usize..3) {
        let raw = RawRecord { source: SourceId::ALL[src], payload: bytes, offset: Offset { file_index: 0, line_index: 9 } };
        if let Err(r) = dispatch(&raw, &FieldMaps::default()) {
            prop_assert_eq!(r.offset.line_index, 9);
            prop_assert!(r.payload_excerpt.len() <= 256);
        }
    }
}
