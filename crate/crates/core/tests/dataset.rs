use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use cirforge::backend::UsageRecord;
use cirforge::dataset::{
    compute_stats, read_json, read_jsonl, read_triplets, render_stats, write_json, write_jsonl,
    write_triplets, DatasetError, DatasetManifest, Split, SplitStats, Splits,
};
use cirforge::model::{Caption, CaptionKind, CirTriplet, ImageRef, ValidationConfig};
use proptest::prelude::*;
use serde_json::Value;

fn triplet(q: &str, t: &str, text: &str, distractors: &[&str]) -> CirTriplet {
    CirTriplet {
        pair_id: format!("{q}__{t}"),
        query_id: q.into(),
        target_id: t.into(),
        caption: Caption {
            text: text.into(),
            kind: CaptionKind::Atomic,
            source_indices: vec![0],
            token_count: 6,
        },
        distractor_ids: distractors.iter().map(|s| s.to_string()).collect(),
    }
}

fn manifest(splits: Splits) -> DatasetManifest {
    DatasetManifest {
        name: "t".into(),
        splits,
        corpus: vec![],
        created: "2024-01-01T00:00:00Z".into(),
        config_digest: "0".repeat(64),
    }
}

#[test]
fn triplets_round_trip_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ValidationConfig::default();
    let triplets: Vec<CirTriplet> = (0..100)
        .map(|i| {
            let d = format!("x{}", i % 7);
            triplet(
                &format!("q{i}"),
                &format!("t{i}"),
                &format!("Add lamp number {i}."),
                &[&d],
            )
        })
        .collect();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    write_triplets(&a, &triplets, &cfg).unwrap();
    let back = read_triplets(&a, &cfg).unwrap();
    assert_eq!(back, triplets);
    write_triplets(&b, &back, &cfg).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read_to_string(&a).unwrap().lines().count(), 100);
}

#[test]
fn read_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ValidationConfig::default();
    let p = dir.path().join("t.jsonl");
    let good = serde_json::to_string(&triplet("a", "b", "Add a lamp.", &[])).unwrap();
    let mut v: Value = serde_json::from_str(&good).unwrap();
    v.as_object_mut().unwrap().remove("caption");
    std::fs::write(&p, format!("{good}\n{good}\n{v}\n")).unwrap();
    match read_triplets(&p, &cfg) {
        Err(DatasetError::Parse { line, message, .. }) => {
            assert_eq!(line, 3);
            assert!(message.contains("caption"));
        }
        other => panic!("expected a parse error, got {other:?}"),
    }

    // A well-formed line that breaks an invariant.
    let bad = serde_json::to_string(&triplet("a", "b", "Add a lamp.", &["a"])).unwrap();
    std::fs::write(&p, format!("{good}\n{bad}\n")).unwrap();
    assert!(matches!(
        read_triplets(&p, &cfg),
        Err(DatasetError::Invalid { line: 2, .. })
    ));

    // Writing refuses invalid input before touching the file.
    let q = dir.path().join("w.jsonl");
    let err = write_triplets(&q, &[triplet("a", "a", "Add a lamp.", &[])], &cfg).unwrap_err();
    assert!(matches!(err, DatasetError::Invalid { line: 1, .. }));
    assert!(!q.exists());
}

#[test]
fn empty_file_reads_as_empty() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("e.jsonl");
    std::fs::write(&p, "").unwrap();
    assert!(read_triplets(&p, &ValidationConfig::default())
        .unwrap()
        .is_empty());
    let none: Vec<ImageRef> = read_jsonl(&p).unwrap();
    assert!(none.is_empty());
}

/// Three pairs, twelve triplets and five distinct distractors, counted by hand.
fn stats_fixture() -> (DatasetManifest, Vec<CirTriplet>, Vec<UsageRecord>) {
    let m = manifest(Splits {
        train: vec!["a__b".into(), "c__d".into()],
        val: vec!["e__f".into()],
        test: vec![],
    });
    let mut t = vec![];
    for i in 0..5 {
        t.push(triplet("a", "b", &format!("Add lamp {i}."), &["x1", "x2"]));
    }
    for i in 0..4 {
        t.push(triplet(
            "c",
            "d",
            &format!("Add rug {i}."),
            &["x2", "x3", "x4"],
        ));
    }
    for i in 0..3 {
        t.push(triplet("e", "f", &format!("Add bed {i}."), &["x5"]));
    }
    let rec = |id: &str, pair: &str, p, o| UsageRecord {
        request_id: id.into(),
        pair_id: Some(pair.into()),
        stage: None,
        prompt_tokens: p,
        output_tokens: o,
    };
    let usage = vec![
        rec("1", "a__b", 100, 10),
        rec("2", "a__b", 50, 5),
        rec("3", "c__d", 30, 3),
    ];
    (m, t, usage)
}

#[test]
fn stats_match_hand_count() {
    let (m, t, usage) = stats_fixture();
    let distractors: BTreeSet<&String> = t.iter().flat_map(|x| &x.distractor_ids).collect();
    let pairs: BTreeSet<&String> = t.iter().map(|x| &x.pair_id).collect();
    assert_eq!((pairs.len(), t.len(), distractors.len()), (3, 12, 5));

    let s = compute_stats(&m, &t, &usage).unwrap();
    let want = BTreeMap::from([
        (
            Split::Train,
            SplitStats {
                image_pairs: 2,
                cir_triplets: 9,
                total_images: 8,
            },
        ),
        (
            Split::Val,
            SplitStats {
                image_pairs: 1,
                cir_triplets: 3,
                total_images: 3,
            },
        ),
        (Split::Test, SplitStats::default()),
    ]);
    assert_eq!(s.splits, want);
    assert_eq!(s.avg_prompt_tokens, Some(90.0));
    assert_eq!(s.avg_output_tokens, Some(9.0));

    let table = render_stats(&s);
    assert!(table.starts_with("Split  Image pairs  CIR triplets  Total images\n"));
    assert!(table.contains("Test             0             0             0"));
}

#[test]
fn stats_table_uses_thousands_separators() {
    let mut splits = BTreeMap::new();
    splits.insert(
        Split::Train,
        SplitStats {
            image_pairs: 65364,
            cir_triplets: 415447,
            total_images: 1000,
        },
    );
    let s = cirforge::dataset::DatasetStats {
        splits,
        avg_prompt_tokens: None,
        avg_output_tokens: None,
    };
    let table = render_stats(&s);
    assert!(table.contains("65,364"));
    assert!(table.contains("415,447"));
    assert!(table.contains("Avg. prompt tokens: n/a"));
}

#[test]
fn stats_reject_inconsistent_inputs() {
    let (mut m, t, usage) = stats_fixture();
    m.splits.test.push("a__b".into());
    assert!(matches!(
        compute_stats(&m, &t, &usage),
        Err(DatasetError::SplitOverlap { .. })
    ));

    let (mut m, t, usage) = stats_fixture();
    m.splits.val.clear();
    assert!(matches!(
        compute_stats(&m, &t, &usage),
        Err(DatasetError::UnassignedPair(p)) if p == "e__f"
    ));

    let (m, _, _) = stats_fixture();
    let s = compute_stats(&m, &[], &[]).unwrap();
    assert!(s.splits.values().all(|x| *x == SplitStats::default()));
    assert_eq!(s.avg_prompt_tokens, None);
}

#[test]
fn manifest_round_trip_and_corpus_check() {
    let dir = tempfile::tempdir().unwrap();
    let (mut m, _, _) = stats_fixture();
    m.corpus = ["a", "b", "c", "d", "e"]
        .iter()
        .map(|id| ImageRef {
            id: id.to_string(),
            path: format!("{id}.png"),
            class_id: None,
        })
        .collect();
    let p = dir.path().join("m.json");
    write_json(&p, &m).unwrap();
    let back: DatasetManifest = read_json(&p).unwrap();
    assert_eq!(back, m);

    let pairs: Vec<cirforge::model::ImagePair> = ["a__b", "e__f"]
        .iter()
        .map(|id| {
            let (q, t) = id.split_once("__").unwrap();
            let r = |x: &str| ImageRef {
                id: x.into(),
                path: String::new(),
                class_id: None,
            };
            cirforge::model::ImagePair {
                pair_id: id.to_string(),
                query: r(q),
                target: r(t),
                emb_similarity: 0.0,
                hash_distance: 30,
            }
        })
        .collect();
    assert!(matches!(
        m.validate(Some(&pairs)),
        Err(DatasetError::UnknownImage { image_id, .. }) if image_id == "f"
    ));
    assert!(m.validate(Some(&pairs[..1])).is_ok());
}

// Streams the file with untyped JSON and counts per split.
fn recount(path: &Path, assign: &HashMap<String, Split>) -> BTreeMap<Split, SplitStats> {
    let mut pairs: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    let mut images: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
    let mut count: BTreeMap<Split, usize> = BTreeMap::new();
    let f = std::io::BufReader::new(std::fs::File::open(path).unwrap());
    for line in f.lines() {
        let v: Value = serde_json::from_str(&line.unwrap()).unwrap();
        let s = assign[v["pair_id"].as_str().unwrap()];
        pairs
            .entry(s)
            .or_default()
            .insert(v["pair_id"].as_str().unwrap().into());
        *count.entry(s).or_default() += 1;
        let im = images.entry(s).or_default();
        im.insert(v["query_id"].as_str().unwrap().into());
        im.insert(v["target_id"].as_str().unwrap().into());
        for d in v["distractor_ids"].as_array().unwrap() {
            im.insert(d.as_str().unwrap().into());
        }
    }
    Split::ALL
        .into_iter()
        .map(|s| {
            (
                s,
                SplitStats {
                    image_pairs: pairs.get(&s).map_or(0, |x| x.len()),
                    cir_triplets: count.get(&s).copied().unwrap_or(0),
                    total_images: images.get(&s).map_or(0, |x| x.len()),
                },
            )
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn stats_equal_streaming_recount(
        spec in prop::collection::vec((0usize..12, 0usize..12, 0usize..4, prop::collection::btree_set(0usize..30, 0..5)), 0..60),
        split_of in prop::collection::vec(0usize..3, 144),
    ) {
        let triplets: Vec<CirTriplet> = spec
            .iter()
            .filter(|(q, t, _, _)| q != t)
            .map(|(q, t, n, ds)| {
                let (q, t) = (format!("i{q}"), format!("i{t}"));
                let ds: Vec<String> = ds.iter().map(|d| format!("i{d}")).filter(|d| *d != q && *d != t).collect();
                let dr: Vec<&str> = ds.iter().map(String::as_str).collect();
                triplet(&q, &t, &format!("Add item {n}."), &dr)
            })
            .collect();
        let mut splits = Splits::default();
        let mut assign = HashMap::new();
        let ids: BTreeSet<&String> = triplets.iter().map(|t| &t.pair_id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let s = Split::ALL[split_of[k % split_of.len()]];
            splits.get_mut(s).push(id.clone());
            assign.insert(id.clone(), s);
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        write_jsonl(&p, &triplets).unwrap();
        let stats = compute_stats(&manifest(splits), &read_jsonl::<CirTriplet>(&p).unwrap(), &[]).unwrap();
        prop_assert_eq!(stats.splits, recount(&p, &assign));
    }
}
