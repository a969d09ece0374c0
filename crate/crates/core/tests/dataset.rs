use std::collections::HashSet;
use std::fs;

use eva_core::dataset::*;
use eva_core::Error;

fn small() -> SplitSpec {
    SplitSpec {
        n_states: 4,
        n_objects: 5,
        train_pairs: 10,
        val_seen_pairs: 6,
        val_unseen_pairs: 4,
        test_seen_pairs: 6,
        test_unseen_pairs: 4,
        images_per_pair: 3,
        eval_images_per_pair: 2,
        patches: 4,
        patch_dim: 3,
        noise: 0.2,
        seed: 9,
    }
}

#[test]
fn benchmark_rows_parse() {
    let s = SplitStats::parse_row("MIT-States & 115 & 245 & 28175 & 1262 & 300 &300 &400 &400").unwrap();
    assert_eq!((s.n_states, s.n_objects, s.train_seen), (115, 245, 1262));
    assert_eq!((s.val_seen, s.val_unseen, s.test_seen, s.test_unseen), (300, 300, 400, 400));
    assert_eq!(s.name, "MIT-States");
    let s = SplitStats::parse_row("UT-Zappos | 16 | 12 | 192 | 83 | 15 | 15 | 18 | 18 \\\\").unwrap();
    assert_eq!(s.n_compositions, 192);
    assert!(SplitStats::parse_row("X & 2 & 3 & 7 & 1 & 1 & 1 & 1 & 1").is_err());
    assert!(SplitStats::parse_row("X & 2 & 3 & 6").is_err());
}

#[test]
fn default_counts_enumerate() {
    let ds = generate(&SplitSpec::default()).unwrap();
    let counts: Vec<usize> = Split::ALL.iter().map(|&s| ds.count(s)).collect();
    assert_eq!(counts, [800, 400, 400, 400, 400]);
    assert_eq!(ds.labels.seen.len(), 40);
    assert_eq!(ds.labels.target(Phase::Test, WorldMode::Closed).0.len(), 60);
    assert_eq!(ds.labels.open_world_size(), 80);
    let st = SplitSpec::default().stats("synthetic");
    assert_eq!(st.n_compositions, 80);
}

#[test]
fn regeneration_is_bit_identical() {
    let a = generate(&small()).unwrap();
    let b = generate(&small()).unwrap();
    assert_eq!(a, b);
    let c = generate(&SplitSpec { seed: 10, ..small() }).unwrap();
    assert_ne!(a.samples[0].tokens, c.samples[0].tokens);
}

#[test]
fn split_invariants_hold() {
    let ds = generate(&SplitSpec::default()).unwrap();
    let report = verify_split(&ds);
    assert!(report.is_clean(), "{:?}", report.violations);
    let l = &ds.labels;
    let seen: HashSet<_> = l.seen.iter().collect();
    assert!(l.val_unseen.iter().chain(&l.test_unseen).all(|p| !seen.contains(p)));
    assert!((0..l.n_states).all(|s| l.seen.iter().any(|p| p.0 == s)));
    assert!((0..l.n_objects).all(|o| l.seen.iter().any(|p| p.1 == o)));
    for smp in ds.split(Split::ValSeen).into_iter().chain(ds.split(Split::TestSeen)) {
        assert!(l.is_seen((smp.state, smp.object)));
    }
    let (open, flags) = l.target(Phase::Val, WorldMode::Open);
    assert_eq!(open.len(), 80);
    assert_eq!(flags.iter().filter(|&&u| !u).count(), 40);
}

#[test]
fn corrupted_split_is_reported() {
    let mut ds = generate(&small()).unwrap();
    let moved = ds.labels.val_unseen[0];
    let mut seen = ds.labels.seen.clone();
    seen.push(moved);
    ds.labels = LabelSpace::new(4, 5, seen, ds.labels.val_unseen.clone(), ds.labels.test_unseen.clone()).unwrap();
    let report = verify_split(&ds);
    assert!(!report.is_clean());
    assert!(report.violations.iter().any(|v| v.contains("also a train pair")));
}

#[test]
fn write_then_load_round_trips() {
    let ds = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = load_split(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(back, ds);
    for split in Split::ALL {
        assert!(dir.path().join(format!("{split}.bin")).exists());
    }
}

fn manifest_err(lines: &[&str]) -> Error {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.jsonl");
    fs::write(&path, lines.join("\n")).unwrap();
    load_manifest(&path).unwrap_err()
}

fn line_of(e: &Error) -> usize {
    match e {
        Error::Manifest { line, .. } => *line,
        other => panic!("expected a manifest error, got {other}"),
    }
}

#[test]
fn malformed_manifests_name_the_line() {
    let ok = r#"{"id":0,"state":0,"object":0,"split":"train"}"#;
    let e = manifest_err(&[ok, r#"{"id":0,"state":1,"object":0,"split":"train"}"#]);
    assert_eq!(line_of(&e), 2);
    assert!(e.to_string().contains("duplicate id"));

    let e = manifest_err(&[ok, ok.replace("\"id\":0", "\"id\":1").replace("train", "holdout").as_str()]);
    assert_eq!(line_of(&e), 2);

    let e = manifest_err(&[
        ok,
        r#"{"id":1,"state":1,"object":1,"split":"train"}"#,
        r#"{"id":2,"state":0,"object":0,"split":"test_unseen"}"#,
    ]);
    assert_eq!(line_of(&e), 3);
    assert!(e.to_string().contains("train pair"));

    let e = manifest_err(&[ok, "not json"]);
    assert_eq!(line_of(&e), 2);

    let e = manifest_err(&[]);
    assert!(e.to_string().contains("empty"));
}

#[test]
fn truncated_payload_is_rejected() {
    let ds = generate(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let bin = dir.path().join("train.bin");
    let bytes = fs::read(&bin).unwrap();
    fs::write(&bin, &bytes[..bytes.len() - 3]).unwrap();
    assert!(load_split(&dir.path().join("manifest.jsonl")).is_err());
}

#[test]
fn batch_tokens_keep_sample_order() {
    let ds = generate(&small()).unwrap();
    let batch: Vec<&Sample> = ds.samples.iter().rev().take(3).collect();
    let t = ds.batch_tokens::<f64>(&batch);
    assert_eq!(t.shape(), &[3, 4, 3]);
    assert_eq!(&t.data()[12..24], batch[1].tokens.as_slice());
}

#[test]
fn infeasible_specs_are_rejected() {
    for spec in [
        SplitSpec { train_pairs: 3, ..small() },
        SplitSpec { val_seen_pairs: 11, ..small() },
        SplitSpec { test_unseen_pairs: 7, ..small() },
        SplitSpec { noise: f64::NAN, ..small() },
        SplitSpec { patches: 1, ..small() },
    ] {
        assert!(generate(&spec).is_err(), "{spec:?}");
    }
}
