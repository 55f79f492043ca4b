use std::io::Write;

use sdt::scene_io::{load_feasibility, load_scenes, save_feasibility, save_scenes, IoError};
use sdt::synth::{generate_scenes, SynthConfig};

fn cfg() -> SynthConfig {
    SynthConfig {
        num_scenes: 15,
        d: 6,
        ..Default::default()
    }
}

#[test]
fn scenes_round_trip_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, feas) = generate_scenes(&cfg()).unwrap();
    let p = dir.path().join("s.jsonl");
    save_scenes(&scenes, &p).unwrap();
    assert_eq!(load_scenes(&p).unwrap(), scenes);
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().count(), 15);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["id", "global_feature", "tokens", "gt"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    for key in ["feature", "box", "score", "class_id", "is_human"] {
        assert!(first["tokens"][0].get(key).is_some(), "missing token {key}");
    }

    let fp = dir.path().join("f.json");
    save_feasibility(&feas, &fp).unwrap();
    assert_eq!(load_feasibility(&fp).unwrap(), feas);
}

#[test]
fn bad_record_names_its_line() {
    let dir = tempfile::tempdir().unwrap();
    let (scenes, _) = generate_scenes(&cfg()).unwrap();
    let p = dir.path().join("s.jsonl");
    let mut f = std::fs::File::create(&p).unwrap();
    writeln!(f, "{}", serde_json::to_string(&scenes[0]).unwrap()).unwrap();
    writeln!(f).unwrap();
    let mut v = serde_json::to_value(&scenes[1]).unwrap();
    v["tokens"][0].as_object_mut().unwrap().remove("box");
    writeln!(f, "{v}").unwrap();
    drop(f);
    match load_scenes(&p) {
        Err(e @ IoError::Record { line: 3, .. }) => assert!(e.to_string().contains("box"), "{e}"),
        other => panic!("expected a line 3 record error, got {other:?}"),
    }
}

#[test]
fn empty_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("empty.jsonl");
    std::fs::write(&p, "\n\n").unwrap();
    assert!(load_scenes(&p).unwrap().is_empty());
    assert!(matches!(load_scenes(dir.path().join("nope.jsonl")), Err(IoError::Io { .. })));
    let f = dir.path().join("f.json");
    std::fs::write(&f, r#"{"1": [0, "x"]}"#).unwrap();
    assert!(matches!(load_feasibility(&f), Err(IoError::Json { .. })));
}
