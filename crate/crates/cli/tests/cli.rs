use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn espada(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_espada"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn synth(dir: &Path) {
    let o = espada(
        &["synth", "--out-dir", "ds", "--episodes", "3", "--frames", "240", "--seed", "9"],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn validate_reports_ok_and_failures() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let o = espada(&["validate", "ds"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("3 episodes OK"));

    // break one frame index in ep001
    let p = tmp.path().join("ds/ep001.episode.jsonl");
    let text = fs::read_to_string(&p).unwrap();
    let broken = text.replacen("{\"index\":5,", "{\"index\":50,", 1);
    assert_ne!(broken, text);
    fs::write(&p, broken).unwrap();
    let o = espada(&["validate", "ds"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("FAIL") && out.contains("line 7"), "{out}");
}

#[test]
fn validate_empty_and_missing_dirs() {
    let tmp = tempfile::tempdir().unwrap();
    fs::create_dir(tmp.path().join("empty")).unwrap();
    assert_eq!(espada(&["validate", "empty"], tmp.path()).status.code(), Some(0));
    assert_eq!(espada(&["validate", "missing"], tmp.path()).status.code(), Some(2));
}

#[test]
fn pipeline_writes_manifest_and_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    for out in ["a", "b"] {
        let o = espada(&["pipeline", "--dataset", "ds", "--out-dir", out, "--no-timestamp", "--jobs", "2"], tmp.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let a = fs::read(tmp.path().join("a/manifest.json")).unwrap();
    let b = fs::read(tmp.path().join("b/manifest.json")).unwrap();
    assert_eq!(a, b);
    let m: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(m["episodes"].as_array().unwrap().len(), 3);
    assert_eq!(fs::read_dir(tmp.path().join("a/replicas")).unwrap().count(), 12);
}

#[test]
fn transfer_refine_inspect_chain() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let d = tmp.path();
    let o = espada(
        &[
            "transfer",
            "--reference",
            "ds/ep000.episode.jsonl",
            "--segments",
            "ds/ep000.segments.json",
            "ds/ep001.episode.jsonl",
            "--out-dir",
            "tr",
            "--dump-path",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(d.join("tr/ep000__ep001.path.json").exists());

    let o = espada(
        &["segment-refine", "ds/ep001.episode.jsonl", "tr/ep001.segments.json", "--out", "r.json"],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let o = espada(&["inspect", "ds/ep001.episode.jsonl", "r.json", "--svg", "t.svg"], d);
    assert!(o.status.success());
    assert!(stdout(&o).contains("coverage: 100%"));
    assert!(fs::read_to_string(d.join("t.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn mismatched_segmentation_is_a_data_failure() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let o = espada(&["inspect", "ds/ep001.episode.jsonl", "ds/ep000.segments.json"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn segment_with_mock_provider() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    fs::write(tmp.path().join("mock.json"), r#"{"kind":"mock"}"#).unwrap();
    let o = espada(
        &["segment", "ds/ep002.episode.jsonl", "--provider", "mock.json", "--out", "s.json"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("s.json")).unwrap()).unwrap();
    assert_eq!(s["episode_id"], "ep002");

    let o = espada(&["segment", "ds/ep002.episode.jsonl"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn accelerate_rejects_bad_plan() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let o = espada(
        &["accelerate", "--dataset", "ds", "--segments", "ds/truth", "--out-dir", "acc", "--n-precision", "0"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(1));
    let o = espada(
        &["accelerate", "--dataset", "ds", "--segments", "ds/truth", "--out-dir", "acc", "--horizon-mode", "geometric"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(tmp.path().join("acc/manifest.json").exists());
}
