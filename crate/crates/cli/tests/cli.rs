use std::path::Path;
use std::process::{Command, Output};

fn kvpack(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvpack"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn kvpack")
}

fn small_config(dir: &Path) {
    std::fs::write(dir.join("c.json"), r#"{"sim": {"duration_slots": 300}}"#).unwrap();
}

fn gen_trace(dir: &Path) {
    let out = kvpack(dir, &["gen-trace", "--duration", "150", "--seed", "3", "--out", "t.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn gen_trace_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    gen_trace(dir.path());
    let text = std::fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(text.contains("request_id,arrival_slot,prompt_tokens,response_tokens"));
    assert!(text.lines().count() > 100);
}

#[test]
fn compare_writes_one_pair_per_scheduler() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    gen_trace(dir.path());
    let out = kvpack(
        dir.path(),
        &["compare", "--config", "c.json", "--trace", "t.csv", "--out", "o", "--schedulers", "mell,bf,wf,lb"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for s in ["mell", "bf", "wf", "lb"] {
        assert!(dir.path().join(format!("o/{s}.csv")).exists());
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(format!("o/{s}.json"))).unwrap()).unwrap();
        assert!(json.is_object());
    }
    let table = std::fs::read_to_string(dir.path().join("o/comparison.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn simulate_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    gen_trace(dir.path());
    for out in ["a", "b"] {
        let o = kvpack(dir.path(), &["simulate", "--config", "c.json", "--trace", "t.csv", "--out", out]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["mell.csv", "mell.json"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn unbatched_label() {
    let dir = tempfile::tempdir().unwrap();
    small_config(dir.path());
    gen_trace(dir.path());
    let o = kvpack(dir.path(), &["simulate", "--config", "c.json", "--trace", "t.csv", "--no-batching"]);
    assert!(o.status.success());
    assert!(dir.path().join("out/mell-unbatched.json").exists());
}

#[test]
fn bad_input_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = kvpack(dir.path(), &["simulate", "--trace", "nope.csv"]);
    assert_eq!(missing.status.code(), Some(1));

    std::fs::write(dir.path().join("bad.json"), r#"{"bogus": 1}"#).unwrap();
    let bad = kvpack(dir.path(), &["simulate", "--config", "bad.json"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("bogus"));

    std::fs::write(dir.path().join("v2.json"), r#"{"schema_version": 2}"#).unwrap();
    assert_eq!(kvpack(dir.path(), &["simulate", "--config", "v2.json"]).status.code(), Some(1));

    assert_eq!(kvpack(dir.path(), &["compare", "--schedulers", "nope"]).status.code(), Some(1));
    assert_eq!(kvpack(dir.path(), &["frobnicate"]).status.code(), Some(1));
}

#[test]
fn quick_verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = kvpack(dir.path(), &["verify", "--seeds", "2", "--ops", "200", "--max-requests", "8", "--out", "v"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("v/verify.json")).unwrap()).unwrap();
    assert!(report.is_object());
}
