use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures").join(rel)
}

fn stemweaver(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stemweaver"));
    cmd.args(args).env_remove("STEMWEAVER_OUT_DIR").env_remove("STEMWEAVER_BACKEND_URL");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_then_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let config = fixture("street/config.json");
    let input = fixture("street/input.json");
    let o = stemweaver(
        &["run", "--config", s(&config), "--input", s(&input), "--out", s(&out_dir)],
        &[],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["events"], 4);
    assert_eq!(summary["mix_duration_s"], 30.0);
    assert_eq!(summary["stems"].as_array().unwrap().len(), 4);
    assert!(out_dir.join("report.json").exists());

    let dot = dir.path().join("tree.dot");
    let trace = out_dir.join("traces/event_01.json");
    let o = stemweaver(&["inspect-tree", s(&trace), "--dot", s(&dot)], &[]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("#0 initial"));
    assert!(text.ends_with("nodes: 3\n"), "{text}");
    assert!(std::fs::read_to_string(&dot).unwrap().starts_with("digraph"));
}

#[test]
fn plan_verb_and_env_out_dir() {
    let dir = tempfile::tempdir().unwrap();
    let backend = format!("scripted:{}", s(&fixture("street/session.json")));
    let input = fixture("street/input.json");
    let o = stemweaver(
        &["plan", "--backend", &backend, "--input", s(&input)],
        &[("STEMWEAVER_OUT_DIR", s(dir.path()))],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("plan.json").exists());
    assert!(!dir.path().join("mix.wav").exists());

    let other = dir.path().join("flag");
    let o = stemweaver(
        &["run", "--plan-only", "--backend", &backend, "--input", s(&input), "--out", s(&other)],
        &[("STEMWEAVER_OUT_DIR", s(dir.path()))],
    );
    assert!(o.status.success());
    assert!(other.join("plan.json").exists());
}

#[test]
fn failure_classes_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let input = fixture("street/input.json");

    let o = stemweaver(&["run", "--input", s(&input), "--tools", "/nonexistent.json"], &[]);
    assert_eq!(o.status.code(), Some(2));

    let empty = dir.path().join("empty.json");
    std::fs::write(&empty, "{}").unwrap();
    let o = stemweaver(&["run", "--input", s(&empty), "--backend", "scripted:x.json"], &[]);
    assert_eq!(o.status.code(), Some(3));

    let o = stemweaver(
        &["run", "--text", "rain", "--out", s(dir.path())],
        &[("STEMWEAVER_BACKEND_URL", "http://127.0.0.1:1")],
    );
    assert_eq!(o.status.code(), Some(10), "{}", String::from_utf8_lossy(&o.stderr));

    let o = stemweaver(&["inspect-tree", s(&empty)], &[]);
    assert_eq!(o.status.code(), Some(15));

    let manifest = dir.path().join("m.json");
    std::fs::write(&manifest, r#"[{"id": "a", "input": {"text": "x"}}, {"id": "a", "input": {"text": "x"}}]"#).unwrap();
    let o = stemweaver(&["bench", "--manifest", s(&manifest)], &[]);
    assert_eq!(o.status.code(), Some(16));
}

#[test]
fn bench_verb_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.json");
    let script = fixture("street/session.json");
    let input: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fixture("street/input.json")).unwrap()).unwrap();
    std::fs::write(
        &manifest,
        serde_json::json!([
            {"id": "street", "input": input, "expected_event_count": 4, "script": s(&script)},
            {"id": "street-miscount", "input": input, "expected_event_count": 3, "script": s(&script)}
        ])
        .to_string(),
    )
    .unwrap();
    let out = dir.path().join("bench");
    let o = stemweaver(&["bench", "--manifest", s(&manifest), "--out", s(&out)], &[]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("pass street \n"), "{text}");
    assert!(text.contains("FAIL street-miscount event count 4 != expected 3"), "{text}");
    assert!(text.contains("1/2 passed"));
    assert!(out.join("bench.csv").exists() && out.join("bench.json").exists());
}
