use std::process::{Command, Output};

use serde_json::Value;

fn boolattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boolattn")).args(args).output().unwrap()
}

fn records(dir: &std::path::Path) -> Vec<Value> {
    let text = std::fs::read_to_string(dir.join("report.jsonl")).unwrap();
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn help_exits_zero_and_bad_usage_exits_one() {
    assert_eq!(boolattn(&["--help"]).status.code(), Some(0));
    assert_eq!(boolattn(&["bogus"]).status.code(), Some(1));
    assert_eq!(boolattn(&["params", "--seed", "1", "--seeds", "2,3"]).status.code(), Some(1));
    assert_eq!(boolattn(&["params", "--gate-mode", "sometimes"]).status.code(), Some(1));
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "# comment\nretrieval.lr = 0.1\nnope.key = 3\n").unwrap();
    let out = boolattn(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("nope.key"), "{err}");

    std::fs::write(&cfg, "retrieval.lr = fast\n").unwrap();
    let out = boolattn(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn params_reports_overhead() {
    let dir = tempfile::tempdir().unwrap();
    let out = boolattn(&["params", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("overhead"), "{stdout}");
    let p = records(dir.path()).into_iter().find(|r| r["kind"] == "params").unwrap();
    let overhead = p["report"]["overhead"].as_f64().unwrap();
    assert!(overhead > 0.0 && overhead <= 0.25, "{overhead}");
    let modules = p["report"]["modules"].as_object().unwrap();
    let total: u64 = modules.values().map(|v| v.as_u64().unwrap()).sum();
    let counts = &p["report"]["counts"];
    assert_eq!(total, counts["base"].as_u64().unwrap() + counts["boolattn"].as_u64().unwrap());
}

#[test]
fn plain_encoder_has_no_overhead() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("plain.cfg");
    std::fs::write(&cfg, "encoder.boolattn = false\n").unwrap();
    let out = boolattn(&["params", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success());
    let p = records(dir.path()).into_iter().find(|r| r["kind"] == "params").unwrap();
    assert_eq!(p["report"]["counts"]["boolattn"].as_u64(), Some(0));
}

#[test]
fn generate_writes_a_corpus_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = boolattn(&["generate", "--seeds", "5,6", "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for seed in [5, 6] {
        assert!(dir.path().join(format!("corpus-{seed}")).is_dir());
    }
    let rs = records(dir.path());
    assert!(rs.iter().any(|r| r["kind"] == "config"));
    let per_template: Vec<&Value> = rs.iter().filter(|r| r["kind"] == "corpus" && r["seed"] == 5).collect();
    assert!(!per_template.is_empty());

    // Same seed, same corpus on disk.
    let again = tempfile::tempdir().unwrap();
    assert!(boolattn(&["generate", "--seed", "5", "--out", again.path().to_str().unwrap()]).status.success());
    let list = |d: &std::path::Path| {
        let mut names: Vec<_> = std::fs::read_dir(d).unwrap().map(|e| e.unwrap().path()).collect();
        names.sort();
        names.into_iter().map(|p| std::fs::read(p).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(list(&dir.path().join("corpus-5")), list(&again.path().join("corpus-5")));
}

#[test]
fn gradcheck_passes() {
    let out = boolattn(&["gradcheck", "--seed", "3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("tensors passed"));
}
