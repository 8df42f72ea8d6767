use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stackfusion"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["ablate", "--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
}

#[test]
fn usage_and_config_problems_exit_one() {
    assert_eq!(code(&run(&["no-such-command"])), 1);
    assert_eq!(code(&run(&["synth", "--n", "many"])), 1);
    assert_eq!(code(&run(&["ablate", "--config", "/nonexistent/config.json"])), 1);
    assert_eq!(code(&run(&["ablate", "--variants", "MOE_OCTAMODAL", "--n", "100"])), 1);
    assert_eq!(code(&run(&["synth", "--genspec", "no_such_preset"])), 1);
    assert_eq!(code(&run(&["calibrate", "--task", "antibiotic", "--n", "100"])), 1);

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"variants": [], "seeds": [0]}"#).unwrap();
    let o = run(&["ablate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("variants"));
}

#[test]
fn runtime_failures_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, "not json\n").unwrap();
    let out = dir.path().join("out");
    let o = run(&["guard", "--cohort", broken.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = run(&["report", "--input", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
}

#[test]
fn synth_then_guard_writes_cohort_and_audit() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let o = run(&["synth", "--n", "50", "--seed", "3", "--out", d]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let cohort = dir.path().join("cohort.jsonl");
    assert_eq!(std::fs::read_to_string(&cohort).unwrap().lines().count(), 51);
    let o = run(&["guard", "--cohort", cohort.to_str().unwrap(), "--task", "detection", "--out", d]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let guarded = std::fs::read_to_string(dir.path().join("cohort_guarded.jsonl")).unwrap();
    assert!(!guarded.contains("vancomycin"));
    let audit: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("cohort_guard_audit.json")).unwrap()).unwrap();
    assert_eq!(audit["task"], "detection");
}

#[test]
fn ablate_is_byte_identical_across_thread_counts() {
    let mut snapshots = Vec::new();
    for threads in ["1", "2"] {
        let dir = tempfile::tempdir().unwrap();
        let o = run(&[
            "ablate",
            "--n",
            "300",
            "--variants",
            "STATIC_ONLY,LATE_CONCAT,FUSIONFORMER",
            "--seed",
            "5",
            "--threads",
            threads,
            "--out",
            dir.path().to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        snapshots.push((dir, files_of(&o)));
    }
    let a = files(snapshots[0].0.path());
    let b = files(snapshots[1].0.path());
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert_eq!(snapshots[0].1, snapshots[1].1);

    // Re-rendering from the JSON reproduces the CSV tables.
    let dir = snapshots[0].0.path();
    let again = tempfile::tempdir().unwrap();
    let json = dir.join("experiment_ablation.json");
    let o = run(&[
        "report",
        "--input",
        json.to_str().unwrap(),
        "--format",
        "csv",
        "--out",
        again.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for (name, bytes) in files(again.path()) {
        assert!(name.ends_with(".csv"));
        assert_eq!(std::fs::read(dir.join(&name)).unwrap(), bytes, "{name}");
    }
}

/// Names of the files an invocation reported writing.
fn files_of(o: &Output) -> Vec<String> {
    String::from_utf8_lossy(&o.stdout)
        .lines()
        .filter_map(|l| l.strip_prefix("wrote "))
        .map(|p| Path::new(p).file_name().unwrap().to_string_lossy().into_owned())
        .collect()
}
