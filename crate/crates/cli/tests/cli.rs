use std::fs;
use std::process::Command;

fn spreadsim(args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_spreadsim")).args(args).output().unwrap();
    (out.status.success(), String::from_utf8_lossy(&out.stdout).into_owned() + &String::from_utf8_lossy(&out.stderr))
}

#[test]
fn calibrate_prints_constants() {
    let (ok, text) = spreadsim(&["calibrate", "--preset", "powm"]);
    assert!(ok, "{text}");
    assert!(text.contains("c_base = 46400"), "{text}");
    assert!(text.contains("baseline redis"), "{text}");
}

#[test]
fn attack_with_fixed_secret() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let (ok, text) = spreadsim(&["attack", "--preset", "powm", "--segments", "16", "--secret", "a5c3", "--out", out, "--seed", "3"]);
    assert!(ok, "{text}");
    assert!(text.contains("truth     a5c3"), "{text}");
    for f in ["runs.csv", "summary.csv", "recovery.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn baseline_and_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.toml");
    fs::write(&cfg, "preset = \"ec\"\nbenign_workloads = [\"idle\"]\nbenign_runs = 10\nseed = 4\n").unwrap();
    let out = dir.path().join("o");
    let (ok, text) =
        spreadsim(&["baseline", "--config", cfg.to_str().unwrap(), "--runs", "10", "--workloads", "idle,gcc", "--out", out.to_str().unwrap()]);
    assert!(ok, "{text}");
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().nth(1).unwrap().starts_with("ec,ideal,idle,no_attack"));
}

#[test]
fn bad_inputs_fail() {
    assert!(!spreadsim(&["reproduce", "table4"]).0);
    assert!(!spreadsim(&["calibrate", "--preset", "nope"]).0);
    assert!(!spreadsim(&["attack", "--strategy", "bogus"]).0);
}
