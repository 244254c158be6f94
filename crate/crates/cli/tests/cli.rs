use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/tiny.toml");

fn ccgen(args: &[&str], run_dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ccgen")).args(args).arg("--run-dir").arg(run_dir).env_remove("CCGEN_DATA_DIR").output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn unknown_config_key_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccgen(&["config", "--set", "vqvae.bogus=1"], dir.path());
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn config_prints_a_stable_digest() {
    let dir = tempfile::tempdir().unwrap();
    let a = ccgen(&["config", "-c", TINY], dir.path());
    let b = ccgen(&["config", "-c", TINY, "--set", "seed=3"], dir.path());
    let c = ccgen(&["config", "-c", TINY, "--seed", "4"], dir.path());
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert_ne!(a.stdout, c.stdout);
}

#[test]
fn stage_without_inputs_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccgen(&["train-gen", "-c", TINY], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn missing_ingest_input_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccgen(&["ingest", "-c", TINY, "--input", "/nonexistent/data.jsonl"], dir.path());
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn pipeline_runs_stages_and_guards_the_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let o = ccgen(&["pipeline", "-c", TINY, "--stop-after", "extract"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["dataset.jsonl", "vqvae.json", "codes.json", "MANIFEST.json", "state.json", "config.resolved.toml"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    assert!(!dir.path().join("generator.json").exists());

    // A different configuration may not reuse the directory without --fresh.
    let o = ccgen(&["pipeline", "-c", TINY, "--seed", "9", "--stop-after", "data"], dir.path());
    assert_eq!(code(&o), 2);
    let o = ccgen(&["pipeline", "-c", TINY, "--seed", "9", "--stop-after", "data", "--fresh"], dir.path());
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!dir.path().join("vqvae.json").exists());

    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("MANIFEST.json")).unwrap()).unwrap();
    let files = manifest["files"].as_array().unwrap();
    assert!(files.iter().all(|f| f["stage"] == "data"));
}
