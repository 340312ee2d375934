use std::path::Path;
use std::process::{Command, Output};

fn denkf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_denkf"))
        .args(args)
        .current_dir(cwd)
        .env_remove("DENKF_SEED")
        .output()
        .unwrap()
}

#[test]
fn missing_data_dir_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = denkf(&["train", "--data", "nowhere", "--out", "m.ckpt"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere"));
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("s.toml"), "duration_seconds = 3\n").unwrap();
    let out = denkf(&["simulate", "--config", "s.toml", "--out", "d"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_setting_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let out = denkf(&["simulate", "--out", "d", "--duration=-1"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("duration_s"));
}

#[test]
fn print_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = denkf(&["train", "--print-config", "--epochs", "7", "--variant", "pe"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("epochs = 7"));
    std::fs::write(dir.path().join("t.toml"), &text).unwrap();
    let again = denkf(&["train", "--print-config", "--config", "t.toml"], dir.path());
    assert_eq!(String::from_utf8(again.stdout).unwrap(), text);
}

#[test]
fn same_seed_gives_identical_recordings() {
    let dir = tempfile::tempdir().unwrap();
    for out in ["a", "b"] {
        let o = denkf(&["simulate", "--out", out, "--duration", "2", "--freq", "10", "--seed", "9"], dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let other = denkf(&["simulate", "--out", "c", "--duration", "2", "--freq", "10", "--seed", "10"], dir.path());
    assert!(other.status.success());
    let read = |d: &str| std::fs::read(dir.path().join(d).join("D3_10hz.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}
