use std::process::Command;

fn dpl() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dpl"))
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(dpl().arg("--help").output().unwrap().status.code(), Some(0));
    assert_eq!(
        dpl().arg("--version").output().unwrap().status.code(),
        Some(0)
    );
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(
        dpl().arg("frobnicate").output().unwrap().status.code(),
        Some(1)
    );
    let missing_mode = dpl()
        .args(["eval", "--ckpt", "a", "--data", "b", "--out", "c"])
        .output()
        .unwrap();
    assert_eq!(missing_mode.status.code(), Some(1));
    let both = dpl()
        .args([
            "gen-data", "--spec", "s.json", "--preset", "desk", "--out", "x.csv",
        ])
        .output()
        .unwrap();
    assert_eq!(both.status.code(), Some(1));
}

#[test]
fn spec_file_drives_generation() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(
        &spec,
        r#"{"fine_means": [[0.0, 1.0], [1.0, 0.0]], "fine_stddev": [0.0, 0.0],
            "fine_counts": [3, 2], "fine_to_coarse": [0, 1], "group_size": 2, "seed": 4}"#,
    )
    .unwrap();
    let out = dir.path().join("data.csv");
    let status = dpl()
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text.starts_with("id,group,label,f0,f1\n"));
}

#[test]
fn invalid_spec_exits_two_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"fine_means": []}"#).unwrap();
    let out = dir.path().join("data.bin");
    let status = dpl()
        .args(["gen-data", "--spec"])
        .arg(&spec)
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(!out.exists());
}

#[test]
fn verify_and_grad_check_pass() {
    assert!(dpl().arg("verify").output().unwrap().status.success());
    assert!(dpl()
        .args(["grad-check", "--seed", "5"])
        .output()
        .unwrap()
        .status
        .success());
}
