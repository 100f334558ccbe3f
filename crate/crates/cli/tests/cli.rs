use std::path::Path;
use std::process::Command;

fn ddrom() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddrom"))
}

fn config() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/taylor_green.toml")
}

#[test]
fn pod_stage_writes_bases_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = ddrom().arg("pod").arg("-c").arg(config()).arg("-o").arg(dir.path()).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("generate") && stdout.contains("pod"), "{stdout}");
    assert!(dir.path().join("pod/velocity.pod").exists());
    assert!(dir.path().join("manifest.json").exists());

    // second invocation reuses both stages
    let out = ddrom().arg("pod").arg("-c").arg(config()).arg("-o").arg(dir.path()).output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert_eq!(stdout.matches("reused").count(), 2, "{stdout}");
}

#[test]
fn missing_config_fails_with_message() {
    let out = ddrom().args(["generate", "-c", "/nonexistent/run.toml"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let out = ddrom().arg("frobnicate").output().unwrap();
    assert!(!out.status.success());
}
