//! End-to-end checks of the command-line surface against the bundled
//! fixture: exit codes, artifact presence, and output stability.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fasgrid"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(name)
}

fn common_args(cmd: &mut Command, profiles: &str, out: &Path) {
    cmd.arg("--network")
        .arg(fixture("feeder41.json"))
        .arg("--profiles")
        .arg(fixture(profiles))
        .arg("--config")
        .arg(fixture("config.json"))
        .arg("--out-dir")
        .arg(out);
}

#[test]
fn unknown_subcommand_exits_one_with_usage() {
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("Usage"), "stderr: {stderr}");
}

#[test]
fn missing_network_file_exits_one_with_json_error() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.arg("pf")
        .arg("--network")
        .arg("/no/such/file.json")
        .arg("--profiles")
        .arg(fixture("profiles24.csv"))
        .arg("--out-dir")
        .arg(dir.path());
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(parsed["error"], "config");
}

#[test]
fn pf_writes_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.arg("pf");
    common_args(&mut cmd, "profiles24.csv", dir.path());
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["voltages.csv", "loadings.csv", "incidents.csv"] {
        assert!(dir.path().join(name).exists(), "{name} missing");
    }
    let voltages = std::fs::read_to_string(dir.path().join("voltages.csv")).unwrap();
    assert!(voltages.starts_with("t,bus,phase,v_pu,theta_rad\n"));
    // 24 steps x 41 buses x 3 phases data rows plus the header.
    assert_eq!(voltages.lines().count(), 1 + 24 * 41 * 3);
    let incidents = std::fs::read_to_string(dir.path().join("incidents.csv")).unwrap();
    assert!(incidents.contains("under_voltage"));
}

#[test]
fn activate_on_quiet_profiles_is_empty_and_clean() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.arg("activate");
    common_args(&mut cmd, "profiles_quiet.csv", dir.path());
    cmd.arg("--flex").arg(fixture("flex24.csv")).arg("--gv").arg("0");
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let activation = std::fs::read_to_string(dir.path().join("activation.csv")).unwrap();
    assert_eq!(
        activation,
        "t,bus,phase,dp_up,dp_dn,dq_up,dq_dn,p_curt,g_curt\n"
    );
    let incidents =
        std::fs::read_to_string(dir.path().join("corrected_incidents.csv")).unwrap();
    for row in ["under_voltage,0,0", "over_voltage,0,0", "thermal_overload,0,0"] {
        assert!(incidents.contains(row), "{incidents}");
    }
}

#[test]
fn out_dir_env_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    let ignored = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.arg("pf");
    common_args(&mut cmd, "profiles_quiet.csv", ignored.path());
    cmd.env("FASGRID_OUT_DIR", dir.path());
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(dir.path().join("voltages.csv").exists());
    assert!(!ignored.path().join("voltages.csv").exists());
}

#[test]
fn nvs_artifact_has_target_grid() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.arg("nvs");
    common_args(&mut cmd, "profiles24.csv", dir.path());
    let out = cmd.output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let nvs = std::fs::read_to_string(dir.path().join("nvs.csv")).unwrap();
    assert!(nvs.starts_with("obs_bus,obs_phase,pert_bus,pert_phase,nvs_p,nvs_q\n"));
    // 41 x 3 observed phase-nodes times 21 distinct device phase-nodes
    // (devices 9 and 10 share bus 25 phase C).
    assert_eq!(nvs.lines().count(), 1 + 41 * 3 * 21);
}
