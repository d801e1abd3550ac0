use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qproc(args: &[&str], dir: &Path, config: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qproc"));
    cmd.args(args).arg("--out").arg(dir.join("out"));
    if let Some(text) = config {
        let path = dir.join("config.toml");
        std::fs::write(&path, text).unwrap();
        cmd.arg("--config").arg(path);
    }
    cmd.output().unwrap()
}

fn envelope(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("out/result.json")).unwrap()).unwrap()
}

fn header(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join("out").join(name)).unwrap().lines().next().unwrap().to_string()
}

#[test]
fn interfere_writes_a_scan_and_a_passing_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let out = qproc(&["interfere", "--cutoff", "24"], dir.path(), None);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(dir.path(), "interference.csv"), "chi,intensity");
    let env = envelope(dir.path());
    assert_eq!(env["subcommand"], "interfere");
    assert_eq!(env["cutoff"], 24);
    assert_eq!(env["pass"], true);
}

#[test]
fn envelope_is_deterministic_apart_from_wall_time() {
    let config = "seed = 11\n[experiment]\nalpha = [{ cell = [0.0, 1.0, -1.0, 1.0], t = 0.0 }]\nbeta = [{ cell = [-1.0, 1.0, 0.0, 1.0], t = 0.0 }]";
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let out = qproc(&["decfun", "--cutoff", "24"], dir.path(), Some(config));
        assert_eq!(out.status.code(), Some(0));
        let mut env = envelope(dir.path());
        env["wall_time_s"] = Value::Null;
        env
    };
    let (a, b) = (run(), run());
    assert_eq!(a, b);
    assert_eq!(a["seed"], 11);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = qproc(&["wigner", "--seed", "7", "--cutoff", "24"], dir.path(), Some("seed = 1\n[experiment]\ngrid_points = 21"));
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(envelope(dir.path())["seed"], 7);
}

#[test]
fn wigner_table_has_q_p_w_columns() {
    let dir = tempfile::tempdir().unwrap();
    let config = "[engine]\ncutoff = 16\n[engine.initial]\nkind = \"fock\"\nn = 1\n[experiment]\ngrid_min = -5.0\ngrid_max = 5.0\ngrid_points = 41";
    let out = qproc(&["wigner"], dir.path(), Some(config));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(dir.path(), "wigner.csv"), "q,p,w");
    assert!(envelope(dir.path())["data"]["min"].as_f64().unwrap() < 0.0);
}

#[test]
fn correlate_writes_both_kernel_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = qproc(&["correlate", "--cutoff", "24"], dir.path(), Some("[experiment]\nn_times = 3"));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(dir.path(), "kernels_delta.csv"), "a,b,t_index,t'_index,re,im");
    assert_eq!(header(dir.path(), "kernels_k.csv"), "a,b,t_index,t'_index,re,im");
}

#[test]
fn reconstruct_recovers_the_oscillator_from_its_own_table() {
    let dir = tempfile::tempdir().unwrap();
    let config = "[engine]\ncutoff = 12\n[engine.hamiltonian]\nkind = \"harmonic\"\n\
                  [experiment]\ndisc_radius = 6.0\nspacing = 0.5\ndt = 0.1\nexpected_eigenvalues = [0.5, 1.5, 2.5, 3.5, 4.5]";
    let out = qproc(&["reconstruct"], dir.path(), Some(config));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(header(dir.path(), "propagator_table.csv"), "zi_x,zi_xi,zj_x,zj_xi,t,s,re,im");
    // The written table feeds a second run without an engine.
    let table = dir.path().join("out/propagator_table.csv");
    let again = format!(
        "[experiment]\ntable = \"{}\"\ndt = 0.1\nexpected_eigenvalues = [0.5, 1.5, 2.5, 3.5, 4.5]",
        table.display()
    );
    let second = tempfile::tempdir().unwrap();
    let out = qproc(&["reconstruct"], second.path(), Some(&again));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn validate_lists_every_violation() {
    let dir = tempfile::tempdir().unwrap();
    let out = qproc(&["validate"], dir.path(), Some("[engine]\ncutoff = 1\n[numeric]\nquad_order = 0"));
    assert_eq!(out.status.code(), Some(2));
    let d: Value = serde_json::from_slice(&out.stdout).unwrap();
    let paths: Vec<&str> = d.as_array().unwrap().iter().map(|x| x["path"].as_str().unwrap()).collect();
    assert!(paths.contains(&"engine.cutoff") && paths.contains(&"numeric.quad_order"), "{paths:?}");
    let ok = qproc(&["validate"], dir.path(), None);
    assert_eq!(ok.status.code(), Some(0));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = qproc(&["axioms"], dir.path(), Some("[engine]\ncutof = 4"));
    assert_eq!(out.status.code(), Some(2));
    let out = qproc(&["axioms"], dir.path(), Some("[engine]\ncutoff = 1"));
    assert_eq!(out.status.code(), Some(2));
    assert!(envelope(dir.path())["error"].is_string());
}

#[test]
fn numerical_failures_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let out = qproc(&["interfere", "--cutoff", "16"], dir.path(), Some("[experiment]\nalpha = [{ empty = true, t = 0.0 }]"));
    assert_eq!(out.status.code(), Some(3));
    let env = envelope(dir.path());
    assert_eq!(env["pass"], false);
    assert!(env["error"].as_str().unwrap().contains("phase"), "{env}");
}
