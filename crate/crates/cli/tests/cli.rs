use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn repo() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn loopmorse(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_loopmorse"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn report(out: &Path, command: &str) -> Value {
    serde_json::from_str(&fs::read_to_string(out.join(format!("{command}.json"))).unwrap()).unwrap()
}

/// Pendulum with a short collocation interval and a coarse mesh.
const FAST: &str = r#"
K = 4
k_sweep = [4, 8]
stability_sweep = false

[connections]
t_bvp = 8.0
mesh_h = 0.2
"#;

fn fast_config(dir: &Path) -> PathBuf {
    let path = dir.join("fast.toml");
    fs::write(&path, FAST).unwrap();
    path
}

#[test]
fn pendulum_complex_has_ranks_one_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo().join("configs/pendulum.toml");
    let out = loopmorse(&["complex", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let r = report(dir.path(), "complex");
    assert_eq!(r["passed"], true);
    assert_eq!(r["result"]["homology_ranks"], serde_json::json!({"0": 1, "1": 1}));
    assert_eq!(r["result"]["complex"]["boundaries"]["1"]["bits"], serde_json::json!(["0"]));
    // provenance: the merged config is embedded
    assert_eq!(r["config"]["K"], 8);
    assert_eq!(r["config"]["hamiltonian"]["potential"]["terms"][0]["amplitude"], 0.05);
    let csv = fs::read_to_string(dir.path().join("complex_homology.csv")).unwrap();
    assert_eq!(csv, "degree,generators,homology_rank\n0,1,1\n1,1,1\n");
}

#[test]
fn estimates_writes_slope_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = loopmorse(&["estimates"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    let csv = fs::read_to_string(dir.path().join("estimates_slopes.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("series,s,r,alpha,beta,gamma,slope,target,residual,passed"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.ends_with(",true")));
    let r = report(dir.path(), "estimates");
    assert_eq!(r["result"]["fits"].as_array().unwrap().len(), 5);
}

#[test]
fn free_hamiltonian_flags_degeneracy() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo().join("configs/free.toml");
    let out = loopmorse(&["all", "--config", cfg.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("hyperbolicity assumption violated"), "{stdout}");
    let crit = report(dir.path(), "critical-points");
    let points = crit["result"]["points"].as_array().unwrap();
    assert!(!points.is_empty());
    assert!(points.iter().all(|p| p["degenerate"] == true));
    assert_eq!(report(dir.path(), "complex")["result"]["complex"], Value::Null);
    let all = report(dir.path(), "all");
    assert_eq!(all["passed"], false);
    assert_eq!(all["result"]["sections"]["estimates"]["passed"], true);
}

#[test]
fn malformed_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[connections]\nt_bvp = \"long\"\n").unwrap();
    let out = loopmorse(&["complex", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("connections.t_bvp"), "{stderr}");
    assert!(stderr.contains("bad.toml"), "{stderr}");

    fs::write(&path, "[tolerances]\nnewtn = 1e-9\n").unwrap();
    let out = loopmorse(&["estimates", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("tolerances.newtn"));

    fs::write(&path, "s = 0.8\n").unwrap();
    let out = loopmorse(&["estimates", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("field `s`"));

    fs::write(&path, "[tolerances\n").unwrap();
    let out = loopmorse(&["estimates", "--config", path.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn bad_k_sweep_flag_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = loopmorse(&["critical-points", "--k-sweep", "8,x"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--k-sweep"));
    assert!(!dir.path().join("critical-points.json").exists());
}

#[test]
fn reports_are_byte_identical_for_a_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let cfg = cfg.to_str().unwrap();
    let out = dir.path().join("out");
    let names = ["connections.json", "connections_pairs.csv", "connections_representatives.csv", "flow.json", "flow_trajectories.csv"];
    let mut runs = Vec::new();
    for _ in 0..2 {
        for command in ["connections", "flow"] {
            let o = loopmorse(&[command, "--config", cfg, "--seed", "7", "--k-sweep", "4,8"], &out);
            assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
        }
        runs.push(names.map(|name| fs::read(out.join(name)).unwrap()));
    }
    for (i, name) in names.iter().enumerate() {
        assert!(runs[0][i] == runs[1][i], "{name} differs between runs");
    }
    let r = report(&out, "connections");
    assert_eq!(r["config"]["seed"], 7);
    assert_eq!(r["config"]["connections"]["seed"], 7);
    assert_eq!(r["config"]["k_sweep"], serde_json::json!([4, 8]));
    assert_eq!(r["result"]["pairs"][0]["raw_count"], 2);
}
