use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn tarctl(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tarctl"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("run tarctl")
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("JSON on stdout")
}

const NET: &str = r#"{
  "layers": [
    {"name": "fc0.weight", "kind": "matrix", "shape": [32, 16]},
    {"name": "fc0.bias", "kind": "vector", "shape": [32]},
    {"name": "fc1.weight", "kind": "matrix", "shape": [32, 32]},
    {"name": "fc1.bias", "kind": "vector", "shape": [32]},
    {"name": "fc2.weight", "kind": "matrix", "shape": [4, 32]}
  ],
  "init_seed": 7
}"#;

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("net.json"), NET).unwrap();
    dir
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn prune_hits_the_global_target() {
    let dir = workspace();
    let out = tarctl(
        &["prune", "--net", "net.json", "--criterion", "magnitude", "--sparsity", "0.7", "--out", "m.json"],
        dir.path(),
    );
    let report = stdout_json(&out);
    let d = report["global"]["d"].as_f64().unwrap();
    let kept = report["global"]["kept"].as_f64().unwrap();
    assert!((kept - 0.3 * d).abs() <= 1.0);
    assert!(dir.path().join("m.json").exists());

    let out = tarctl(
        &["prune", "--net", "net.json", "--criterion", "erk", "--sparsity", "0", "--out", "d.json"],
        dir.path(),
    );
    assert_eq!(stdout_json(&out)["global"]["density"], 1.0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = workspace();
    let out = tarctl(
        &["prune", "--net", "net.json", "--criterion", "magnitude", "--sparsity", "1.2", "--out", "m.json"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sparsity"));
    assert!(!dir.path().join("m.json").exists());

    let out = tarctl(&["bound", "--D", "10", "--w", "2", "--R", "3", "--bogus"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let out = tarctl(&["bound", "--D", "10", "--w", "20", "--R", "3"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(tarctl(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(tarctl(&["sweep", "--help"], dir.path()).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = workspace();
    let out = tarctl(&["revive", "--mask", "missing.json", "--mode", "tar", "--rr", "0.01", "--out", "o.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    fs::write(dir.path().join("bad.json"), "{\"version\": 1, \"layers\": 3}").unwrap();
    let out = tarctl(&["analyze", "--mask", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = tarctl(&["sweep", "--config", "missing.json", "--out-dir", "o"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn revive_plans() {
    let dir = workspace();
    stdout_json(&tarctl(
        &["prune", "--net", "net.json", "--criterion", "magnitude", "--sparsity", "0.9", "--out", "m.json"],
        dir.path(),
    ));

    let out = tarctl(
        &["revive", "--mask", "m.json", "--mode", "tar", "--rr", "0.01", "--seed", "3", "--out", "t.json", "--plan", "t.csv"],
        dir.path(),
    );
    stdout_json(&out);
    let plan = fs::read_to_string(dir.path().join("t.csv")).unwrap();
    assert!(plan.starts_with("layer,d,K,D,N,E_topo,G,Q,R\n"));
    for row in csv_rows(&dir.path().join("t.csv")) {
        let n = |i: usize| row[i].parse::<usize>().unwrap();
        let (pruned, g, q, r) = (n(3), n(6), n(7), n(8));
        assert_eq!(r, pruned.min(g.max(q)));
    }

    tarctl(
        &["revive", "--mask", "m.json", "--mode", "ur", "--rr", "0.01", "--out", "u.json", "--plan", "u.csv"],
        dir.path(),
    );
    for row in csv_rows(&dir.path().join("u.csv")) {
        let pruned: usize = row[3].parse().unwrap();
        assert_eq!(row[6], "0");
        assert_eq!(row[8].parse::<usize>().unwrap(), pruned / 100);
    }

    stdout_json(&tarctl(
        &["prune", "--net", "net.json", "--criterion", "magnitude", "--sparsity", "0.3", "--out", "g.json"],
        dir.path(),
    ));
    stdout_json(&tarctl(
        &["revive", "--mask", "g.json", "--mode", "tar", "--rr", "0", "--out", "g2.json"],
        dir.path(),
    ));
    let read = |name: &str| -> Value { serde_json::from_slice(&fs::read(dir.path().join(name)).unwrap()).unwrap() };
    assert_eq!(read("g.json")["layers"], read("g2.json")["layers"]);
}

#[test]
fn bound_reports() {
    let dir = workspace();
    let v = stdout_json(&tarctl(&["bound", "--D", "10", "--w", "2", "--R", "3"], dir.path()));
    assert!((v["p_exact"].as_f64().unwrap() - 0.466667).abs() < 1e-6);
    assert!((v["p_bound"].as_f64().unwrap() - 0.548812).abs() < 1e-6);
    assert!(v["p_mc"].is_null());

    let v = stdout_json(&tarctl(&["bound", "--D", "10", "--w", "0", "--R", "3"], dir.path()));
    assert_eq!((v["p_exact"].as_f64(), v["p_bound"].as_f64()), (Some(1.0), Some(1.0)));

    let v = stdout_json(&tarctl(&["bound", "--D", "10", "--w", "2", "--R", "3", "--mc", "100000", "--seed", "4"], dir.path()));
    let (p, se) = (v["p_mc"].as_f64().unwrap(), v["se"].as_f64().unwrap());
    assert!((p - 7.0 / 15.0).abs() <= 3.0 * se);
}

#[test]
fn analyze_dense_mask() {
    let dir = workspace();
    stdout_json(&tarctl(
        &["prune", "--net", "net.json", "--criterion", "random", "--sparsity", "0", "--out", "d.json"],
        dir.path(),
    ));
    let out = tarctl(&["analyze", "--mask", "d.json", "--out", "r.json", "--csv", "r.csv"], dir.path());
    assert!(out.status.success());
    let report: Value = serde_json::from_slice(&fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    for layer in report["connectivity"]["per_layer"].as_array().unwrap() {
        assert_eq!(layer["isolated_in"], 0);
        assert_eq!(layer["isolated_out"], 0);
    }
    assert_eq!(report["isolated_fraction"], 0.0);
    assert!(fs::read_to_string(dir.path().join("r.csv")).unwrap().starts_with("layer,n_out,n_in,K,"));
}

#[test]
fn sweep_outputs_and_force() {
    let dir = workspace();
    let config = r#"{
        "net": "net.json",
        "alphas": [0.9],
        "rrs": [0.0, 0.01],
        "modes": ["tar"],
        "seeds": [0, 1],
        "steps": 40,
        "eval_every": 20,
        "eval_batch": 32
    }"#;
    fs::write(dir.path().join("exp.json"), config).unwrap();
    let out = tarctl(&["sweep", "--config", "exp.json", "--out-dir", "runs"], dir.path());
    let v = stdout_json(&out);
    assert_eq!(v["runs"], 4);
    let runs = dir.path().join("runs");
    let mut names: Vec<String> = fs::read_dir(&runs)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 5);
    assert!(names.contains(&"magnitude_a0.9_rr0.01_tar_s1.csv".to_string()));
    let summary = fs::read_to_string(runs.join("summary.csv")).unwrap();
    assert!(summary.starts_with("criterion,alpha,rr,mode,seeds,final_loss_mean,final_loss_std\n"));
    assert_eq!(summary.lines().count(), 3);

    let before: Vec<Vec<u8>> = names.iter().map(|n| fs::read(runs.join(n)).unwrap()).collect();
    let out = tarctl(&["sweep", "--config", "exp.json", "--out-dir", "runs"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = tarctl(&["train", "--config", "exp.json", "--out-dir", "runs", "--force"], dir.path());
    assert!(out.status.success());
    let after: Vec<Vec<u8>> = names.iter().map(|n| fs::read(runs.join(n)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn default_grid_shape() {
    let dir = workspace();
    let config = r#"{"net": "net.json", "modes": ["original"], "seeds": [0], "steps": 2, "eval_every": 1, "eval_batch": 4}"#;
    fs::write(dir.path().join("exp.json"), config).unwrap();
    let out = tarctl(&["sweep", "--config", "exp.json", "--out-dir", "grid"], dir.path());
    stdout_json(&out);
    let rows = csv_rows(&dir.path().join("grid/summary.csv"));
    assert_eq!(rows.len(), 5 * 4);
    let mut alphas: Vec<&str> = rows.iter().map(|r| r[1].as_str()).collect();
    alphas.dedup();
    assert_eq!(alphas, ["0.7", "0.8", "0.85", "0.9", "0.95"]);
    let rrs: Vec<&str> = rows[..4].iter().map(|r| r[2].as_str()).collect();
    assert_eq!(rrs, ["0.0", "0.005", "0.01", "0.02"]);
}
