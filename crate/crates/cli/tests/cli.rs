use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsemep"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn automobile() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/imports-85.data")
}

fn synthetic_problem(dir: &Path, seed: u64) -> PathBuf {
    let out = run(&["prep", "--synthetic", "--seed", &seed.to_string(), "--out-dir", dir.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    dir.join("problem.json")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let help = run(&["--help"]);
    assert_eq!(code(&help), 0);
    let text = String::from_utf8_lossy(&help.stdout);
    assert!(text.contains("Exit status"));
    assert!(text.contains("16"));
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&["fit", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let problem = synthetic_problem(dir.path(), 1);
    let p = problem.to_str().unwrap();
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(code(&run(&["fit", p, "--k", "0"])), 1);
    assert_eq!(code(&run(&["fit", p, "--k", "16"])), 1);
    assert_eq!(code(&run(&["fit", p, "--beta", "1.5"])), 1);
    assert_eq!(code(&run(&["fit", p, "--tmax", "warm"])), 1);
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"betta": 0.9}"#).unwrap();
    assert_eq!(code(&run(&["fit", p, "--config", cfg.to_str().unwrap()])), 1);
}

#[test]
fn bad_data_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run(&["fit", dir.path().join("missing.json").to_str().unwrap()])), 2);

    let truncated = dir.path().join("short.data");
    let text = std::fs::read_to_string(automobile()).unwrap();
    let head: Vec<&str> = text.lines().take(150).collect();
    std::fs::write(&truncated, head.join("\n")).unwrap();
    let out = run(&["prep", truncated.to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("records"));
    assert!(!dir.path().join("problem.json").exists());

    let problem = synthetic_problem(dir.path(), 2);
    let doc = std::fs::read_to_string(&problem).unwrap().replace("\"version\": 1", "\"version\": 9");
    std::fs::write(&problem, doc).unwrap();
    assert_eq!(code(&run(&["fit", problem.to_str().unwrap()])), 2);
}

#[test]
fn infeasible_constraints_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let problem = synthetic_problem(dir.path(), 3);
    let cons = dir.path().join("cons.json");
    std::fs::write(
        &cons,
        r#"[{"kind": "group", "features": [1, 2, 3, 4]}, {"kind": "at_least_one", "features": [2, 3]}]"#,
    )
    .unwrap();
    let out = run(&[
        "fit",
        problem.to_str().unwrap(),
        "--k",
        "3",
        "--constraints",
        cons.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("solution.json").exists());

    std::fs::write(&cons, r#"[{"kind": "at_most_one", "features": [1, 99]}]"#).unwrap();
    assert_eq!(code(&run(&["fit", problem.to_str().unwrap(), "--constraints", cons.to_str().unwrap()])), 3);
}

#[test]
fn fit_writes_solution_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let problem = synthetic_problem(dir.path(), 4);
    let out_dir = dir.path().join("fit");
    let out = run(&["fit", problem.to_str().unwrap(), "--seed", "3", "--out-dir", out_dir.to_str().unwrap()]);
    let status = code(&out);
    assert!(status == 0 || status == 16, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("effective sparsity"));
    assert!(stdout.contains("residual"));

    let sol = json(&out_dir.join("solution.json"));
    assert_eq!(sol["schema"], "solution");
    assert_eq!(sol["version"], 1);
    let manifest = json(&out_dir.join("fit.manifest.json"));
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["command"], "fit");
    let hash = manifest["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 64);
    assert!(sol["produced_by"].as_str().unwrap().contains(hash));

    let warned = sol["data"]["diagnostics"]["non_converged_temperatures"].as_u64().unwrap() > 0
        || sol["data"]["diagnostics"]["soft_rounding"].as_bool().unwrap();
    if warned {
        assert_eq!(status, 16);
    }
}

#[test]
fn config_hash_ignores_time_and_tracks_flags() {
    let dir = tempfile::tempdir().unwrap();
    let problem = synthetic_problem(dir.path(), 5);
    let p = problem.to_str().unwrap();
    let hash_of = |extra: &[&str], sub: &str| {
        let out_dir = dir.path().join(sub);
        let mut args = vec!["fit", p, "--out-dir", out_dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        run(&args);
        json(&out_dir.join("fit.manifest.json"))["config_hash"].as_str().unwrap().to_string()
    };
    let a = hash_of(&[], "a");
    let b = hash_of(&[], "b");
    let c = hash_of(&["--beta", "0.9"], "c");
    assert_eq!(a, b);
    assert_ne!(a, c);

    let sol_a = std::fs::read_to_string(dir.path().join("a/solution.json")).unwrap();
    let sol_b = std::fs::read_to_string(dir.path().join("b/solution.json")).unwrap();
    assert_eq!(sol_a, sol_b);
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let problem = synthetic_problem(dir.path(), 6);
    let p = problem.to_str().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"beta": 0.9, "seed": 11}"#).unwrap();
    let cfg = cfg.to_str().unwrap();

    let manifest = |extra: &[&str], sub: &str| {
        let out_dir = dir.path().join(sub);
        let mut args = vec!["fit", p, "--config", cfg, "--out-dir", out_dir.to_str().unwrap()];
        args.extend_from_slice(extra);
        run(&args);
        json(&out_dir.join("fit.manifest.json"))
    };
    assert_eq!(manifest(&[], "file")["seed"], 11);
    assert_eq!(manifest(&["--seed", "12"], "flag")["seed"], 12);
}

#[test]
fn trace_writes_plot_files() {
    let dir = tempfile::tempdir().unwrap();
    let problem = synthetic_problem(dir.path(), 7);
    let out_dir = dir.path().join("trace");
    let out = run(&["trace", problem.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert!(matches!(code(&out), 0 | 16), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("persistence estimate"));

    let kd = std::fs::read_to_string(out_dir.join("kd.csv")).unwrap();
    assert!(kd.starts_with("log_inv_t,k_d\n"));
    let trace = json(&out_dir.join("trace.json"));
    assert_eq!(trace["schema"], "trace");
    assert_eq!(kd.lines().count() - 1, trace["data"]["records"].as_array().unwrap().len());
    let report = json(&out_dir.join("transitions.json"));
    assert_eq!(report["schema"], "transition_report");
    assert!(out_dir.join("transitions.csv").exists());
}

#[test]
fn trace_without_analytic_skips_hessians() {
    let dir = tempfile::tempdir().unwrap();
    let problem = synthetic_problem(dir.path(), 8);
    let out_dir = dir.path().join("trace");
    run(&["trace", problem.to_str().unwrap(), "--no-analytic", "--out-dir", out_dir.to_str().unwrap()]);
    let report = json(&out_dir.join("transitions.json"));
    for t in report["data"]["transitions"].as_array().unwrap() {
        assert!(t["analytic"].is_null());
    }
}

#[test]
fn compare_tabulates_three_methods() {
    let dir = tempfile::tempdir().unwrap();
    let problem = synthetic_problem(dir.path(), 9);
    let out = run(&["compare", problem.to_str().unwrap(), "--k", "2,3", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(matches!(code(&out), 0 | 16), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6);
    for k in ["2", "3"] {
        let cost = |m: &str| -> f64 {
            rows.iter().find(|r| r[0] == k && r[1] == m).unwrap()[2].parse().unwrap()
        };
        assert!(cost("oracle") <= cost("mep") + 1e-12);
        assert!(cost("oracle") <= cost("omp") + 1e-12);
    }
}

#[test]
fn automobile_prep_and_fit() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["prep", automobile().to_str().unwrap(), "--k", "3", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let doc = json(&dir.path().join("problem.json"));
    assert_eq!(doc["data"]["n"], 195);
    assert_eq!(doc["data"]["d"], 13);
    assert_eq!(doc["data"]["feature_names"][5], "engine-size");

    let out = run(&["fit", dir.path().join("problem.json").to_str().unwrap(), "--out-dir", dir.path().to_str().unwrap()]);
    assert!(matches!(code(&out), 0 | 16));
    let sol = json(&dir.path().join("solution.json"));
    assert_eq!(sol["data"]["support"].as_array().unwrap().len(), 3);
}
