use std::path::Path;
use std::process::Command;

use weakform::output::rows_from_csv;
use weakform::ResultRow;

fn weakform(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_weakform")).args(args).output().unwrap()
}

fn run_with(experiment: &str, config: &str, out: &Path) -> std::process::Output {
    let cfg = out.parent().unwrap().join(format!("{}.json", out.file_name().unwrap().to_str().unwrap()));
    std::fs::write(&cfg, config).unwrap();
    weakform(&[experiment, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn rows(dir: &Path) -> Vec<ResultRow> {
    rows_from_csv(&std::fs::read_to_string(dir.join("results.csv")).unwrap()).unwrap()
}

const SMALL_BIP: &str = r#"{
    "mesh_n": [4], "q_int": [7], "replicates": 2, "iterations": 30, "hidden": [8],
    "sensor_count": 10, "validation_count": 10, "hmc_samples": 20, "hmc_burnin": 10,
    "hmc_leapfrog": 3, "predictive_samples": 5, "coverage_centers": 20
}"#;

#[test]
fn transport_bip_writes_every_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bip");
    let res = run_with("transport_bip", SMALL_BIP, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["results.csv", "timings.csv", "summary.json", "config_echo.json", "seeds.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(out.join("chain_hmc_n4_r0.csv").is_file());
    assert!(out.join("trace_cvi_7_n4_r1.csv").is_file());
    let rows = rows(&out);
    for method in ["hmc", "cvi_7"] {
        let maes: Vec<_> = rows.iter().filter(|r| r.method == method && r.metric == "mae").collect();
        assert_eq!(maes.len(), 2, "{method}");
        assert!(maes.iter().all(|r| r.value.is_finite() && r.value >= 0.0));
    }
}

#[test]
fn reruns_are_bitwise_identical() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(run_with("transport_bip", SMALL_BIP, &a).status.success());
    assert!(run_with("transport_bip", SMALL_BIP, &b).status.success());
    for f in ["results.csv", "summary.json", "seeds.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, SMALL_BIP).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = cfg.to_str().unwrap();
    assert!(weakform(&["transport_bip", "--config", c, "--out", a.to_str().unwrap(), "--seed", "9"]).status.success());
    assert!(weakform(&["transport_bip", "--config", c, "--out", b.to_str().unwrap()]).status.success());
    assert_ne!(std::fs::read(a.join("results.csv")).unwrap(), std::fs::read(b.join("results.csv")).unwrap());
    let echo = std::fs::read_to_string(a.join("config_echo.json")).unwrap();
    assert!(echo.contains("\"seed\": 9"));
}

#[test]
fn zero_iterations_scores_the_initial_model() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("z");
    let cfg = SMALL_BIP.replace("\"iterations\": 30", "\"iterations\": 0");
    assert!(run_with("transport_bip", &cfg, &out).status.success());
    let rows = rows(&out);
    let mae = rows.iter().find(|r| r.method == "cvi_7" && r.metric == "mae").unwrap();
    assert!(mae.value.is_finite() && mae.value > 0.0);
    // Nothing was trained, so q is still the prior.
    let m = rows.iter().find(|r| r.method == "cvi_7" && r.metric == "tau1_mean").unwrap();
    let s = rows.iter().find(|r| r.method == "cvi_7" && r.metric == "tau1_sd").unwrap();
    assert_eq!((m.value, s.value), (0.0, 1.0));
}

#[test]
fn pointwise_compare_labels_both_methods() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pc");
    let cfg = r#"{"mesh_n": [4], "q_int": [7], "replicates": 1, "iterations": 20, "hidden": [8],
        "sensor_count": 10, "validation_count": 10, "predictive_samples": 3,
        "collocation_interior": 8, "collocation_boundary": 4, "coverage_centers": 20}"#;
    let res = run_with("pointwise_compare", cfg, &out);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let rows = rows(&out);
    for method in ["weak_form", "pointwise"] {
        assert!(rows.iter().any(|r| r.method == method && r.metric == "mae"), "{method}");
    }
}

#[test]
fn taper_and_coverage_run() {
    let dir = tempfile::tempdir().unwrap();
    let taper = dir.path().join("t");
    let cfg = r#"{"mesh_n": [6], "rho": [0.2, 2.0], "epsilon": [0.1], "patch_counts": [1, 5], "perturbation_draws": 3}"#;
    assert!(run_with("taper_study", cfg, &taper).status.success());
    let rows = rows(&taper);
    let saturated: Vec<_> = rows
        .iter()
        .filter(|r| r.metric == "abs_error" && r.rho == Some(2.0))
        .collect();
    assert!(!saturated.is_empty());
    assert!(saturated.iter().all(|r| r.value < 1e-8), "{saturated:?}");

    let cov = dir.path().join("c");
    let cfg = r#"{"mesh_n": [6], "rho": [0.1, 0.5, 2.0], "coverage_centers": 10}"#;
    assert!(run_with("coverage_curve", cfg, &cov).status.success());
    let frac: Vec<f64> = rows_of(&cov, "element_fraction");
    assert_eq!(frac.len(), 3);
    assert!(frac.windows(2).all(|w| w[0] <= w[1]));
    assert_eq!(*frac.last().unwrap(), 1.0);
}

fn rows_of(dir: &Path, metric: &str) -> Vec<f64> {
    rows(dir).into_iter().filter(|r| r.metric == metric).map(|r| r.value).collect()
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bad");
    assert_eq!(run_with("transport_bip", r#"{"mesh_n": []}"#, &out).status.code(), Some(2));
    assert_eq!(run_with("transport_bip", r#"{"no_such_field": 1}"#, &out).status.code(), Some(2));
    assert_eq!(run_with("transport_bip", "not json", &out).status.code(), Some(2));
    let missing = dir.path().join("missing.json");
    let res = weakform(&["transport_bip", "--config", missing.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(weakform(&["no_such_experiment"]).status.code(), Some(2));
}

#[test]
fn mismatched_experiment_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m");
    let res = run_with("coverage_curve", r#"{"experiment": "taper_study", "mesh_n": [4]}"#, &out);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn unwritable_output_exits_with_1() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"mesh_n": [4], "rho": [0.5], "coverage_centers": 5}"#).unwrap();
    let out = blocker.join("sub");
    let res = weakform(&["coverage_curve", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = weakform::ExperimentConfig::from_file(&path).unwrap();
        let exp = cfg.experiment.expect("shipped configs name their experiment");
        cfg.validate(exp).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        seen += 1;
    }
    assert!(seen >= 4);
}
