use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

fn root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn bundled(name: &str) -> PathBuf {
    root().join("scenarios").join(name)
}

fn liao(args: &[&str], scenario: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liao"))
        .args(args)
        .arg("--scenario")
        .arg(scenario)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn read_json(path: &Path) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn assert_schema(schema: &str, instance: &Value) {
    let schema = read_json(&root().join("schemas").join(schema));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    assert!(errors.is_empty(), "{errors:#?}");
}

/// A small scenario on the example field, written to `dir`.
fn small_scenario(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let mut v = json!({
        "schema_version": 1,
        "name": "small",
        "field": {"dimension": 3, "components": ["1", "y", "-z"]},
        "perturbation": {"dimension": 3, "components": ["1", "y + 0.01", "-z"]},
        "lambda_samples": [[-1, 0, 0], [0, 0, 0], [1, 0, 0]],
        "p_minus": 1,
        "numeric": {"h": 0.01, "tol": 1e-10, "horizon": 20, "xi": 0.05, "epsilon": 0.1, "window_t": 10,
                    "equivariance_times": [-2, 2]},
        "seed": 5
    });
    edit(&mut v);
    let path = dir.join("scenario.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&v).unwrap()).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn bundled_scenarios_match_schema() {
    for name in ["example43_constant.json", "example43_trig.json"] {
        assert_schema("scenario.schema.json", &read_json(&bundled(name)));
    }
}

#[test]
fn certify_reports_example_constants() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = bundled("example43_constant.json");
    let o = liao(&["certify"], &scenario, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = read_json(&dir.path().join("certificate.json"));
    assert_schema("certify.schema.json", &r);
    assert!((r["eta_hat"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert!((r["xi"].as_f64().unwrap() - 2.0).abs() < 1e-4);
    assert!((r["eta"].as_f64().unwrap() - 2.0).abs() < 1e-6);
    let hash = hex::encode(Sha256::digest(std::fs::read(&scenario).unwrap()));
    assert_eq!(r["scenario_hash"], json!(hash));
    assert_eq!(r["seed"], json!(7));
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let scenario = small_scenario(a.path(), |_| {});
    for cmd in ["certify", "exponents", "conjugate"] {
        assert_eq!(liao(&[cmd], &scenario, &a.path().join("x")).status.code(), Some(0));
        assert_eq!(liao(&[cmd], &scenario, &b.path().join("x")).status.code(), Some(0));
    }
    let mut names: Vec<_> = std::fs::read_dir(a.path().join("x")).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 7);
    for n in names {
        let x = std::fs::read(a.path().join("x").join(&n)).unwrap();
        let y = std::fs::read(b.path().join("x").join(&n)).unwrap();
        assert!(x == y, "{n:?} differs");
    }
}

#[test]
fn exponents_csv_format() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path(), |_| {});
    let o = liao(&["exponents"], &scenario, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("omega_1.csv")).unwrap();
    assert!(!text.contains('\r'));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t,omega_1,omega_2"));
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|c| c.parse().unwrap()).collect();
    assert_eq!(row.len(), 3);
    assert!((row[1] + 1.0).abs() < 1e-6 && (row[2] - 1.0).abs() < 1e-6);
    assert_schema("exponents.schema.json", &read_json(&dir.path().join("exponents.json")));
}

#[test]
fn delta_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = liao(&["delta"], &bundled("example43_constant.json"), dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = read_json(&dir.path().join("delta.json"));
    assert_schema("delta.schema.json", &r);
    assert!((r["epsilon_bound"].as_f64().unwrap() - 1.62).abs() < 1e-12);
    assert!(r["max_shift"].as_f64().unwrap() <= 1.62);
    let sol = std::fs::read_to_string(dir.path().join("bounded_solution.csv")).unwrap();
    assert_eq!(sol.lines().next(), Some("t,z_1,z_2"));
    let map = std::fs::read_to_string(dir.path().join("delta_map.csv")).unwrap();
    assert_eq!(map.lines().next(), Some("s,u_1,u_2,delta_1,delta_2,trajectory_sup"));
    assert_eq!(map.lines().count(), 21);
}

#[test]
fn conjugate_keys_and_residuals() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path(), |_| {});
    let o = liao(&["conjugate", "--seed", "99"], &scenario, dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r = read_json(&dir.path().join("conjugacy.json"));
    assert_schema("conjugacy.schema.json", &r);
    for key in ["samples", "offsets", "residuals", "config", "certificate_ref"] {
        assert!(r.get(key).is_some(), "missing {key}");
    }
    assert_eq!(r["seed"], json!(99));
    assert_eq!(r["config"]["seed"], json!(99));
    let h = &r["offsets"][1]["h"];
    assert!((h[1].as_f64().unwrap() + 0.01).abs() < 1e-8);
    let csv = std::fs::read_to_string(dir.path().join("residuals.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("sample,t,residual,ambient_time"));
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
}

#[test]
fn p_minus_out_of_range_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path(), |v| v["p_minus"] = json!(3));
    let o = liao(&["certify"], &scenario, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("out of range"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_listed() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path(), |v| {
        v["colour"] = json!("red");
        v["numeric"]["stepsize"] = json!(0.1);
    });
    let o = liao(&["certify"], &scenario, dir.path());
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("colour") && err.contains("numeric.stepsize"), "{err}");
}

#[test]
fn missing_blocks_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path(), |v| {
        v.as_object_mut().unwrap().remove("perturbation");
    });
    let o = liao(&["conjugate"], &scenario, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("perturbation"));
    let o = liao(&["delta"], &scenario, dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dichotomy"));
    let o = liao(&["certify"], &dir.path().join("absent.json"), dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn inconsistent_dimensions_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path(), |v| v["lambda_samples"] = json!([[0, 0]]));
    assert_eq!(liao(&["certify"], &scenario, dir.path()).status.code(), Some(2));
    let scenario = small_scenario(dir.path(), |v| v["numeric"]["h"] = json!(-0.01));
    assert_eq!(liao(&["certify"], &scenario, dir.path()).status.code(), Some(2));
}

#[test]
fn failed_certificate_exits_3_with_report() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = small_scenario(dir.path(), |v| v["field"]["components"] = json!(["1", "0", "-z"]));
    let o = liao(&["certify"], &scenario, dir.path());
    assert_eq!(o.status.code(), Some(3));
    let r = read_json(&dir.path().join("certificate.json"));
    assert_schema("certify.schema.json", &r);
    assert_eq!(r["pass"], json!(false));
    assert!(r["xi"].is_null());
    let o = liao(&["conjugate"], &scenario, dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("certificate"));
}
