use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn densjac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_densjac")).args(args).output().expect("binary runs")
}

fn load(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn strip_metadata(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("metadata");
    v
}

#[test]
fn gen_density_has_the_closed_form_integral() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("rho.json");
    let o = densjac(&["gen-density", "--checkerboard", "N=4,c=1", "--grid", "64x16", "-o", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = load(&out);
    let values: Vec<f64> = serde_json::from_value(v["values"].clone()).unwrap();
    let rect: Vec<f64> = serde_json::from_value(v["rect"].clone()).unwrap();
    let area = (rect[2] - rect[0]) * (rect[3] - rect[1]);
    let integral = values.iter().sum::<f64>() / values.len() as f64 * area;
    assert!((integral - 0.375).abs() < 1e-15, "{integral}");
    assert_eq!(v["config"]["checkerboard"]["N"], 4);
}

#[test]
fn solve_constant_one_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let rho = dir.path().join("one.json");
    let map = dir.path().join("map.json");
    assert_eq!(densjac(&["gen-density", "--constant", "1", "--grid", "8x8", "-o", rho.to_str().unwrap()]).status.code(), Some(0));
    let o = densjac(&["solve", "--rho", rho.to_str().unwrap(), "--L", "1.5", "-o", map.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let v = load(&map);
    assert_eq!(v["mismatch_area"].as_f64(), Some(0.0));
    assert!(dir.path().join("map.trace.csv").exists());
}

#[test]
fn sweep_writes_one_row_per_n_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let o = densjac(&[
            "sweep", "--N", "1,2,4", "--grid", "8x8", "--L", "1.2", "--seed", "5", "--workers", workers, "-o",
            out.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a.csv", "1");
    let b = run("b.csv", "2");
    let csv = fs::read_to_string(&a).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[0].starts_with("N,seed,mismatch_area"));
    assert_eq!(csv, fs::read_to_string(&b).unwrap());
    let ja = strip_metadata(load(&a.with_extension("json")));
    let jb = strip_metadata(load(&b.with_extension("json")));
    assert_eq!(ja, jb);
}

#[test]
fn exit_codes_distinguish_usage_and_domain_errors() {
    assert_eq!(densjac(&["--help"]).status.code(), Some(0));
    assert_eq!(densjac(&["gen-density", "--no-such-flag"]).status.code(), Some(2));
    let o = densjac(&["solve", "--rho", "/nonexistent/rho.json"]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "io");
    let o = densjac(&["gen-density", "--checkerboard", "N=2", "--grid", "4x0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"grid": "16x4", "checkerboard": "N=2,c=0.5"}"#).unwrap();
    let out = dir.path().join("rho.json");
    let args = ["--config", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "gen-density"];
    assert_eq!(densjac(&args).status.code(), Some(0));
    let v = load(&out);
    assert_eq!((v["nx"].as_u64(), v["ny"].as_u64()), (Some(16), Some(4)));
    assert_eq!(v["config"]["checkerboard"]["c"], 0.5);

    let mut args = args.to_vec();
    args.extend(["--grid", "8x2"]);
    assert_eq!(densjac(&args).status.code(), Some(0));
    assert_eq!(load(&out)["nx"].as_u64(), Some(8));

    fs::write(&cfg, r#"{"unknown": 1}"#).unwrap();
    let o = densjac(&["--config", cfg.to_str().unwrap(), "gen-density", "--constant", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&o.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "input");
}
