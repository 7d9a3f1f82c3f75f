use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use levcool::config::parse_config;

fn levcool(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_levcool")).args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const FREE: &str = r#"
[system]
pressure = "1.2 mbar"

[scenario]
kind = "free"
traces = 3
trace_length = "2 ms"
record_stride = 8
export_traces = 1
seed = 9
"#;

fn error_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr is JSON")
}

#[test]
fn manifest_reruns_bit_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "free.toml", FREE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(levcool(&["run", &cfg, "--out-dir", a.to_str().unwrap()]).status.success());
    let manifest = a.join("manifest.toml");
    assert!(levcool(&["run", manifest.to_str().unwrap(), "--out-dir", b.to_str().unwrap()]).status.success());
    for name in ["moments.csv", "psd.csv", "trace_0000.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let first = parse_config(&manifest).unwrap();
    let mut second = parse_config(&b.join("manifest.toml")).unwrap();
    second.output.dir = first.output.dir.clone();
    assert_eq!(first.to_toml_string(), second.to_toml_string());
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "free.toml", FREE);
    let one = dir.path().join("one");
    let two = dir.path().join("two");
    assert!(levcool(&["run", &cfg, "--threads", "1", "--out-dir", one.to_str().unwrap()]).status.success());
    assert!(levcool(&["run", &cfg, "--threads", "3", "--out-dir", two.to_str().unwrap()]).status.success());
    assert_eq!(fs::read(one.join("psd.csv")).unwrap(), fs::read(two.join("psd.csv")).unwrap());
    assert_eq!(fs::read(one.join("summary.json")).unwrap(), fs::read(two.join("summary.json")).unwrap());
}

#[test]
fn seed_flag_overrides_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "free.toml", FREE);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(levcool(&["run", &cfg, "--out-dir", a.to_str().unwrap()]).status.success());
    assert!(levcool(&["run", &cfg, "--seed", "10", "--out-dir", b.to_str().unwrap()]).status.success());
    assert_ne!(fs::read(a.join("moments.csv")).unwrap(), fs::read(b.join("moments.csv")).unwrap());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 10);
}

#[test]
fn csv_tables_have_headers_and_full_precision() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "free.toml", FREE);
    let out = dir.path().join("out");
    assert!(levcool(&["run", &cfg, "--out-dir", out.to_str().unwrap()]).status.success());
    let text = fs::read_to_string(out.join("trace_0000.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "time_s,x_m,y_m,z_m,det_x_V,det_y_V,det_z_V,u_a_V,u_b_V,u_z_V"
    );
    let row = lines.nth(5).unwrap();
    for field in row.split(',') {
        let mantissa = field.split('e').next().unwrap().trim_start_matches('-').replace('.', "");
        assert!(mantissa.len() >= 12, "{field}");
    }
}

#[test]
fn json_format_collects_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "free.toml", FREE);
    let out = dir.path().join("out");
    assert!(levcool(&["run", &cfg, "--format", "json", "--out-dir", out.to_str().unwrap()]).status.success());
    assert!(!out.join("moments.csv").exists());
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out.join("results.json")).unwrap()).unwrap();
    assert_eq!(v["moments"]["columns"][0], "axis");
    assert_eq!(v["moments"]["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn config_errors_exit_two_with_every_issue() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.toml",
        "[system]\npressure = \"1.2 kHz\"\ncolour = 1\n[scenario]\nkind = \"free\"\n",
    );
    let out = levcool(&["run", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_json(&out);
    assert_eq!(e["error"]["category"], "config");
    let issues: Vec<String> = serde_json::from_value(e["error"]["issues"].clone()).unwrap();
    assert!(issues.iter().any(|i| i.starts_with("system.pressure")));
    assert!(issues.iter().any(|i| i.starts_with("system.colour")));
}

#[test]
fn verb_must_match_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "free.toml", FREE);
    for verb in ["design", "calibrate", "sweep"] {
        let out = levcool(&[verb, &cfg]);
        assert_eq!(out.status.code(), Some(2), "{verb}");
    }
}

#[test]
fn unstable_loop_exits_three_and_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "unstable.toml",
        r#"
[system]
pressure = "1.2 mbar"

[controller]
gains = "digital"
kp = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]
kd = [[-5000.0, 0.0, 0.0], [0.0, -5000.0, 0.0], [0.0, 0.0, -5000.0]]
fixed_point_bits = 0

[scenario]
kind = "loop"
traces = 2
trace_length = "2 ms"
"#,
    );
    let out_dir = dir.path().join("out");
    let out = levcool(&["run", &cfg, "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(error_json(&out)["error"]["category"], "instability");
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["error"]["exit_code"], 3);
    assert!(out_dir.join("manifest.json").exists());
}

#[test]
fn delay_sweep_table_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sweep.toml",
        r#"
[system]
pressure = "1.2 mbar"

[scenario]
kind = "delay-sweep"
axis = "x"
gain = "9.17e-9 N/m"
phi = ["1.0 rad", "1.6 rad", "4.7 rad"]
repeats = 2
length = "1 ms"
warmup = "0.2 ms"
"#,
    );
    let out = dir.path().join("out");
    let res = levcool(&["sweep", &cfg, "--out-dir", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let text = fs::read_to_string(out.join("delay_sweep.csv")).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "phi_rad,phi_realized_rad,T_eff_x_K,stderr_x_K,oracle_x_K,repeats"
    );
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn design_writes_gain_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "design.toml",
        "[system]\npressure = \"1.2 mbar\"\n[scenario]\nkind = \"design\"\n",
    );
    let out = dir.path().join("out");
    assert!(levcool(&["design", &cfg, "--out-dir", out.to_str().unwrap()]).status.success());
    let text = fs::read_to_string(out.join("gains.csv")).unwrap();
    assert!(text.starts_with("entry,lqr_value,lqr_unit,digital,fixed_point,integer_bits,fraction_bits,quantization_error\n"));
    assert_eq!(text.lines().count(), 19);
    assert!(text.contains("\"k_p,xx\""));
}
