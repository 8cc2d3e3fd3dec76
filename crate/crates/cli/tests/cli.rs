use std::process::{Command, Output};

use serde_json::Value;

fn regmod(args: &[&str], threads: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_regmod"))
        .args(args)
        .arg("--threads")
        .arg(threads.to_string())
        .current_dir(concat!(env!("CARGO_MANIFEST_DIR"), "/../.."))
        .output()
        .expect("binary runs")
}

fn report(args: &[&str]) -> (i32, Value) {
    let out = regmod(args, 2);
    let json = serde_json::from_slice(&out.stdout).unwrap_or(Value::Null);
    (out.status.code().unwrap(), json)
}

fn schema() -> jsonschema::JSONSchema {
    let text = include_str!("../../../docs/report.schema.json");
    let schema: Value = serde_json::from_str(text).unwrap();
    jsonschema::JSONSchema::compile(&schema).expect("schema compiles")
}

fn assert_valid(v: &Value) {
    let schema = schema();
    let msgs: Vec<String> = match schema.validate(v) {
        Ok(()) => Vec::new(),
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    assert!(msgs.is_empty(), "schema violations: {msgs:?}");
}

#[test]
fn fixtures_listing() {
    let (code, v) = report(&["fixtures"]);
    assert_eq!(code, 0);
    assert_valid(&v);
    let names: Vec<&str> = v["result"]["fixtures"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| f["name"].as_str().unwrap())
        .collect();
    for n in ["SYS-BALL", "SYS-EX1", "SYS-LIN", "SYS-RANKDROP", "SYS-DEGEN", "BLPP-1"] {
        assert!(names.contains(&n), "{n}");
    }
}

#[test]
fn rankdrop_is_violated() {
    let (code, v) = report(&["rcrcq", "--problem", "fixtures/sys_rankdrop.prob", "--p0", "0", "--x0", "0,0"]);
    assert_eq!(code, 0);
    assert_valid(&v);
    assert_eq!(v["result"]["verdict"], "violated");
    assert!(!v["witnesses"].as_array().unwrap().is_empty());
}

#[test]
fn project_ex1() {
    let (code, v) = report(&["project", "--problem", "fixtures/sys_ex1.prob", "--p", "0.1", "--v", "0.1,-1"]);
    assert_eq!(code, 0);
    assert_valid(&v);
    let d = v["result"]["distance"].as_f64().unwrap();
    assert!((d - 0.9).abs() <= 1e-6);
    assert_eq!(v["problem_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn every_command_validates() {
    let runs: &[&[&str]] = &[
        &["validate", "--problem", "SYS-EX1"],
        &["rreg", "--problem", "SYS-LIN", "--p0", "0", "--x0", "0", "--steps", "3", "--samples", "8"],
        &["aubin", "--problem", "SYS-DEGEN", "--p0", "0", "--x0", "0,0", "--steps", "3", "--samples", "8"],
        &["lolip", "--problem", "SYS-EX1", "--p0", "0", "--x0", "0,-1", "--steps", "3", "--samples", "8"],
        &["lsc", "--problem", "SYS-EX1", "--p0", "0", "--x0", "0,-1", "--samples", "8"],
        &["cones", "--problem", "SYS-BALL", "--x0", "1,0", "--directions", "8", "--with-rcrcq"],
        &["value", "--problem", "BLPP-1", "--p", "0.4"],
        &["phi-lip", "--problem", "BLPP-1", "--p0", "0.4", "--samples", "8"],
        &["penalty", "--problem", "BLPP-1", "--pstar", "0.25", "--xstar", "0.25", "--samples", "32"],
    ];
    for args in runs {
        let (code, v) = report(args);
        assert_eq!(code, 0, "{args:?}");
        assert_valid(&v);
        assert_eq!(v["schema_version"], "1");
    }
}

#[test]
fn exit_codes() {
    let usage = regmod(&["project", "--problem", "SYS-BALL", "--v", "1"], 1);
    assert_eq!(usage.status.code(), Some(1));
    assert!(usage.stdout.is_empty());
    let missing = regmod(&["validate", "--problem", "no/such/file.prob"], 1);
    assert_eq!(missing.status.code(), Some(1));
    let unknown = regmod(&["frobnicate"], 1);
    assert_eq!(unknown.status.code(), Some(1));

    let (code, v) = report(&["value", "--problem", "BLPP-1", "--p", "-2"]);
    assert_eq!(code, 2);
    assert_valid(&v);
    assert!(v["result"]["error"].is_string());
    let (code, _) = report(&["lolip", "--problem", "SYS-BALL", "--x0", "1,0"]);
    assert_eq!(code, 2);
    let (code, _) = report(&["rcrcq", "--problem", "SYS-BALL", "--x0", "3,0"]);
    assert_eq!(code, 2);
}

#[test]
fn out_file() {
    let dir = std::env::temp_dir().join(format!("regmod-out-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("r.json");
    let out = regmod(&["fixtures", "--out", path.to_str().unwrap()], 1);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    let v: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_valid(&v);
    std::fs::remove_dir_all(dir).unwrap();
}

#[test]
fn threads_env_fallback() {
    let out = Command::new(env!("CARGO_BIN_EXE_regmod"))
        .args(["fixtures"])
        .env("REGMOD_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
