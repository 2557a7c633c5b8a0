use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_splineformer"))
        .args(args)
        .env_remove("SPLINEFORMER_SEED")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&out.stdout)))
}

fn write(dir: &TempDir, name: &str, v: &Value) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, v.to_string()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn x11() -> Value {
    json!({"op": "var", "name": "x_1_1"})
}

fn cube() -> Value {
    json!({"n": 1, "p": 1, "grid": [[{"op": "product", "args": [x11(), x11(), x11()]}]]})
}

fn abs() -> Value {
    json!({"n": 1, "p": 1, "grid": [[{"op": "max", "args": [x11(), {"op": "scale", "coef": "-1", "arg": x11()}]}]]})
}

fn compile(dir: &TempDir, spline: &Value, extra: &[&str]) -> (Output, PathBuf) {
    let sp = write(dir, "spline.json", spline);
    let w = dir.path().join("w.json");
    let mut args = vec!["compile", s(&sp), "-o", s(&w)];
    args.extend_from_slice(extra);
    (bin(&args), w)
}

#[test]
fn compile_writes_weights_layout_and_stats() {
    let dir = TempDir::new().unwrap();
    let (out, w) = compile(&dir, &abs(), &[]);
    assert_eq!(out.status.code(), Some(0));
    let stats = stdout_json(&out);
    assert_eq!(stats["kind"], "compile");
    assert_eq!(stats["stages"], 1);
    assert!(stats["blocks"].as_u64().unwrap() >= 1);
    assert!(w.exists());
    let layout: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("w.layout.json")).unwrap()).unwrap();
    assert!(layout["rows"].is_array());
}

#[test]
fn eval_cube_weights() {
    let dir = TempDir::new().unwrap();
    let (_, w) = compile(&dir, &cube(), &[]);
    let x = write(&dir, "x.json", &json!([["2"]]));
    let out = bin(&["eval", s(&w), s(&x)]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out), json!([["8"]]));
    let out = bin(&["eval", s(&w), s(&x), "--backend", "float"]);
    assert_eq!(stdout_json(&out), json!([[8.0]]));
}

#[test]
fn eval_shape_mismatch_is_input_error() {
    let dir = TempDir::new().unwrap();
    let (_, w) = compile(&dir, &cube(), &[]);
    let x = write(&dir, "x.json", &json!([["1", "2"], ["3", "4"]]));
    let out = bin(&["eval", s(&w), s(&x)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn verify_exact_and_corrupted() {
    let dir = TempDir::new().unwrap();
    let (_, w) = compile(&dir, &cube(), &[]);
    let sp = dir.path().join("spline.json");
    let out = bin(&["verify", s(&w), s(&sp), "--samples", "100"]);
    assert_eq!(out.status.code(), Some(0));
    let r = stdout_json(&out);
    assert_eq!(r["exact"], true);
    assert_eq!(r["samples"], 100);

    let other = write(&dir, "abs.json", &abs());
    let out = bin(&["verify", s(&w), s(&other), "--samples", "100"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout_json(&out)["first_failure"]["x"].is_array());
}

#[test]
fn seed_from_environment() {
    let dir = TempDir::new().unwrap();
    let (_, w) = compile(&dir, &cube(), &[]);
    let sp = dir.path().join("spline.json");
    let out = Command::new(env!("CARGO_BIN_EXE_splineformer"))
        .args(["verify", s(&w), s(&sp), "--samples", "5"])
        .env("SPLINEFORMER_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(stdout_json(&out)["seed"], 9);
}

#[test]
fn masked_compile_rejects_lookahead() {
    let dir = TempDir::new().unwrap();
    let spline = json!({"n": 1, "p": 2, "grid": [[{"op": "var", "name": "x_1_2"}, x11()]]});
    let (out, _) = compile(&dir, &spline, &["--masked"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("x_1_2"));
}

#[test]
fn malformed_spline_is_input_error() {
    let dir = TempDir::new().unwrap();
    let (out, _) = compile(&dir, &json!({"n": 1, "p": 1, "grid": [[{"op": "nope"}]]}), &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn degree_uses_block_count_bound() {
    let dir = TempDir::new().unwrap();
    let (_, w) = compile(&dir, &cube(), &["--mode", "pruned"]);
    let out = bin(&["degree", s(&w), "--trials", "5"]);
    assert_eq!(out.status.code(), Some(0));
    let r = stdout_json(&out);
    assert_eq!(r["modal"], 3);
    let weights: Value = serde_json::from_str(&std::fs::read_to_string(&w).unwrap()).unwrap();
    let blocks = weights["blocks"].as_array().unwrap().len() as u32;
    assert_eq!(r["bound"], 3u64.pow(blocks));
}

#[test]
fn smooth_tables() {
    let dir = TempDir::new().unwrap();
    let (_, w) = compile(&dir, &cube(), &[]);
    let out = bin(&["smooth", s(&w), "--activation", "softplus", "--betas", "10,100,1000", "--samples", "20"]);
    assert_eq!(out.status.code(), Some(0));
    let t = stdout_json(&out);
    assert_eq!(t["rows"].as_array().unwrap().len(), 3);
    assert_eq!(t["monotone"], true);
    assert_eq!(t["within_bounds"], true);

    let out = bin(&["smooth", s(&w), "--activation", "softplus", "--betas"]);
    assert_eq!(stdout_json(&out)["rows"], json!([]));

    let out = bin(&["smooth", s(&w), "--activation", "softmax", "--samples", "10"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(stdout_json(&out)["probability_columns"], true);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let (a, w) = compile(&dir, &abs(), &[]);
    let wa = std::fs::read(&w).unwrap();
    let (b, _) = compile(&dir, &abs(), &[]);
    assert_eq!(a.stdout, b.stdout);
    assert_eq!(wa, std::fs::read(&w).unwrap());
    let sp = dir.path().join("spline.json");
    let v1 = bin(&["degree", s(&w), "--trials", "4"]);
    let v2 = bin(&["degree", s(&w), "--trials", "4"]);
    assert_eq!(v1.stdout, v2.stdout);
    let e1 = bin(&["verify", s(&w), s(&sp), "--samples", "30"]);
    let e2 = bin(&["verify", s(&w), s(&sp), "--samples", "30"]);
    assert_eq!(e1.stdout, e2.stdout);
}

#[test]
fn encoder_decoder_weights() {
    let dir = TempDir::new().unwrap();
    let stack = splineformer::fixtures::unit_encdec();
    let w = write(&dir, "ed.json", &serde_json::to_value(&stack).unwrap());
    let x = write(&dir, "x.json", &json!([["2"]]));
    let y = write(&dir, "y.json", &json!([["1"]]));
    let out = bin(&["eval", s(&w), s(&x), "--y", s(&y)]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(stdout_json(&out), json!([["64"]]));
    assert_eq!(bin(&["eval", s(&w), s(&x)]).status.code(), Some(2));
    let out = bin(&["degree", s(&w), "--trials", "6"]);
    assert_eq!(stdout_json(&out)["bound"], 9);
}
