//! End-to-end tests of the `symreg` binary: determinism, data formats, and
//! exit codes.

use std::path::Path;
use std::process::Command;

fn symreg() -> Command {
    Command::new(env!("CARGO_BIN_EXE_symreg"))
}

fn write_linear_csv(path: &Path) {
    let mut s = String::from("x_1,y\n");
    for i in 0..60 {
        let x = -3.0 + i as f64 * 0.1;
        s.push_str(&format!("{x},{}\n", 2.5 * x + 1.0));
    }
    std::fs::write(path, s).unwrap();
}

#[test]
fn generate_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    for out in [&a, &b] {
        let st = symreg()
            .args(["generate", "--count", "5", "--d-max", "2", "--seed", "42"])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn fit_with_mock_decoder_recovers_linear_data() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("lin.csv");
    write_linear_csv(&data);
    let out = symreg()
        .args(["fit", "--mock-decoder", "--seed", "3"])
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mse = v["mse_whitened"].as_f64().unwrap();
    assert!(mse < 1e-12, "mock-decoder fit should nail a linear target, mse {mse}");
    assert!(v["formula"].as_str().is_some());
}

#[test]
fn refine_converges_on_known_skeleton() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("lin.csv");
    write_linear_csv(&data);
    let out = symreg()
        .args(["refine", "--skeleton", "add mul <> x1 <>", "--init", "2,2"])
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(v["loss"].as_f64().unwrap() < 1e-10);
}

#[test]
fn malformed_data_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    std::fs::write(&data, "x_1,y\n1,foo\n").unwrap();
    let out = symreg()
        .args(["fit", "--mock-decoder"])
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn conflicting_decoder_flags_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("lin.csv");
    write_linear_csv(&data);
    let ckpt = dir.path().join("absent.json");
    let out = symreg()
        .args(["fit", "--mock-decoder"])
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn count_skeletons_known_values() {
    let out = symreg()
        .args(["count-skeletons", "--max-ops", "3", "--dim", "1"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let counts: Vec<u64> = text
        .lines()
        .filter_map(|l| l.split_whitespace().last())
        .filter_map(|v| v.parse().ok())
        .collect();
    assert_eq!(counts, vec![1, 13, 208, 3835]);
}
