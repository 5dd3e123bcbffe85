use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nmsparse::codec::decode;
use nmsparse::tensor::synth_outlier_matrix;
use nmsparse::{DType, SparseEncodedTensor};
use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nmsparse"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(dir: &Path, args: &[&str]) -> Value {
    serde_json::from_str(&ok(dir, args)).unwrap()
}

/// Weights (64×512, 8 outlier columns) and calibration (256 samples) in a fresh dir.
fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["synth", "--rows", "64", "--cols", "512", "--outliers", "8", "--scale", "10", "--seed", "7", "-o", "w.dwt"]);
    ok(dir.path(), &["synth", "--rows", "256", "--cols", "512", "--outliers", "8", "--scale", "20", "--seed", "8", "-o", "x.dwt"]);
    dir
}

fn eval_error(dir: &Path, prune_flags: &[&str]) -> f64 {
    let mut args = vec!["prune", "w.dwt", "--calib", "x.dwt"];
    args.extend_from_slice(prune_flags);
    ok(dir, &args);
    json(dir, &["eval", "w.nms", "--dense", "w.dwt", "--calib", "x.dwt", "--json"])["relative_output_error"]
        .as_f64()
        .unwrap()
}

#[test]
fn analyze_table_values() {
    let dir = tempfile::tempdir().unwrap();
    let rows = json(dir.path(), &["analyze", "--patterns", "2:4,8:16,4:4", "--json"]);
    assert_eq!(rows[0]["config_count"], "6");
    assert_eq!(rows[0]["bits_per_element"], 0.75);
    assert_eq!(rows[1]["config_count"], "12870");
    assert_eq!(rows[1]["stacked_two_four"], "1296");
    assert_eq!(rows[1]["bits_per_element"], 0.875);
    assert_eq!(rows[2]["config_count"], "1");
    assert_eq!(rows[2]["bits_per_element"], 0.0);

    let text = ok(dir.path(), &["analyze", "--patterns", "8:16", "--verify-superset"]);
    assert!(text.contains("1296/1296 stacked patterns valid, dominance holds on 12870-pattern exhaustive check"));
}

#[test]
fn analyze_rejects_bad_pattern() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["analyze", "--patterns", "9:8"]).status.code(), Some(2));
    assert_eq!(run(dir.path(), &["analyze", "--patterns", "two:four"]).status.code(), Some(2));
}

#[test]
fn full_pipeline_writes_file_and_manifest() {
    let dir = fixture();
    let d = dir.path();
    ok(d, &[
        "prune", "w.dwt", "--calib", "x.dwt", "--pattern", "8:16", "--salient", "16:256", "--scorer", "ria",
        "--equalize", "--variance-correct", "--reconstruct", "--report", "m.json",
    ]);
    let m: Value = serde_json::from_slice(&std::fs::read(d.join("m.json")).unwrap()).unwrap();
    let layer = &m["layers"][0];
    for key in ["correction_factor", "relative_output_error", "residual_fraction", "salient_fraction", "metadata_bits_per_element"] {
        assert!(layer[key].as_f64().unwrap().is_finite(), "{key}");
    }
    let rec = &layer["reconstruction"];
    assert!(rec["final_loss"].as_f64().unwrap() <= rec["initial_loss"].as_f64().unwrap());
    assert_eq!(m["config"]["residual_pattern"], "8:16");

    let t = SparseEncodedTensor::read_file(d.join("w.nms")).unwrap();
    let decoded = decode(&t).unwrap();
    decoded.check_invariants().unwrap();
    assert_eq!(decoded.salient.as_ref().unwrap().shape().n_keep(), 16);
}

#[test]
fn identity_fixture_keeps_top_magnitudes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let w = synth_outlier_matrix(4, 32, 0, 1.0, 3).unwrap();
    std::fs::write(d.join("w.dwt"), w.to_dwt_bytes(DType::F64)).unwrap();
    let ones = nmsparse::WeightMatrix::new(1, 32, vec![1.0; 32]).unwrap();
    std::fs::write(d.join("x.dwt"), ones.to_dwt_bytes(DType::F64)).unwrap();
    ok(d, &["prune", "w.dwt", "--calib", "x.dwt", "--pattern", "2:4", "--scorer", "magnitude"]);

    let layer = decode(&SparseEncodedTensor::read_file(d.join("w.nms")).unwrap()).unwrap();
    for (r, block) in w.data().chunks(4).enumerate() {
        let mut order: Vec<usize> = (0..4).collect();
        order.sort_by(|&a, &b| block[b].abs().total_cmp(&block[a].abs()));
        for (j, &v) in block.iter().enumerate() {
            let expect = if order[..2].contains(&j) { v } else { 0.0 };
            assert_eq!(layer.residual.data()[r * 4 + j], expect);
        }
    }
}

#[test]
fn dense_pattern_evaluates_to_zero_error() {
    let dir = fixture();
    assert_eq!(eval_error(dir.path(), &["--pattern", "4:4", "--scorer", "magnitude"]), 0.0);
}

#[test]
fn eval_orderings() {
    let dir = fixture();
    let d = dir.path();
    let k4 = eval_error(d, &["--pattern", "2:4", "--salient", "4:256"]);
    let k16 = eval_error(d, &["--pattern", "2:4", "--salient", "16:256"]);
    assert!(k16 <= k4, "K=16 {k16} vs K=4 {k4}");
    let e24 = eval_error(d, &["--pattern", "2:4", "--scorer", "magnitude"]);
    let e816 = eval_error(d, &["--pattern", "8:16", "--scorer", "magnitude"]);
    assert!(e816 <= e24, "8:16 {e816} vs 2:4 {e24}");
}

fn strip_wall_time(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("wall_time_seconds");
    v
}

#[test]
fn outputs_independent_of_job_count() {
    let dir = fixture();
    let d = dir.path();
    for s in 0..4 {
        let name = format!("l{s}.dwt");
        ok(d, &["synth", "--rows", "8", "--cols", "512", "--outliers", "4", "--seed", &s.to_string(), "-o", &name]);
    }
    let inputs = ["l0.dwt", "l1.dwt", "l2.dwt", "l3.dwt"];
    let mut results = Vec::new();
    for jobs in ["1", "4"] {
        let out = format!("out{jobs}");
        let mut args = vec!["prune", "--calib", "x.dwt", "--pattern", "8:16", "--salient", "8:256", "--equalize",
            "--variance-correct", "--reconstruct", "--json", "--jobs", jobs, "--out-dir", &out];
        args.extend_from_slice(&inputs);
        let mut manifest = strip_wall_time(json(d, &args));
        for l in manifest["layers"].as_array_mut().unwrap() {
            l.as_object_mut().unwrap().remove("output");
        }
        let files: Vec<Vec<u8>> = inputs
            .iter()
            .map(|i| std::fs::read(d.join(&out).join(PathBuf::from(i).with_extension("nms"))).unwrap())
            .collect();
        results.push((manifest, files));
    }
    assert_eq!(results[0], results[1]);
}

#[test]
fn config_file_matches_flags() {
    let dir = fixture();
    let d = dir.path();
    let cfg = r#"{"residual_pattern": "2:4", "salient_pattern": "8:256", "scorer": "ria", "use_variance_correction": true}"#;
    std::fs::write(d.join("cfg.json"), cfg).unwrap();
    ok(d, &["prune", "w.dwt", "--calib", "x.dwt", "--config", "cfg.json", "--out-dir", "a"]);
    ok(d, &["prune", "w.dwt", "--calib", "x.dwt", "--pattern", "2:4", "--salient", "8:256", "--variance-correct", "--out-dir", "b"]);
    assert_eq!(std::fs::read(d.join("a/w.nms")).unwrap(), std::fs::read(d.join("b/w.nms")).unwrap());

    // flags and config are mutually exclusive
    let out = run(d, &["prune", "w.dwt", "--calib", "x.dwt", "--config", "cfg.json", "--pattern", "2:4"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn exit_codes() {
    let dir = fixture();
    let d = dir.path();
    std::fs::write(d.join("bad.json"), r#"{"residual_pattern": "2:4", "scorer": "ria", "bogus": 1}"#).unwrap();
    assert_eq!(run(d, &["prune", "w.dwt", "--calib", "x.dwt", "--config", "bad.json"]).status.code(), Some(2));
    assert_eq!(
        run(d, &["prune", "w.dwt", "--calib", "x.dwt", "--pattern", "2:4", "--epsilon", "-1"]).status.code(),
        Some(2)
    );

    std::fs::write(d.join("junk.dwt"), b"DWT1garbage").unwrap();
    let out = run(d, &["prune", "junk.dwt", "--calib", "x.dwt", "--pattern", "2:4"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(run(d, &["prune", "missing.dwt", "--calib", "x.dwt", "--pattern", "2:4"]).status.code(), Some(1));

    // calibration width mismatch
    ok(d, &["synth", "--rows", "4", "--cols", "256", "-o", "narrow.dwt"]);
    assert_eq!(run(d, &["prune", "w.dwt", "--calib", "narrow.dwt", "--pattern", "2:4"]).status.code(), Some(1));

    ok(d, &["prune", "w.dwt", "--calib", "x.dwt", "--pattern", "2:4"]);
    assert_eq!(
        run(d, &["eval", "w.nms", "--dense", "narrow.dwt", "--calib", "x.dwt"]).status.code(),
        Some(1)
    );
}
