use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adaptvig::io;
use adaptvig_core::agc::shift_count;
use adaptvig_core::graph::build_scaffold_graph;
use adaptvig_core::model::{Model, ModelConfig, TOY16_CHANNELS};
use adaptvig_core::spectral::spectral_gap;
use adaptvig_core::tensor::{Shape, Tensor4};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_adaptvig"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

fn write_input(dir: &Path, name: &str, t: &Tensor4) -> PathBuf {
    let path = dir.join(name);
    io::save_tensor(&path, t).unwrap();
    path
}

#[test]
fn generate_is_deterministic_and_sized() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["--seed", "42", "--out-dir", "a", "generate"]);
    ok(d, &["--seed", "42", "--out-dir", "b", "generate"]);
    ok(d, &["--seed", "43", "--out-dir", "c", "generate"]);
    let a = fs::read(d.join("a/images.avgt")).unwrap();
    assert_eq!(a, fs::read(d.join("b/images.avgt")).unwrap());
    assert_eq!(fs::read(d.join("a/labels.csv")).unwrap(), fs::read(d.join("b/labels.csv")).unwrap());
    assert_ne!(a, fs::read(d.join("c/images.avgt")).unwrap());
    assert_eq!(a.len(), 24 + 4 * 200 * 3 * 16 * 16);
    let images = io::load_tensor(&d.join("a/images.avgt")).unwrap();
    assert_eq!(images.shape(), Shape::new(200, 3, 16, 16));
    let labels = io::load_labels(&d.join("a/labels.csv")).unwrap();
    assert_eq!(labels.len(), 200);
    assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 100);
}

#[test]
fn outputs_stay_under_out_dir() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["--out-dir", "nested/run", "generate", "--samples", "4"]);
    ok(tmp.path(), &["--out-dir", "nested/run", "bench", "--sizes", "8", "--repeats", "1"]);
    let top: Vec<_> = fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(top, vec!["nested"]);
}

#[test]
fn scaffold_row_matches_library() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["--out-dir", "g", "analyze-graph", "--sizes", "14", "--k", "2"]);
    let text = fs::read_to_string(tmp.path().join("g/graph_metrics.csv")).unwrap();
    assert!(text.starts_with("method,h,w,k_or_knn,tau,C,lambda1,lambda2,S\n"));
    let r = &rows(&tmp.path().join("g/graph_metrics.csv"))[0];
    let lib = spectral_gap(&build_scaffold_graph(14, 14, 2).unwrap()).unwrap();
    assert_eq!(r[0], "scaffold");
    assert_eq!(r[5].parse::<f64>().unwrap(), lib.clustering);
    assert_eq!(r[6].parse::<f64>().unwrap(), lib.lambda1);
    assert_eq!(r[7].parse::<f64>().unwrap(), lib.lambda2);
    assert_eq!(r[8].parse::<f64>().unwrap(), lib.spectral_gap);
}

#[test]
fn gated_on_constant_input_equals_scaffold() {
    let tmp = tempfile::tempdir().unwrap();
    let input = write_input(tmp.path(), "flat.avgt", &Tensor4::full(Shape::new(1, 3, 12, 12), 0.7).unwrap());
    let input = input.to_str().unwrap();
    ok(tmp.path(), &["--out-dir", "s", "analyze-graph", "--mode", "scaffold", "--input", input, "--k", "2"]);
    ok(tmp.path(), &["--out-dir", "g", "analyze-graph", "--mode", "gated", "--input", input, "--k", "2", "--tau", "0.3,1"]);
    let s = &rows(&tmp.path().join("s/graph_metrics.csv"))[0];
    let g = rows(&tmp.path().join("g/graph_metrics.csv"));
    assert_eq!(g.len(), 2);
    for row in &g {
        assert_eq!(row[0], "agc_gated");
        assert_eq!(row[1..4], s[1..4]);
        assert_eq!(row[5..], s[5..]);
    }
}

#[test]
fn sweep_and_input_requirements() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["--out-dir", "g", "analyze-graph", "--sizes", "7,14,28"]);
    let r = rows(&tmp.path().join("g/graph_metrics.csv"));
    let nodes: Vec<usize> = r.iter().map(|row| row[1].parse::<usize>().unwrap() * row[2].parse::<usize>().unwrap()).collect();
    assert_eq!(nodes, vec![49, 196, 784]);
    let out = run(tmp.path(), &["--out-dir", "x", "analyze-graph", "--mode", "knn"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--input"));
}

#[test]
fn knn_mode_reads_the_input() {
    let tmp = tempfile::tempdir().unwrap();
    let x = Tensor4::from_fn(Shape::new(2, 2, 6, 6), |n, c, i, j| ((n + 1) * (c + 2) * (i * 5 + j * 3) % 7) as f64).unwrap();
    let input = write_input(tmp.path(), "x.avgt", &x);
    ok(tmp.path(), &["--out-dir", "k", "analyze-graph", "--mode", "knn", "--input", input.to_str().unwrap(), "--knn", "3,5", "--sample", "1"]);
    let r = rows(&tmp.path().join("k/graph_metrics.csv"));
    assert_eq!(r.iter().map(|row| row[3].as_str()).collect::<Vec<_>>(), ["3", "5"]);
    assert!(r.iter().all(|row| row[0] == "knn" && row[4].is_empty()));
}

#[test]
fn grad_check_passes_and_catches_a_corrupted_adjoint() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(tmp.path(), &["--seed", "7", "--out-dir", "ok", "grad-check", "--skip-model"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("temperature_closed_form"));
    let report = rows(&tmp.path().join("ok/grad_check.csv"));
    assert!(report.iter().all(|r| r[5] == "true"));

    let bad = run(tmp.path(), &["--seed", "7", "--out-dir", "bad", "grad-check", "--skip-model", "--inject-gate-fault", "1.001"]);
    assert_eq!(bad.status.code(), Some(1));
    let report = rows(&tmp.path().join("bad/grad_check.csv"));
    let failed: Vec<&str> = report.iter().filter(|r| r[5] == "false").map(|r| r[0].as_str()).collect();
    assert!(failed.contains(&"gate_exp") && failed.contains(&"agc_block"), "{failed:?}");
}

fn pgm(dir: &Path) -> Vec<u8> {
    let (w, h, px) = io::read_pgm(&dir.join("heatmap.pgm")).unwrap();
    assert_eq!(px.len(), w * h);
    px
}

#[test]
fn heatmap_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let flat = write_input(d, "flat.avgt", &Tensor4::full(Shape::new(1, 2, 5, 7), -0.25).unwrap());
    ok(d, &["--out-dir", "flat", "heatmap", "--input", flat.to_str().unwrap(), "--row", "1", "--col", "2"]);
    assert!(pgm(&d.join("flat")).iter().all(|&p| p == 255));

    // Object value 1.0 in the top-left 3x3, background 0.25.
    let two = Tensor4::from_fn(Shape::new(1, 1, 6, 6), |_, _, i, j| if i < 3 && j < 3 { 1.0 } else { 0.25 }).unwrap();
    let two = write_input(d, "two.avgt", &two);
    ok(d, &["--out-dir", "two", "heatmap", "--input", two.to_str().unwrap(), "--row", "4", "--col", "5", "--temperature", "0.5"]);
    let px = pgm(&d.join("two"));
    assert_eq!(px[4 * 6 + 5], 255);
    let mut levels = px.clone();
    levels.sort_unstable();
    levels.dedup();
    assert_eq!(levels.len(), 2, "{levels:?}");
    let csv_rows = rows(&d.join("two/heatmap.csv"));
    assert_eq!(csv_rows.len(), 36);
    let g: f64 = csv_rows[0][2].parse().unwrap();
    assert!((g - (-0.75f64 / (0.5 + 1e-6)).exp()).abs() < 1e-12);

    let out = run(d, &["--out-dir", "oob", "heatmap", "--input", two.to_str().unwrap(), "--row", "6", "--col", "0"]);
    assert!(!out.status.success());
}

#[test]
fn bench_shift_counts() {
    let tmp = tempfile::tempdir().unwrap();
    ok(tmp.path(), &["--out-dir", "b", "bench", "--sizes", "7,8,16,32,64", "--channels", "2", "--repeats", "1"]);
    let text = fs::read_to_string(tmp.path().join("b/bench.csv")).unwrap();
    assert!(text.starts_with("h,w,shift_count,wall_time\n"));
    let counts: Vec<usize> = rows(&tmp.path().join("b/bench.csv")).iter().map(|r| r[2].parse().unwrap()).collect();
    assert_eq!(counts, vec![6, 8, 10, 12, 14]);
    for s in [5usize, 9, 23, 100] {
        assert_eq!(shift_count(2 * s, 2 * s), shift_count(s, s) + 2);
        assert_eq!(shift_count(2 * s, s), shift_count(s, s) + 1);
    }
}

const SMALL_RUN: &str = r#"{
  "train": {"learning_rate": 0.05, "momentum": 0.9, "steps": 12, "batch_size": 8, "seed": 0},
  "dataset": {"kind": "synthetic_blobs", "samples": 24, "classes": 2, "channels": 3, "h": 16, "w": 16}
}"#;

#[test]
fn train_artifacts_and_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.json"), SMALL_RUN).unwrap();
    ok(d, &["--seed", "5", "--config", "run.json", "--out-dir", "a", "train"]);
    ok(d, &["--seed", "5", "--config", "run.json", "--out-dir", "b", "train"]);
    for f in ["metrics.csv", "params.avgt", "config.json", "summary.json"] {
        assert_eq!(fs::read(d.join("a").join(f)).unwrap(), fs::read(d.join("b").join(f)).unwrap(), "{f}");
    }
    let text = fs::read_to_string(d.join("a/metrics.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let model = Model::new(ModelConfig::toy16(TOY16_CHANNELS, 2)).unwrap();
    assert_eq!(header[..3], ["step", "loss", "accuracy"]);
    assert_eq!(header.len(), 3 + model.temperatures().len());
    let steps: Vec<String> = rows(&d.join("a/metrics.csv")).iter().map(|r| r[0].clone()).collect();
    assert_eq!(steps, ["0", "10", "11"]);
    let echo: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("a/config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["seed"], 5);
    let params = io::load_params(&d.join("a/params.avgt"), model.layout()).unwrap();
    assert_eq!(params.scalar_count(), model.layout().scalar_count());
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fs::write(d.join("run.json"), SMALL_RUN.replace("\"learning_rate\": 0.05", "\"learning_rate\": 0.0")).unwrap();
    ok(d, &["--config", "run.json", "--out-dir", "z", "train"]);
    let model = Model::new(ModelConfig::toy16(TOY16_CHANNELS, 2)).unwrap();
    let saved = io::load_params(&d.join("z/params.avgt"), model.layout()).unwrap();
    let init = model.init_params(0);
    for (a, b) in saved.values().iter().zip(init.values()) {
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| *x == (*y as f32) as f64));
    }
    for row in rows(&d.join("z/metrics.csv")) {
        assert!(row[3..].iter().all(|t| t == "1"));
    }
}

#[test]
fn config_flag_is_rejected_outside_train() {
    let tmp = tempfile::tempdir().unwrap();
    let out = run(tmp.path(), &["--config", "x.json", "bench"]);
    assert_eq!(out.status.code(), Some(2));
}
