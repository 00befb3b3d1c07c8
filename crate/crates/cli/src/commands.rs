//! The subcommands as library functions. Each writes only under `out_dir` and
//! returns what it wrote so callers and tests can inspect it.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use adaptvig_core::agc::{agc_aggregate, gate_heatmap, scaffold_shifts, AgcConfig, GatingParams, Heatmap};
use adaptvig_core::data::{generate_blobs, Dataset};
use adaptvig_core::gradcheck::{run_suite, SuiteOptions, SuiteReport};
use adaptvig_core::graph::{build_gated_graph, build_knn_graph, build_scaffold_graph, AdjacencyMatrix};
use adaptvig_core::model::Model;
use adaptvig_core::spectral::{spectral_gap_with, EigenMethod};
use adaptvig_core::tensor::{Shape, Tensor4};
use adaptvig_core::train::{train, TrainReport};
use anyhow::{bail, ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DatasetConfig, RunConfig};
use crate::io;

fn prepare(out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))
}

/// Sample `index` of a batch as its own `(1, c, h, w)` tensor.
pub fn take_sample(t: &Tensor4, index: usize) -> Result<Tensor4> {
    let s = t.shape();
    ensure!(index < s.n, "sample {index} out of range for a batch of {}", s.n);
    let per = s.c * s.h * s.w;
    let data = t.data()[index * per..(index + 1) * per].to_vec();
    Ok(Tensor4::from_vec(Shape::new(1, s.c, s.h, s.w), data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenerateArgs {
    pub seed: u64,
    pub samples: usize,
    pub classes: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

/// Writes `images.avgt` and `labels.csv`.
pub fn generate(out_dir: &Path, args: &GenerateArgs) -> Result<Dataset> {
    prepare(out_dir)?;
    let data = generate_blobs(args.seed, args.samples, args.classes, (args.channels, args.h, args.w))?;
    io::save_tensor(&out_dir.join("images.avgt"), &data.images)?;
    io::save_labels(&out_dir.join("labels.csv"), &data.labels)?;
    Ok(data)
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.dataset {
        DatasetConfig::SyntheticBlobs {
            samples,
            classes,
            channels,
            h,
            w,
        } => Ok(generate_blobs(cfg.train.seed, *samples, *classes, (*channels, *h, *w))?),
        DatasetConfig::TensorFile { images, labels } => {
            let images = io::load_tensor(images)?;
            let labels = io::load_labels(labels)?;
            ensure!(images.shape().n == labels.len(), "{} images but {} labels", images.shape().n, labels.len());
            let classes = labels.iter().max().map_or(0, |m| m + 1);
            Ok(Dataset { images, labels, classes })
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub report: TrainReport,
    /// Temperature column names in `metrics.csv`, one per AGC block.
    pub temperature_columns: Vec<String>,
}

/// Writes `metrics.csv`, `params.avgt`, `config.json` (the resolved config) and
/// `summary.json`.
pub fn train_run(out_dir: &Path, cfg: &RunConfig) -> Result<TrainOutput> {
    prepare(out_dir)?;
    let model = Model::new(cfg.model.clone())?;
    let data = load_dataset(cfg)?;
    ensure!(
        data.classes <= cfg.model.num_classes,
        "dataset has {} classes but the model predicts {}",
        data.classes,
        cfg.model.num_classes
    );
    fs::write(out_dir.join("config.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let mut params = model.init_params(cfg.model.seed);
    let report = train(&model, &mut params, &data, &cfg.train)?;

    let specs = model.layout().specs();
    let temperature_columns: Vec<String> =
        model.temperatures().iter().map(|id| format!("T_{}", specs[id.index()].name)).collect();
    let mut w = csv::Writer::from_path(out_dir.join("metrics.csv"))?;
    let mut header = vec!["step".to_string(), "loss".into(), "accuracy".into()];
    header.extend(temperature_columns.iter().cloned());
    w.write_record(&header)?;
    for log in &report.logs {
        let mut row = vec![log.step.to_string(), log.loss.to_string(), log.accuracy.to_string()];
        row.extend(log.temperatures.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    io::save_params(&out_dir.join("params.avgt"), &params)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        parameters: usize,
        initial_loss: f64,
        final_loss: f64,
        final_accuracy: f64,
        final_temperatures: Vec<(&'a str, f64)>,
    }
    let summary = Summary {
        parameters: params.scalar_count(),
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        final_accuracy: report.final_accuracy,
        final_temperatures: temperature_columns
            .iter()
            .zip(model.temperatures())
            .map(|(name, id)| (name.as_str(), params.get(id).data()[0]))
            .collect(),
    };
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(TrainOutput {
        report,
        temperature_columns,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    Scaffold,
    Gated,
    Knn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphArgs {
    pub mode: GraphMode,
    /// Grid sizes for scaffold mode; gated and knn modes take the input's grid.
    pub sizes: Vec<(usize, usize)>,
    pub ks: Vec<usize>,
    pub taus: Vec<f64>,
    pub knns: Vec<usize>,
    pub input: Option<PathBuf>,
    pub sample: usize,
    pub agc: AgcConfig,
    pub temperature: f64,
    pub method: EigenMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GraphRow {
    pub method: &'static str,
    pub h: usize,
    pub w: usize,
    pub k_or_knn: usize,
    pub tau: Option<f64>,
    #[serde(rename = "C")]
    pub clustering: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    #[serde(rename = "S")]
    pub spectral_gap: f64,
}

fn graph_row(method: &'static str, h: usize, w: usize, k: usize, tau: Option<f64>, a: &AdjacencyMatrix, m: EigenMethod) -> Result<GraphRow> {
    let g = spectral_gap_with(a, m)?;
    Ok(GraphRow {
        method,
        h,
        w,
        k_or_knn: k,
        tau,
        clustering: g.clustering,
        lambda1: g.lambda1,
        lambda2: g.lambda2,
        spectral_gap: g.spectral_gap,
    })
}

/// One row per (size, k, tau) or (knn) configuration, written to `graph_metrics.csv`.
pub fn analyze_graph(out_dir: &Path, args: &GraphArgs) -> Result<Vec<GraphRow>> {
    prepare(out_dir)?;
    let input = match (&args.input, args.mode) {
        (Some(path), _) => Some(take_sample(&io::load_tensor(path)?, args.sample)?),
        (None, GraphMode::Scaffold) => None,
        (None, _) => bail!("gated and knn modes need --input"),
    };
    let mut rows = Vec::new();
    match args.mode {
        GraphMode::Scaffold => {
            let sizes = match &input {
                Some(x) => vec![(x.shape().h, x.shape().w)],
                None => args.sizes.clone(),
            };
            ensure!(!sizes.is_empty(), "no grid sizes given");
            for &(h, w) in &sizes {
                for &k in &args.ks {
                    let a = build_scaffold_graph(h, w, k)?;
                    rows.push(graph_row("scaffold", h, w, k, None, &a, args.method)?);
                }
            }
        }
        GraphMode::Gated => {
            let x = input.expect("checked above");
            let (h, w) = (x.shape().h, x.shape().w);
            let params = GatingParams::new(args.temperature);
            for &k in &args.ks {
                for &tau in &args.taus {
                    let cfg = AgcConfig { k, ..args.agc };
                    let a = build_gated_graph(&x, &cfg, &params, tau)?;
                    rows.push(graph_row("agc_gated", h, w, k, Some(tau), &a, args.method)?);
                }
            }
        }
        GraphMode::Knn => {
            let x = input.expect("checked above");
            let (h, w) = (x.shape().h, x.shape().w);
            for &knn in &args.knns {
                let g = build_knn_graph(&x, knn)?;
                rows.push(graph_row("knn", h, w, knn, None, &g.adjacency, args.method)?);
            }
        }
    }
    let mut wr = csv::Writer::from_path(out_dir.join("graph_metrics.csv"))?;
    for row in &rows {
        wr.serialize(row)?;
    }
    wr.flush()?;
    Ok(rows)
}

/// Runs the gradient suite and writes `grad_check.csv`.
pub fn grad_check(out_dir: &Path, options: SuiteOptions) -> Result<SuiteReport> {
    prepare(out_dir)?;
    let report = run_suite(options)?;
    let mut w = csv::Writer::from_path(out_dir.join("grad_check.csv"))?;
    w.write_record(["component", "max_relative_error", "tolerance", "coordinates", "kinks", "passed"])?;
    for c in &report.components {
        w.write_record([
            c.name.clone(),
            c.max_relative_error.to_string(),
            c.tolerance.to_string(),
            c.coordinates.to_string(),
            c.kinks.to_string(),
            c.passed().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapArgs {
    pub input: PathBuf,
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    pub temperature: f64,
}

/// Gate value to gray level, 1.0 mapping to 255.
pub fn gray_level(g: f64) -> u8 {
    (g * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes `heatmap.pgm` and `heatmap.csv` (row, col, gate).
pub fn heatmap(out_dir: &Path, args: &HeatmapArgs) -> Result<Heatmap> {
    prepare(out_dir)?;
    let x = take_sample(&io::load_tensor(&args.input)?, args.sample)?;
    let map = gate_heatmap(&x, (args.row, args.col), &GatingParams::new(args.temperature))?;
    let pixels: Vec<u8> = map.values.iter().map(|&g| gray_level(g)).collect();
    io::write_pgm(&out_dir.join("heatmap.pgm"), map.w, map.h, &pixels)?;
    let mut w = csv::Writer::from_path(out_dir.join("heatmap.csv"))?;
    w.write_record(["row", "col", "gate"])?;
    for r in 0..map.h {
        for c in 0..map.w {
            w.write_record([r.to_string(), c.to_string(), map.get(r, c).to_string()])?;
        }
    }
    w.flush()?;
    Ok(map)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub h: usize,
    pub w: usize,
    pub shift_count: usize,
    /// Fastest of the repeats, in seconds.
    pub wall_time: f64,
}

/// Times `agc_aggregate` on random `(1, channels, s, s)` inputs and checks the
/// shift count law for every size. Writes `bench.csv`.
pub fn bench(out_dir: &Path, seed: u64, sizes: &[usize], channels: usize, repeats: usize) -> Result<Vec<BenchRow>> {
    prepare(out_dir)?;
    ensure!(repeats >= 1, "need at least one repeat");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &s in sizes {
        ensure!(s >= 2, "size {s} too small for a scaffold");
        let count = scaffold_shifts(s, s, 1)?.len();
        let law = 2 + 2 * s.ilog2() as usize;
        ensure!(count == law, "{s}x{s}: {count} shifts, law gives {law}");
        let x = Tensor4::from_fn(Shape::new(1, channels, s, s), |_, _, _, _| rng.random_range(-1.0..1.0))?;
        let mut best = f64::INFINITY;
        for _ in 0..repeats {
            let start = Instant::now();
            std::hint::black_box(agc_aggregate(&x, &AgcConfig::new(1), &GatingParams::default())?);
            best = best.min(start.elapsed().as_secs_f64());
        }
        rows.push(BenchRow {
            h: s,
            w: s,
            shift_count: count,
            wall_time: best,
        });
    }
    let mut w = csv::Writer::from_path(out_dir.join("bench.csv"))?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_levels() {
        assert_eq!(gray_level(1.0), 255);
        assert_eq!(gray_level(0.0), 0);
        assert_eq!(gray_level(0.5), 128);
        assert_eq!(gray_level(1.5), 255);
    }

    #[test]
    fn take_sample_slices_the_batch() {
        let t = Tensor4::from_fn(Shape::new(3, 2, 2, 2), |n, c, h, w| (n * 8 + c * 4 + h * 2 + w) as f64).unwrap();
        let s = take_sample(&t, 2).unwrap();
        assert_eq!(s.shape(), Shape::new(1, 2, 2, 2));
        assert_eq!(s.data()[0], 16.0);
        assert!(take_sample(&t, 3).is_err());
    }
}
