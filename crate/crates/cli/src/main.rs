use std::path::PathBuf;
use std::process::ExitCode;

use adaptvig::commands::{self, GenerateArgs, GraphArgs, GraphMode, HeatmapArgs};
use adaptvig::config::RunConfig;
use adaptvig_core::agc::{AgcConfig, DistanceKind, GateKind, INITIAL_TEMPERATURE};
use adaptvig_core::gradcheck::SuiteOptions;
use adaptvig_core::graph::DEFAULT_TAU;
use adaptvig_core::spectral::EigenMethod;
use anyhow::{bail, Result};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "adaptvig", version, about = "Adaptive graph convolution: data, training, graph analysis and checks")]
struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory that receives every output file.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// JSON run config (read by `train`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Scaffold,
    Gated,
    Knn,
}

#[derive(Clone, Copy, ValueEnum)]
enum Gate {
    Exp,
    Sigmoid,
}

#[derive(Clone, Copy, ValueEnum)]
enum Distance {
    L1,
    L2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Eigen {
    Auto,
    Dense,
    Iterative,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic blob images (images.avgt) and labels (labels.csv).
    Generate {
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        channels: usize,
        #[arg(long, default_value_t = 16)]
        h: usize,
        #[arg(long, default_value_t = 16)]
        w: usize,
    },
    /// Train with SGD + momentum; writes metrics.csv, params.avgt, config.json, summary.json.
    Train,
    /// Clustering coefficient and spectral gap of scaffold, gated or KNN graphs.
    AnalyzeGraph {
        #[arg(long, value_enum, default_value = "scaffold")]
        mode: Mode,
        /// Square grid sides for scaffold mode, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [14])]
        sizes: Vec<usize>,
        /// Local hop distances, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [1])]
        k: Vec<usize>,
        /// Gate thresholds for gated mode, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [DEFAULT_TAU])]
        tau: Vec<f64>,
        /// Neighbor counts for knn mode, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [9])]
        knn: Vec<usize>,
        /// AVGT feature map; required for gated and knn modes.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = INITIAL_TEMPERATURE)]
        temperature: f64,
        #[arg(long, value_enum, default_value = "exp")]
        gate: Gate,
        #[arg(long, value_enum, default_value = "l1")]
        distance: Distance,
        #[arg(long, value_enum, default_value = "auto")]
        eigen: Eigen,
    },
    /// Finite-difference check of every primitive, block and a tiny model.
    GradCheck {
        /// Skip the full-model check.
        #[arg(long)]
        skip_model: bool,
        /// Scale every temperature adjoint by this factor (negative control).
        #[arg(long, hide = true)]
        inject_gate_fault: Option<f64>,
    },
    /// Gate strength between a reference pixel and every pixel (heatmap.pgm, heatmap.csv).
    Heatmap {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        row: usize,
        #[arg(long)]
        col: usize,
        #[arg(long, default_value_t = INITIAL_TEMPERATURE)]
        temperature: f64,
    },
    /// Shift counts and aggregation wall time per grid size (bench.csv).
    Bench {
        #[arg(long, value_delimiter = ',', default_values_t = [8, 16, 32, 64])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    let seed = cli.seed.unwrap_or(0);
    let out = cli.out_dir.as_path();
    if cli.config.is_some() && !matches!(cli.command, Command::Train) {
        bail!("--config is only read by train");
    }
    match cli.command {
        Command::Generate {
            samples,
            classes,
            channels,
            h,
            w,
        } => {
            let args = GenerateArgs {
                seed,
                samples,
                classes,
                channels,
                h,
                w,
            };
            commands::generate(out, &args)?;
            println!("wrote {samples} samples to {}", out.display());
        }
        Command::Train => {
            let cfg = match &cli.config {
                Some(path) => RunConfig::load(path)?,
                None => RunConfig::default(),
            }
            .with_seed(cli.seed);
            let result = commands::train_run(out, &cfg)?;
            let r = &result.report;
            for log in &r.logs {
                println!("step {:>4}  loss {:.5}  acc {:.3}", log.step, log.loss, log.accuracy);
            }
            println!(
                "loss {:.5} -> {:.5}, accuracy {:.3}; outputs in {}",
                r.initial_loss,
                r.final_loss,
                r.final_accuracy,
                out.display()
            );
        }
        Command::AnalyzeGraph {
            mode,
            sizes,
            k,
            tau,
            knn,
            input,
            sample,
            temperature,
            gate,
            distance,
            eigen,
        } => {
            let args = GraphArgs {
                mode: match mode {
                    Mode::Scaffold => GraphMode::Scaffold,
                    Mode::Gated => GraphMode::Gated,
                    Mode::Knn => GraphMode::Knn,
                },
                sizes: sizes.iter().map(|&s| (s, s)).collect(),
                ks: k,
                taus: tau,
                knns: knn,
                input,
                sample,
                agc: AgcConfig {
                    k: 1,
                    gate: match gate {
                        Gate::Exp => GateKind::ExpDecay,
                        Gate::Sigmoid => GateKind::Sigmoid,
                    },
                    distance: match distance {
                        Distance::L1 => DistanceKind::L1,
                        Distance::L2 => DistanceKind::L2,
                    },
                },
                temperature,
                method: match eigen {
                    Eigen::Auto => EigenMethod::Auto,
                    Eigen::Dense => EigenMethod::Dense,
                    Eigen::Iterative => EigenMethod::Iterative,
                },
            };
            for row in commands::analyze_graph(out, &args)? {
                println!(
                    "{} {}x{} k={} tau={} C={:.6} S={:.6}",
                    row.method,
                    row.h,
                    row.w,
                    row.k_or_knn,
                    row.tau.map_or("-".into(), |t| t.to_string()),
                    row.clustering,
                    row.spectral_gap
                );
            }
        }
        Command::GradCheck {
            skip_model,
            inject_gate_fault,
        } => {
            let report = commands::grad_check(
                out,
                SuiteOptions {
                    seed,
                    gate_fault: inject_gate_fault,
                    skip_model,
                },
            )?;
            for c in &report.components {
                let status = if c.passed() { "ok" } else { "FAIL" };
                println!(
                    "{status:<4} {:<26} {:>10.3e}  tol {:.0e}  coords {:>5}  kinks {}",
                    c.name, c.max_relative_error, c.tolerance, c.coordinates, c.kinks
                );
            }
            if !report.passed() {
                eprintln!("gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Heatmap {
            input,
            sample,
            row,
            col,
            temperature,
        } => {
            let map = commands::heatmap(
                out,
                &HeatmapArgs {
                    input,
                    sample,
                    row,
                    col,
                    temperature,
                },
            )?;
            println!("{}x{} heatmap written to {}", map.h, map.w, out.display());
        }
        Command::Bench {
            sizes,
            channels,
            repeats,
        } => {
            for r in commands::bench(out, seed, &sizes, channels, repeats)? {
                println!("{}x{}  shifts {:>2}  {:.6}s", r.h, r.w, r.shift_count, r.wall_time);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
