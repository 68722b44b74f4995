//! `droppeft` — run, sweep and inspect federated fine-tuning simulations.

mod report;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use droppeft_core::config::ExperimentConfig;
use droppeft_core::configurator::Arm;
use droppeft_core::federation::{read_metrics_csv, run_experiment, ExperimentResult};
use droppeft_core::model::{Batch, ModelConfig, TrainScope, TransformerStack};
use droppeft_core::stld::{LayerMask, RateDistribution};
use droppeft_core::tensor::{BackwardFault, GradCheckOptions};
use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Environment variable consulted when neither `--seed` nor the config
/// sets a seed.
const SEED_ENV: &str = "DROPPEFT_SEED";

/// Gradient check threshold on the maximum relative error.
const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Parser)]
#[command(name = "droppeft", version, about = "Federated PEFT simulator with stochastic layer dropout")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, summary.json and config.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed and DROPPEFT_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite existing outputs.
        #[arg(long)]
        force: bool,
    },
    /// Run the cross-product of the config's `sweep` grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Finite-difference check of the default model's gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Coordinates sampled for the check.
        #[arg(long, default_value_t = 400)]
        coords: usize,
        /// Test fixture: corrupt the matmul backward pass.
        #[arg(long, hide = true)]
        inject_fault: bool,
    },
    /// Summarize a metrics CSV and write a downsampled plot table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        target: f64,
        /// Plot table path; defaults to `<input stem>_plot.csv` beside the input.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[arg(long, default_value_t = 50)]
        points: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            force,
        } => cmd_run(&config, &out, seed, force),
        Command::Sweep {
            config,
            out,
            seed,
            force,
        } => cmd_sweep(&config, &out, seed, force),
        Command::Gradcheck {
            seed,
            coords,
            inject_fault,
        } => cmd_gradcheck(seed, coords, inject_fault),
        Command::Report {
            input,
            target,
            plot,
            points,
        } => cmd_report(&input, target, plot, points),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(v.trim().parse().with_context(|| format!("{SEED_ENV}={v:?} is not a u64"))?)),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let config = ExperimentConfig::from_path(path).with_context(|| format!("invalid config {}", path.display()))?;
    let seed = config.resolve_seed(seed, env_seed()?);
    Ok(config.effective(seed))
}

/// Creates `dir`, refusing to reuse a non-empty directory unless `force`.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let occupied = fs::read_dir(dir)
            .with_context(|| format!("cannot read {}", dir.display()))?
            .next()
            .is_some();
        if occupied && !force {
            bail!("output directory {} is not empty (pass --force to overwrite)", dir.display());
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_outputs(dir: &Path, result: &ExperimentResult) -> Result<()> {
    fs::write(dir.join("metrics.csv"), result.metrics_csv()?)?;
    write_json(&dir.join("summary.json"), &result.summary)?;
    write_json(&dir.join("config.json"), &result.config)?;
    let mut sharing = csv::Writer::from_path(dir.join("sharing.csv"))?;
    sharing.write_record(["round", "device", "shared_layers", "accuracy", "reward", "round_s"])?;
    for m in &result.rounds {
        for i in 0..m.participants.len() {
            sharing.write_record([
                m.row.round.to_string(),
                m.participants[i].to_string(),
                m.shared_layers[i].to_string(),
                m.accuracies[i].to_string(),
                m.rewards[i].to_string(),
                m.round_seconds[i].to_string(),
            ])?;
        }
    }
    sharing.flush()?;
    Ok(())
}

fn cmd_run(config: &Path, out: &Path, seed: Option<u64>, force: bool) -> Result<ExitCode> {
    let config = load_config(config, seed)?;
    prepare_out(out, force)?;
    let result = run_experiment(&config)?;
    write_outputs(out, &result)?;
    let s = &result.summary;
    println!(
        "{} rounds, final accuracy {:.4}, time to accuracy {}",
        s.rounds,
        s.final_accuracy,
        s.time_to_accuracy_s
            .map_or_else(|| "not reached".to_string(), |t| format!("{t:.3} s"))
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Clone, Debug, Serialize)]
struct GridPoint {
    distribution: Option<RateDistribution>,
    avg_rate: Option<f64>,
    alpha: f64,
}

impl GridPoint {
    fn label(&self, index: usize) -> String {
        let mut s = format!("{index:03}");
        if let Some(d) = self.distribution {
            s.push_str(&format!("_{d}"));
        }
        if let Some(r) = self.avg_rate {
            s.push_str(&format!("_r{r:.1}"));
        }
        s.push_str(&format!("_a{}", self.alpha));
        s
    }
}

fn grid_points(config: &ExperimentConfig) -> Result<Vec<GridPoint>> {
    let Some(grid) = &config.sweep else {
        bail!("config has no `sweep` section");
    };
    if grid.avg_rate.is_empty() && grid.distribution.is_empty() && grid.alpha.is_empty() {
        bail!("sweep grid is empty");
    }
    let rates: Vec<Option<f64>> = if grid.avg_rate.is_empty() {
        vec![None]
    } else {
        grid.avg_rate.iter().map(|&r| Some(r)).collect()
    };
    let dists: Vec<Option<RateDistribution>> = if grid.distribution.is_empty() {
        vec![None]
    } else {
        grid.distribution.iter().map(|&d| Some(d)).collect()
    };
    let alphas = if grid.alpha.is_empty() {
        vec![config.partition.alpha]
    } else {
        grid.alpha.clone()
    };
    let mut points = Vec::new();
    for &distribution in &dists {
        for &avg_rate in &rates {
            for &alpha in &alphas {
                points.push(GridPoint {
                    distribution,
                    avg_rate,
                    alpha,
                });
            }
        }
    }
    Ok(points)
}

fn apply_point(base: &ExperimentConfig, p: &GridPoint) -> Result<ExperimentConfig> {
    let mut c = base.clone();
    c.sweep = None;
    c.partition.alpha = p.alpha;
    if p.distribution.is_some() || p.avg_rate.is_some() {
        let fallback = c.stld.fixed;
        let distribution = p
            .distribution
            .or(fallback.map(|a| a.distribution()))
            .unwrap_or(RateDistribution::Uniform);
        let rate = p.avg_rate.or(fallback.map(|a| a.avg_rate())).unwrap_or(0.5);
        c.stld.enabled = true;
        c.stld.fixed = Some(Arm::new(distribution, rate)?);
    }
    c.validate()?;
    Ok(c)
}

#[derive(Serialize)]
struct SweepRow {
    point: String,
    distribution: String,
    avg_rate: String,
    alpha: f64,
    rounds: usize,
    final_accuracy: f64,
    time_to_accuracy_s: String,
    wall_clock_s: f64,
    total_flops: u64,
    total_layer_flops: u64,
    total_traffic_bytes: u64,
    total_energy_j: f64,
    peak_mem_bytes: u64,
}

fn cmd_sweep(config: &Path, out: &Path, seed: Option<u64>, force: bool) -> Result<ExitCode> {
    let base = load_config(config, seed)?;
    let points = grid_points(&base)?;
    let configs: Vec<ExperimentConfig> = points.iter().map(|p| apply_point(&base, p)).collect::<Result<_>>()?;
    prepare_out(out, force)?;
    write_json(&out.join("config.json"), &base)?;
    let mut combined = csv::Writer::from_path(out.join("combined.csv"))?;
    for (i, (p, c)) in points.iter().zip(&configs).enumerate() {
        let label = p.label(i);
        info!("sweep point {label}");
        let dir = out.join(&label);
        fs::create_dir_all(&dir)?;
        let result = run_experiment(c)?;
        write_outputs(&dir, &result)?;
        let s = &result.summary;
        let arm = c.stld.fixed;
        combined.serialize(SweepRow {
            point: label,
            distribution: arm.map_or_else(|| "-".into(), |a| a.distribution().to_string()),
            avg_rate: arm.map_or_else(|| "-".into(), |a| format!("{:.1}", a.avg_rate())),
            alpha: p.alpha,
            rounds: s.rounds,
            final_accuracy: s.final_accuracy,
            time_to_accuracy_s: s.time_to_accuracy_s.map_or_else(|| "not reached".into(), |t| t.to_string()),
            wall_clock_s: s.wall_clock_s,
            total_flops: s.total_flops,
            total_layer_flops: s.total_layer_flops,
            total_traffic_bytes: s.total_traffic_bytes,
            total_energy_j: s.total_energy_j,
            peak_mem_bytes: s.peak_mem_bytes,
        })?;
        combined.flush()?;
    }
    println!("{} grid points written to {}", points.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gradcheck(seed: u64, coords: usize, inject_fault: bool) -> Result<ExitCode> {
    let config = ModelConfig::default();
    let mut model = TransformerStack::new(config.clone(), seed)?;
    // nonzero adapters and head so every path carries gradient
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for l in 0..config.layers {
        let values: Vec<f64> = (0..config.peft_layer_params())
            .map(|_| rng.random_range(-0.2..0.2))
            .collect();
        model.set_adapter_flat(l, &values)?;
    }
    let head: Vec<f64> = (0..config.head_params()).map(|_| rng.random_range(-0.5..0.5)).collect();
    model.set_head_flat(&head)?;
    let b = 2;
    let batch = Batch {
        tokens: (0..b * config.seq_len).map(|_| rng.random_range(0..config.vocab)).collect(),
        labels: (0..b).map(|_| rng.random_range(0..config.classes)).collect(),
    };
    let opts = GradCheckOptions {
        coords,
        seed,
        ..GradCheckOptions::default()
    };
    let fault = inject_fault.then_some(BackwardFault::FlipMatMulSign);
    let mut worst = None;
    for scope in [TrainScope::Full, TrainScope::Adapters] {
        let r = model.grad_check(&batch, &LayerMask::all_active(config.layers), scope, &opts, fault)?;
        println!(
            "{scope:?}: max relative error {:.3e} at coordinate {} (analytic {:.6e}, numeric {:.6e}) over {} coordinates ({} skipped at relu kinks)",
            r.max_rel_error, r.worst_index, r.worst_analytic, r.worst_numeric, r.coords_checked, r.kinks_skipped
        );
        worst = Some(worst.map_or(r.max_rel_error, |w: f64| w.max(r.max_rel_error)));
    }
    let worst = worst.unwrap_or(0.0);
    if worst < GRADCHECK_TOLERANCE {
        println!("PASS: max relative error {worst:.3e} < {GRADCHECK_TOLERANCE:e}");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL: max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:e}");
        Ok(ExitCode::FAILURE)
    }
}

fn cmd_report(input: &Path, target: f64, plot: Option<PathBuf>, points: usize) -> Result<ExitCode> {
    let file = fs::File::open(input).with_context(|| format!("cannot open {}", input.display()))?;
    let rows = read_metrics_csv(file).with_context(|| format!("malformed metrics CSV {}", input.display()))?;
    print!("{}", report::summarize(&rows, target));
    let plot = plot.unwrap_or_else(|| {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("metrics");
        input.with_file_name(format!("{stem}_plot.csv"))
    });
    let mut w = csv::Writer::from_path(&plot).with_context(|| format!("cannot write {}", plot.display()))?;
    w.write_record(["round", "wall_clock_s", "mean_acc"])?;
    for r in report::downsample(&rows, points) {
        w.write_record([r.round.to_string(), r.wall_clock_s.to_string(), r.mean_acc.to_string()])?;
    }
    w.flush()?;
    std::io::stdout().flush()?;
    Ok(ExitCode::SUCCESS)
}
