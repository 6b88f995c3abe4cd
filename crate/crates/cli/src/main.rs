use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use contembed_core::dataset::{make_synthetic, SyntheticSpec};
use contembed_core::runner::{
    ablation_rows, grad_check_suite, run_experiment_with_state, run_sweep, write_outputs, GradCheckConfig, RunConfig,
};

#[derive(Parser)]
#[command(name = "contembed", version, about = "Continual embedding training and gallery retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every session of one configuration and write metrics.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Ablation matrix averaged over seeds.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first_seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every loss term.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic dataset file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        classes: usize,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 100)]
        per_class: usize,
        #[arg(long, default_value_t = 0.3)]
        spread: f64,
        #[arg(long, default_value_t = 0.0)]
        drift: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(RunConfig::from_json(&text)?)
        }
        None => Ok(RunConfig::default()),
    }
}

fn execute(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if out.is_some() {
                cfg.output_dir = out;
            }
            let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
            let (report, state) = run_experiment_with_state(&cfg)?;
            write_outputs(&dir, &report, &state)?;
            println!(
                "{} {} seed {}: AR@1 {:.4} AR@2 {:.4} AR@4 {:.4} ({:.1}s) -> {}",
                report.setup,
                report.method,
                report.seed,
                report.average_recall[0],
                report.average_recall[1],
                report.average_recall[2],
                report.wall_seconds,
                dir.display()
            );
            Ok(true)
        }
        Command::Sweep { config, seeds, first_seed, out } => {
            let cfg = load_config(config.as_deref())?;
            let seeds: Vec<u64> = (first_seed..first_seed + seeds).collect();
            let report = run_sweep(&cfg, &ablation_rows(), &seeds)?;
            for r in &report.rows {
                println!("{:<16} AR@1 {:.4} AR@2 {:.4} AR@4 {:.4}", r.name, r.mean_ar_at_1, r.mean_ar_at_2, r.mean_ar_at_4);
            }
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("sweep.csv"), report.to_csv()?)?;
                fs::write(dir.join("sweep.json"), serde_json::to_string_pretty(&report)?)?;
            }
            Ok(true)
        }
        Command::Gradcheck { instances, seed } => {
            let report = grad_check_suite(&GradCheckConfig { instances, seed, ..Default::default() })?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(report.passed())
        }
        Command::Synth { out, classes, dim, per_class, spread, drift, seed } => {
            let spec = SyntheticSpec { num_classes: classes, dim, per_class, spread, drift, seed, ..Default::default() };
            let ds = make_synthetic(&spec)?;
            ds.save(&out)?;
            println!("{} items, {} classes, dim {} -> {}", ds.items.len(), ds.num_classes(), ds.dim, out.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            let kind = e.downcast_ref::<contembed_core::Error>().map(|c| c.kind()).unwrap_or("io");
            let record = serde_json::json!({ "error": kind, "message": format!("{e:#}") });
            eprintln!("{record}");
            ExitCode::from(2)
        }
    }
}
