//! Command-line front end: simulate data, fit a config, evaluate a saved
//! model, or sweep a parameter grid.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! breakdown.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spppot_core::{
    evaluate_checkpoint, load_points_csv, make_multiclass_blobs, run_experiment, run_sweep, simulate_toy,
    write_points_csv, Checkpoint, CsvOptions, DatasetConfig, Error, ExperimentConfig, Result, SweepConfig,
};

#[derive(Parser)]
#[command(name = "spppot", version, about = "Online kernel intensity estimation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a point set and write it as CSV to `<out>/points.csv`.
    Simulate {
        /// `toy` (Normal(0.5, 0.1) intensity on [0, 1]) or `blobs` (labeled).
        #[arg(long, default_value = "toy")]
        kind: String,
        /// Expected number of toy points.
        #[arg(long, default_value_t = 10211.0)]
        expected: f64,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one experiment config.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Min-max scale CSV coordinates to [0, 1].
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        record_every: Option<usize>,
    },
    /// Score a saved `model.json` on the config's test set or on `--data`.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// CSV of evaluation points; defaults to the config's test set.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        normalize: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write `evaluation.json` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a sweep config over a bounded worker pool.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        record_every: Option<usize>,
    },
}

fn apply_overrides(cfg: &mut ExperimentConfig, seed: Option<u64>, normalize: bool, record_every: Option<usize>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if normalize {
        if let DatasetConfig::Csv { normalize, .. } = &mut cfg.dataset {
            *normalize = true;
        }
    }
    if let Some(r) = record_every {
        cfg.record_every = r;
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn simulate(kind: &str, expected: f64, classes: usize, per_class: usize, seed: u64, out: &Path) -> Result<()> {
    let stream = match kind {
        "toy" => simulate_toy(expected, seed)?,
        "blobs" => make_multiclass_blobs(classes, per_class, 2, 4.0, seed)?,
        other => return Err(Error::config("kind", format!("unknown kind `{other}` (toy, blobs)"))),
    };
    std::fs::create_dir_all(out)?;
    let path = out.join("points.csv");
    write_points_csv(&path, &stream)?;
    eprintln!("wrote {} points to {}", stream.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            kind,
            expected,
            classes,
            per_class,
            seed,
            out,
        } => simulate(&kind, expected, classes, per_class, seed, &out),
        Command::Fit {
            config,
            seed,
            out,
            normalize,
            record_every,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            apply_overrides(&mut cfg, seed, normalize, record_every);
            cfg.validate()?;
            let output = run_experiment(&cfg)?;
            output.write(&out)?;
            for w in &output.summary.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&output.summary)
        }
        Command::Evaluate {
            config,
            model,
            data,
            normalize,
            seed,
            out,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            apply_overrides(&mut cfg, seed, normalize, None);
            let ckpt = Checkpoint::from_json(&std::fs::read_to_string(&model)?)?;
            let points = match &data {
                Some(p) => Some(load_points_csv(
                    p,
                    CsvOptions {
                        normalize,
                        labeled: !cfg.is_point_process(),
                    },
                )?),
                None => None,
            };
            let ev = evaluate_checkpoint(&cfg, &ckpt, points.as_ref())?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("evaluation.json"), serde_json::to_string_pretty(&ev)?)?;
            }
            print_json(&ev)
        }
        Command::Sweep {
            config,
            out,
            seed,
            record_every,
        } => {
            let mut sweep = SweepConfig::load(&config)?;
            apply_overrides(&mut sweep.base, seed, false, record_every);
            let results = run_sweep(&sweep, &out)?;
            let failed = results.iter().filter(|r| r.status != "ok").count();
            eprintln!(
                "{} runs, {} failed; index at {}",
                results.len(),
                failed,
                out.join("sweep.csv").display()
            );
            print_json(&results)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
