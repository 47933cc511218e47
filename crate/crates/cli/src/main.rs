use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use neuralfly::bench::{run_pipeline, ExperimentConfig};
use neuralfly::daiml::{adaptation_loss, train};
use neuralfly::data::{load_dataset, save_dataset};
use neuralfly::traj::Trajectory;
use neuralfly::Mlp;

/// Quadrotor wind-disturbance pipeline: data collection, basis training and
/// the controller benchmark.
#[derive(Parser)]
#[command(name = "neuralfly", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fly the training and validation data-collection flights.
    Collect {
        /// Experiment config file, or `default`.
        #[arg(long, default_value = "default")]
        config: String,
        /// Writes `train/` and `validation/` dataset directories here.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the basis network on collected data.
    Train {
        /// Directory written by `collect`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "default")]
        config: String,
        /// Checkpoint path; the training log goes next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-condition adaptation loss of a checkpoint on a dataset.
    Eval {
        /// A dataset directory (e.g. `<collect-out>/validation`).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "default")]
        config: String,
    },
    /// Run the controller benchmark, training a basis first unless the config
    /// names a checkpoint.
    Bench {
        #[arg(long, default_value = "default")]
        config: String,
        /// Overrides the output directory of the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the checkpoint of the config.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Exit nonzero when a trend check fails.
        #[arg(long)]
        check: bool,
    },
    /// Trajectory utilities.
    Traj {
        #[command(subcommand)]
        command: TrajCommand,
    },
    /// Print the default experiment config as TOML.
    DefaultConfig,
}

#[derive(Subcommand)]
enum TrajCommand {
    /// Sample the benchmark figure-8 at the control rate as CSV.
    Dump {
        #[arg(long, default_value = "default")]
        config: String,
        /// Seconds to sample; one period by default.
        #[arg(long)]
        duration: Option<f64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(spec: &str) -> Result<ExperimentConfig> {
    if spec == "default" {
        return Ok(ExperimentConfig::default());
    }
    Ok(ExperimentConfig::load(Path::new(spec))?)
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

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Collect { config, out } => {
            let cfg = load_config(&config)?;
            let (train, val) = cfg.collect_datasets()?;
            save_dataset(&train, &out.join("train"))?;
            save_dataset(&val, &out.join("validation"))?;
            println!(
                "{} training and {} validation samples written to {}",
                train.len(),
                val.len(),
                out.display()
            );
        }
        Command::Train { data, config, out } => {
            let cfg = load_config(&config)?;
            let train_ds = load_dataset(&data.join("train")).context("loading training data")?;
            let val_ds = load_dataset(&data.join("validation")).context("loading validation data")?;
            let model = train(&train_ds, &val_ds, &cfg.training.daiml)?;
            if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            model.phi.save(&out)?;
            let log_path = out.with_file_name("training_log.csv");
            model.log.save(&log_path)?;
            if let (Some(first), Some(last)) = (model.log.first(), model.log.last()) {
                println!(
                    "validation f-loss {:.5} -> {:.5} over {} epochs; checkpoint {}",
                    first.val_f_loss,
                    last.val_f_loss,
                    last.epoch,
                    out.display()
                );
            }
        }
        Command::Eval {
            data,
            checkpoint,
            config,
        } => {
            let cfg = load_config(&config)?;
            let ds = load_dataset(&data)?;
            let phi = Mlp::load(&checkpoint)?;
            let losses = adaptation_loss(&phi, &ds, cfg.training.daiml.damping, cfg.training.daiml.gamma)?;
            println!("condition,f_loss");
            for (k, l) in losses.iter().enumerate() {
                println!("{k},{l}");
            }
        }
        Command::Bench {
            config,
            out,
            checkpoint,
            check,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(out) = out {
                cfg.output.dir = out;
            }
            if checkpoint.is_some() {
                cfg.output.checkpoint = checkpoint;
            }
            let result = run_pipeline(&cfg)?;
            print!("{}", std::fs::read_to_string(&result.report_txt)?);
            if check && result.checks_failed() {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Traj {
            command: TrajCommand::Dump { config, duration, out },
        } => {
            let cfg = load_config(&config)?;
            let duration = duration.unwrap_or(cfg.trajectory.period);
            if duration.is_nan() || duration < 0.0 {
                bail!("duration must be non-negative");
            }
            let dt = cfg.control_dt();
            let n = (duration / dt).round() as usize;
            let mut w: Box<dyn Write> = match &out {
                Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p)?)),
                None => Box::new(std::io::stdout().lock()),
            };
            writeln!(w, "t,x,y,z,vx,vy,vz,ax,ay,az")?;
            for i in 0..=n {
                let t = i as f64 * dt;
                let d = cfg.trajectory.desired(t);
                let cols: Vec<String> = std::iter::once(t)
                    .chain(d.pos_d.iter().copied())
                    .chain(d.vel_d.iter().copied())
                    .chain(d.acc_d.iter().copied())
                    .map(|v| v.to_string())
                    .collect();
                writeln!(w, "{}", cols.join(","))?;
            }
            w.flush()?;
        }
        Command::DefaultConfig => print!("{}", ExperimentConfig::default().to_toml()),
    }
    Ok(ExitCode::SUCCESS)
}
