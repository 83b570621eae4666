//! Operator surface over the cosal library: train, predict, evaluate,
//! synth, and gradcheck subcommands driven by one TOML config file.
//!
//! Every subcommand is deterministic given (config, seed, inputs) and exits
//! nonzero on any error-severity diagnostic.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cosal::data::io::{load_dataset, save_dataset};
use cosal::data::synth::synth_generate;
use cosal::network::Network;
use cosal::run::{self, RunConfig};
use cosal::{CosalError, Result};

#[derive(Parser)]
#[command(name = "cosal", version, about = "Within-image co-saliency detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the config's training set, writing checkpoints and a loss log.
    Train {
        /// TOML run config; defaults apply where absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the triplet sampling strategy: offline or online.
        #[arg(long)]
        mode: Option<String>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a saliency map PNG for every PNG in a directory.
    Predict {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a prediction directory against a ground-truth directory.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every backward pass against central finite differences.
    Gradcheck,
}

fn load_config(path: Option<&PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::from_toml_path(p),
        None => Ok(RunConfig::default()),
    }
}

fn cmd_train(
    config: Option<PathBuf>,
    seed: Option<u64>,
    mode: Option<String>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut config = load_config(config.as_ref())?;
    if let Some(s) = seed {
        config.seed = s;
    }
    if let Some(m) = mode {
        config.mode = Some(m.parse()?);
    }
    if let Some(o) = out {
        config.paths.out = o;
    }
    let report = load_dataset::<f32>(&config.paths.train_data)?;
    if !report.rejections.is_empty() {
        for r in &report.rejections {
            eprintln!("rejected: {r}");
        }
        return Err(CosalError::Dataset(format!(
            "{} invalid training samples under {}",
            report.rejections.len(),
            config.paths.train_data.display()
        )));
    }
    eprintln!(
        "training: {} samples, {} mode, {} iterations, out {}",
        report.samples.len(),
        config.mode(),
        config.optimizer.max_iterations,
        config.paths.out.display()
    );
    let out_dir = config.paths.out.clone();
    let summary = run::train(&config, &report.samples, &out_dir)?;
    if let Some(it) = summary.resumed_from {
        eprintln!("resumed from iteration {it}");
    }
    if let Some(last) = summary.log.last() {
        println!(
            "iteration {}: total {} (decoder {}, rpn {}, rfm {})",
            last.iteration, last.total, last.decoder, last.rpn, last.rfm
        );
    }
    println!("checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

fn cmd_predict(
    config: Option<PathBuf>,
    checkpoint: PathBuf,
    input: PathBuf,
    out: PathBuf,
) -> Result<()> {
    let config = load_config(config.as_ref())?;
    let net = Network::load(config.network_config::<f32>(), &checkpoint)?;
    let names = run::predict_dir(&net, &input, &out)?;
    println!("wrote {} saliency maps to {}", names.len(), out.display());
    Ok(())
}

fn cmd_evaluate(pred: PathBuf, gt: PathBuf, out: PathBuf) -> Result<()> {
    let report = run::evaluate_dirs(&pred, &gt)?;
    run::write_report(&report, &out)?;
    print!("{}", report.render_text());
    println!("report under {}", out.display());
    Ok(())
}

fn cmd_synth(count: usize, side: usize, seed: u64, out: PathBuf) -> Result<()> {
    let samples = synth_generate::<f32, _>(count, side, &mut ChaCha8Rng::seed_from_u64(seed))?;
    save_dataset(&out, &samples)?;
    println!("wrote {count} samples under {}", out.display());
    Ok(())
}

/// Prints one line per check; `false` when any failed.
fn cmd_gradcheck() -> Result<bool> {
    let entries = run::gradcheck_suite()?;
    let mut all_passed = true;
    for e in &entries {
        println!(
            "{} {:16} max rel err {:.3e} over {} checks (tol {:.0e})",
            if e.passed() { "PASS" } else { "FAIL" },
            e.name,
            e.max_rel_err,
            e.checked,
            e.tol
        );
        all_passed &= e.passed();
    }
    Ok(all_passed)
}

fn run_command(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train {
            config,
            seed,
            mode,
            out,
        } => cmd_train(config, seed, mode, out).map(|()| true),
        Command::Predict {
            config,
            checkpoint,
            input,
            out,
        } => cmd_predict(config, checkpoint, input, out).map(|()| true),
        Command::Evaluate { pred, gt, out } => cmd_evaluate(pred, gt, out).map(|()| true),
        Command::Synth {
            count,
            side,
            seed,
            out,
        } => cmd_synth(count, side, seed, out).map(|()| true),
        Command::Gradcheck => cmd_gradcheck(),
    }
}

fn main() -> ExitCode {
    match run_command(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
