use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cda_core::evaluation::accuracy;
use cda_core::experiment::{self, ExperimentConfig};
use cda_core::protocols::{generate_synthetic, SyntheticSpec};
use cda_core::{gradcheck, io};

#[derive(Parser)]
#[command(name = "cda", version, about = "Collaborative distribution alignment experiments")]
struct Cli {
    /// Only print warnings and results.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config, or a manifest from an earlier run.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's repeat count.
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// Run repeats one after another instead of concurrently.
    #[arg(long)]
    serial: bool,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)
            .with_context(|| format!("loading config {}", self.config.display()))?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(r) = self.repeats {
            config.repeats = r;
        }
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run NA and CDA over repeated splits and write a manifest plus per-sample results.
    Run(RunArgs),
    /// Write a synthetic weakly labeled feature file and its ground truth.
    Synth {
        /// Synthetic spec as JSON; the default spec when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Truth file; defaults to `<out stem>.truth.csv` next to the output.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a predictions file against a truth file.
    Eval { predictions: PathBuf, truth: PathBuf },
    /// Full objective against each single-term removal.
    Ablate(RunArgs),
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 6)]
        d: usize,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        instances: usize,
    },
}

fn run(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let output = experiment::run_experiment(&config, !args.serial)?;
    experiment::save_results(&output, &args.out_dir)
        .with_context(|| format!("writing results to {}", args.out_dir.display()))?;
    print!("{}", experiment::format_summary(&output.manifest));
    log::info!("results written to {}", args.out_dir.display());
    Ok(())
}

fn ablate(args: &RunArgs) -> Result<()> {
    let config = args.config()?;
    let table = experiment::run_ablation(&config, !args.serial)?;
    let path = args.out_dir.join("ablation.json");
    io::write_json(&path, &table)?;
    print!("{}", table.format());
    log::info!("ablation written to {}", path.display());
    Ok(())
}

fn default_truth_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().map_or("features".into(), |s| s.to_string_lossy());
    out.with_file_name(format!("{stem}.truth.csv"))
}

fn synth(spec: Option<&Path>, out: &Path, truth: Option<&Path>, seed: u64) -> Result<()> {
    let spec: SyntheticSpec = match spec {
        Some(p) => io::read_json(p)?,
        None => SyntheticSpec::default(),
    };
    let split = generate_synthetic(&spec, seed)?;
    io::write_features(out, &split.a, &split.b)?;
    let truth_path = truth.map_or_else(|| default_truth_path(out), Path::to_path_buf);
    io::write_truth(&truth_path, &split.a, &split.b, &split.truth)?;
    println!(
        "wrote {} samples to {} and truth to {}",
        split.a.len() + split.b.len(),
        out.display(),
        truth_path.display()
    );
    Ok(())
}

fn eval(predictions: &Path, truth: &Path) -> Result<()> {
    let truth_rows = io::read_truth(truth)?;
    let mut lookup = BTreeMap::new();
    for (dom, id, key) in truth_rows {
        lookup.insert((dom, id), key);
    }
    let preds = io::read_predictions(predictions)?;
    if preds.is_empty() {
        bail!("{} holds no predictions", predictions.display());
    }
    let mut predicted = Vec::with_capacity(preds.len());
    let mut expected = Vec::with_capacity(preds.len());
    for (dom, id, key) in preds {
        let t = lookup
            .get(&(dom, id.clone()))
            .with_context(|| format!("no truth for sample {id} of domain {dom}"))?;
        predicted.push(key);
        expected.push(*t);
    }
    let acc = accuracy(&predicted, &expected)?;
    println!("accuracy {:.4} over {} samples", acc, expected.len());
    Ok(())
}

fn gradcheck_cmd(d: usize, n: usize, seed: u64, instances: usize) -> Result<bool> {
    let report = gradcheck::run(d, n, seed, instances)?;
    for e in &report.errors {
        println!("{:<8}{:>12.3e}", e.term, e.max_relative_error);
    }
    println!("{}", if report.passed { "PASS" } else { "FAIL" });
    Ok(report.passed)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match &cli.command {
        Command::Run(args) => run(args).map(|_| true),
        Command::Ablate(args) => ablate(args).map(|_| true),
        Command::Synth {
            spec,
            out,
            truth,
            seed,
        } => synth(spec.as_deref(), out, truth.as_deref(), *seed).map(|_| true),
        Command::Eval { predictions, truth } => eval(predictions, truth).map(|_| true),
        Command::Gradcheck {
            d,
            n,
            seed,
            instances,
        } => gradcheck_cmd(*d, *n, *seed, *instances),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
