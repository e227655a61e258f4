//! Experiment harness CLI.
//!
//! `hypercl run` trains a (model, scenario, dataset) cell across seeds and
//! writes per-seed artifacts plus an aggregate summary. `hypercl report`
//! rebuilds the summary from existing run directories.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use hypercl::experiment::{report, run_experiment};
use hypercl::parse_config;

#[derive(Parser)]
#[command(name = "hypercl", version, about = "Continual learning with chunked hypernetworks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one experiment cell across seeds.
    Run(RunArgs),
    /// Rebuild summary.csv from per-seed run directories.
    Report {
        /// Directory holding seed_* run directories.
        #[arg(long = "in")]
        in_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file; flags below override its entries.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Model: hnet, hnet_iwr, lstm_net, lstm_net_iwr, lstm_net_grow.
    #[arg(long)]
    model: Option<String>,

    /// Scenario: cl1, cl2, cl3.
    #[arg(long)]
    scenario: Option<String>,

    /// Dataset: split_mnist, permuted_mnist, synth.
    #[arg(long)]
    dataset: Option<String>,

    /// Regularization strength.
    #[arg(long)]
    beta: Option<f64>,

    /// Comma-separated seed list, e.g. 1,2,3.
    #[arg(long)]
    seeds: Option<String>,

    /// Training epochs per task.
    #[arg(long)]
    epochs: Option<usize>,

    /// Generated-parameter chunk size.
    #[arg(long)]
    chunk_size: Option<usize>,

    /// Dataset directory (IDX files); also settable via HYPERCL_DATA_DIR.
    #[arg(long)]
    data_dir: Option<PathBuf>,

    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Extra key=value config overrides (repeatable, highest precedence).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn overrides(&self) -> hypercl::Result<Vec<(String, String)>> {
        let mut kv = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.push((k.to_string(), v));
            }
        };
        push("model", self.model.clone());
        push("scenario", self.scenario.clone());
        push("dataset", self.dataset.clone());
        push("beta", self.beta.map(|v| v.to_string()));
        push("seeds", self.seeds.clone());
        push("epochs", self.epochs.map(|v| v.to_string()));
        push("chunk_size", self.chunk_size.map(|v| v.to_string()));
        push("data_dir", self.data_dir.as_ref().map(|p| p.display().to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        for pair in &self.set {
            let (k, v) = pair.split_once('=').ok_or_else(|| {
                hypercl::Error::config(format!("--set '{pair}': expected key=value"))
            })?;
            kv.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(kv)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Report { in_dir } => report(&in_dir).map(|text| print!("{text}")),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(args: RunArgs) -> hypercl::Result<()> {
    let cfg = parse_config(args.config.as_deref(), &args.overrides()?)?;
    let results = run_experiment(&cfg)?;
    for r in &results {
        println!(
            "seed {}: avg_accuracy {:.4}, avg_forgetting {:.4}, compression {:.4}",
            r.seed, r.avg_accuracy, r.avg_forgetting, r.compression_ratio
        );
    }
    println!("wrote {}", cfg.out_dir.join("summary.csv").display());
    Ok(())
}
