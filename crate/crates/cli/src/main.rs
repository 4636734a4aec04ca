use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use stsc::commands::{self, EvalSplit};
use stsc::config::RunConfig;
use stsc::formats;

#[derive(Parser)]
#[command(name = "stsc", version, about = "Teacher-student relation-consistency trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file; defaults apply for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory (or file, for gen-data).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed for data, split, initialization and perturbations.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        if let Some(s) = self.seed {
            cfg = cfg.with_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write logs, dumps and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Score a checkpoint on a split of the configured dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint stem or its `.bin` / `.manifest` file.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: EvalSplit,
    },
    /// Train all eight loss-term combinations over `seeds` seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients of every loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, hide = true)]
        corrupt_adjoint: bool,
    },
    /// Render an epoch's relation snapshots as PGM images.
    Heatmap { run_dir: PathBuf, epoch: usize },
    /// Write the configured dataset to a CSV file.
    GenData {
        #[command(flatten)]
        common: Common,
    },
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { common, quiet } => {
            let cfg = common.config()?;
            let out = commands::train(&cfg, &cfg.out, !quiet)?;
            if let Some(b) = &out.fit.best {
                println!("best epoch {} (val auc {:.4})", b.epoch, b.val.auc);
            }
            print!("test\n{}", formats::report_text(&out.test));
            println!("wrote {}", cfg.out.display());
        }
        Command::Eval { common, checkpoint, split } => {
            let cfg = common.config()?;
            let report = commands::eval(&cfg, &checkpoint, split)?;
            print!("{}", formats::report_text(&report));
            if common.out.is_some() {
                let text = format!("{}\n{}\n", formats::REPORT_HEADER, formats::report_row(&report));
                formats::write_text(&cfg.out.join("eval.csv"), &text)?;
            }
        }
        Command::Ablate { common } => {
            let cfg = common.config()?;
            let rows = commands::ablate(&cfg, &cfg.out)?;
            print!("{}", commands::ablation_csv(&rows));
        }
        Command::Gradcheck { seed, instances, corrupt_adjoint } => {
            let (checks, ok) = commands::gradcheck(seed, instances, corrupt_adjoint)?;
            for c in &checks {
                println!("{}", commands::gradcheck_line(c));
            }
            if !ok {
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Heatmap { run_dir, epoch } => {
            for p in commands::heatmap(&run_dir, epoch)? {
                println!("{}", p.display());
            }
        }
        Command::GenData { common } => {
            let cfg = common.config()?;
            let path = common.out.clone().unwrap_or_else(|| PathBuf::from("data.csv"));
            let data = commands::gen_data(&cfg, &path)?;
            println!("wrote {} samples to {}", data.len(), path.display());
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
