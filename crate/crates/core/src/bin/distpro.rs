use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use distpro::workflow::{self, Layout, RunConfig};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    GenData,
    Pretrain,
    Search,
    Retrain,
    Eval,
    ExportSchedule,
    CheckHypergrad,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::Search => "search",
            Command::Retrain => "retrain",
            Command::Eval => "eval",
            Command::ExportSchedule => "export-schedule",
            Command::CheckHypergrad => "check-hypergrad",
        }
    }
}

/// Distillation process search: data, teacher, search, retrain, evaluation.
#[derive(Debug, Parser)]
#[command(name = "distpro", version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run configuration (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override one key, e.g. `--set search.steps=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = (|| {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_overrides(&cli.sets)?;
        if let Some(seed) = cli.seed {
            cfg.set("seed", &seed.to_string())?;
        }
        Ok::<_, distpro::Error>(cfg)
    })();
    let result = cfg.and_then(|cfg| workflow::run(cli.command.name(), &cfg, &Layout::new(&cli.out)));
    match result {
        Ok(summary) => {
            for line in &summary.lines {
                println!("{line}");
            }
            if summary.ok {
                ExitCode::SUCCESS
            } else {
                eprintln!("error[check]: {} did not pass", cli.command.name());
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(2)
        }
    }
}
