use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, ValueEnum};

use statflow::config::{Overrides, RunConfig};
use statflow::distill::Method;
use statflow::evaluate::Strategy;
use statflow::flows::WMode;
use statflow::pipeline::{run_pipeline, Command};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Cmd {
    Stats,
    Distill,
    Eval,
    Baseline,
    Theory,
    Viz,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Stats => Command::Stats,
            Cmd::Distill => Command::Distill,
            Cmd::Eval => Command::Eval,
            Cmd::Baseline => Command::Baseline,
            Cmd::Theory => Command::Theory,
            Cmd::Viz => Command::Viz,
        }
    }
}

/// Dataset distillation by statistical flow matching.
#[derive(Debug, Parser)]
#[command(version, about)]
struct Cli {
    command: Cmd,
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// sfm, tcdd, ncdd or lgm.
    #[arg(long)]
    method: Option<Method>,
    /// vanilla, ci, jt or st.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Soft-label weight in [0, 1].
    #[arg(long)]
    alpha: Option<f64>,
    /// random, fixed or analytic.
    #[arg(long = "w-mode")]
    w_mode: Option<WMode>,
    /// Sets both encoders: a builtin name or a tensor file.
    #[arg(long)]
    encoder: Option<String>,
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: cli.seed,
        out: cli.out,
        method: cli.method,
        strategy: cli.strategy,
        alpha: cli.alpha,
        w_mode: cli.w_mode,
        encoder: cli.encoder,
    });
    let outcome = run_pipeline(cli.command.into(), &cfg)?;
    println!("{}", outcome.summary.trim_end());
    for a in &outcome.artifacts {
        log::info!("wrote {}", a.display());
    }
    Ok(outcome.passed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
