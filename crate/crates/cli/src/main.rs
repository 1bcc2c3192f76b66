//! `ssmd`: train, sample, score and sweep self-speculative masked diffusion
//! models.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

mod commands;
mod config;
mod io;
mod model;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::Config;

/// A problem with the command line or configuration (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "ssmd", version, about = "Self-speculative masked diffusion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Args)]
pub struct Common {
    /// TOML config file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set window.dtau=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,

    /// Shorthand for `--set paths.out_dir=DIR`.
    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// Worker threads for sampling.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a hybrid model; writes a checkpoint and loss.csv.
    Train(TrainArgs),
    /// Draw sequences; writes samples.txt and sample_metrics.csv.
    Sample(SampleArgs),
    /// Exact sample likelihoods of sequences; writes likelihood.csv.
    Likelihood(LikelihoodArgs),
    /// NFE/quality tradeoff sweep; writes tradeoff.csv, curves.csv, matched.csv.
    Sweep(SweepArgs),
    /// Run a quick invariant suite.
    Selftest(SelftestArgs),
    /// Generate a lexicon language and corpus; writes lexicon.txt and corpus.txt.
    Corpus(CorpusArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Continue from a checkpoint written by `train`.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this step (the learning-rate schedule still spans `train.steps`).
    #[arg(long)]
    pub until: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    /// `mdm`, `spec` or `spec-basic`.
    #[arg(long)]
    pub family: Option<String>,
    #[arg(long)]
    pub n: Option<usize>,
    /// `cosine:<dtau>`, `linear` or `constant:<cap>` (`constant:D` for the full length).
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long, alias = "inner_loops")]
    pub inner_loops: Option<usize>,
    #[arg(long, alias = "grid_steps")]
    pub grid_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LikelihoodArgs {
    #[command(flatten)]
    pub common: Common,
    /// One sequence per line, space-separated token ids.
    #[arg(long)]
    pub sequences: PathBuf,
    /// Enumerate all orderings: `logp` is then `log p(x)` and `elbo` exact.
    #[arg(long, alias = "exact_orderings")]
    pub exact_orderings: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// TOML sweep description.
    #[arg(long)]
    pub sweep: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelftestArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = ssmd_core::train::DEFAULT_LEXICON_SIZE)]
    pub lexicon_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub sequences: usize,
}

fn window_overrides(w: &str) -> Result<Vec<String>, UsageError> {
    let w = w.replace(":D", ":0");
    if w == "constant:0" {
        return Ok(vec!["window.kind=constant".into(), "window.cap=0".into()]);
    }
    let spec = ssmd_core::schedule::WindowSpec::parse(&w).map_err(|e| UsageError(e.to_string()))?;
    let mut out = vec![format!("window.kind={}", spec.kind_name())];
    match spec {
        ssmd_core::schedule::WindowSpec::Cosine { dtau } => out.push(format!("window.dtau={dtau:?}")),
        ssmd_core::schedule::WindowSpec::Constant { cap } => out.push(format!("window.cap={cap}")),
        ssmd_core::schedule::WindowSpec::Linear => {}
    }
    Ok(out)
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Self::Train(a) => &a.common,
            Self::Sample(a) => &a.common,
            Self::Likelihood(a) => &a.common,
            Self::Sweep(a) => &a.common,
            Self::Selftest(a) => &a.common,
            Self::Corpus(a) => &a.common,
        }
    }
}

fn overrides(cmd: &Command) -> Result<Vec<String>, UsageError> {
    let c = cmd.common();
    let mut o = c.set.clone();
    if let Some(s) = c.seed {
        o.push(format!("seed={s}"));
    }
    if let Some(d) = &c.out_dir {
        o.push(format!("paths.out_dir={}", toml::Value::String(d.display().to_string())));
    }
    if let Some(t) = c.threads {
        o.push(format!("sampler.threads={t}"));
    }
    if let Command::Sample(a) = cmd {
        if let Some(f) = &a.family {
            o.push(format!("sampler.family={}", toml::Value::String(f.clone())));
        }
        if let Some(n) = a.n {
            o.push(format!("sampler.n={n}"));
        }
        if let Some(w) = &a.window {
            o.extend(window_overrides(w)?);
        }
        if let Some(n) = a.inner_loops {
            o.push(format!("sampler.inner_loops={n}"));
        }
        if let Some(n) = a.grid_steps {
            o.push(format!("sampler.grid_steps={n}"));
        }
    }
    Ok(o)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = Config::load(cli.command.common().config.as_deref(), &overrides(&cli.command)?)?;
    match &cli.command {
        Command::Train(a) => commands::train(&cfg, a),
        Command::Sample(_) => commands::sample(&cfg),
        Command::Likelihood(a) => commands::likelihood(&cfg, a),
        Command::Sweep(a) => commands::sweep(&cfg, a),
        Command::Selftest(_) => commands::selftest(),
        Command::Corpus(a) => commands::corpus(&cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
