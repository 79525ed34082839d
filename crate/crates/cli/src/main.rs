mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::config::{CliError, Settings};

/// Role/filler tensor-product models: data generation, training, transfer
/// and analysis.
#[derive(Debug, Parser)]
#[command(name = "tpr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate structured transfer tasks or heuristic probes.
    GenData(Common),
    /// Train one model on a train/dev pair.
    Train(Common),
    /// Run the seven-plan transfer matrix against from-scratch baselines.
    Transfer(Common),
    /// Accuracy of a checkpoint (or a fresh model) on a labeled file.
    Eval(Common),
    /// Tag/role histograms and heuristic-probe scores for a checkpoint.
    Analyze(Common),
    /// Finite-difference check of every parameter gradient.
    Gradcheck(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// `key=value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting (repeatable), applied after `--config`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    jobs: Option<String>,
    /// baseline | baseline+lstm | tpr-lstm | tpr-transformer
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    train: Option<String>,
    #[arg(long)]
    dev: Option<String>,
    #[arg(long)]
    source_train: Option<String>,
    #[arg(long)]
    source_dev: Option<String>,
    #[arg(long)]
    source_ckpt: Option<String>,
    #[arg(long)]
    ckpt: Option<String>,
    #[arg(long)]
    probes: Option<String>,
    #[arg(long)]
    transfer_backbone: bool,
    #[arg(long)]
    transfer_fillers: bool,
    #[arg(long)]
    transfer_roles: bool,
    #[arg(long)]
    d_sym: Option<String>,
    #[arg(long)]
    d_role: Option<String>,
    #[arg(long)]
    n_sym: Option<String>,
    #[arg(long)]
    n_role: Option<String>,
    #[arg(long)]
    temp: Option<String>,
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    scale_init: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    accum: Option<String>,
    /// gen-data: structured | probes
    #[arg(long)]
    task: Option<String>,
    /// gen-data: training examples per task, or probes per heuristic class.
    #[arg(long)]
    count: Option<String>,
    /// analyze: roles per token tuple.
    #[arg(long)]
    k: Option<String>,
}

impl Common {
    fn overrides(&self) -> Result<Vec<(String, String)>, CliError> {
        let mut out = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        let flags = [
            ("seed", &self.seed),
            ("jobs", &self.jobs),
            ("model", &self.model),
            ("train", &self.train),
            ("dev", &self.dev),
            ("source-train", &self.source_train),
            ("source-dev", &self.source_dev),
            ("source-ckpt", &self.source_ckpt),
            ("ckpt", &self.ckpt),
            ("probes", &self.probes),
            ("d-sym", &self.d_sym),
            ("d-role", &self.d_role),
            ("n-sym", &self.n_sym),
            ("n-role", &self.n_role),
            ("temp", &self.temp),
            ("lambda", &self.lambda),
            ("scale-init", &self.scale_init),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("accum", &self.accum),
            ("task", &self.task),
            ("count", &self.count),
            ("k", &self.k),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        for (k, on) in [
            ("transfer-backbone", self.transfer_backbone),
            ("transfer-fillers", self.transfer_fillers),
            ("transfer-roles", self.transfer_roles),
        ] {
            if on {
                out.push((k.to_string(), "true".into()));
            }
        }
        Ok(out)
    }

    fn settings(&self) -> Result<Settings, CliError> {
        Settings::resolve(self.config.as_deref(), &self.overrides()?)
    }
}

/// A subcommand body: `Ok(false)` means it ran but its check failed.
type Handler = fn(&Settings, Option<PathBuf>) -> Result<bool, CliError>;

fn run(cli: Cli) -> Result<bool, CliError> {
    let (common, f): (&Common, Handler) = match &cli.command {
        Command::GenData(c) => (c, commands::gen_data),
        Command::Train(c) => (c, commands::train),
        Command::Transfer(c) => (c, commands::transfer),
        Command::Eval(c) => (c, commands::eval),
        Command::Analyze(c) => (c, commands::analyze),
        Command::Gradcheck(c) => (c, commands::gradcheck),
    };
    let settings = common.settings()?;
    f(&settings, common.out.clone())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
