mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use commands::Context;
use config::RunConfig;
use uattr::Error;

#[derive(Parser)]
#[command(name = "uattr", version, about = "Attribute diffusion samples to training images by unlearning them")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Generate(Common),
    /// Train the base model.
    Train(Common),
    /// Estimate the diagonal Fisher at the base model.
    Fisher(Common),
    /// Draw the queries and unlearn each one from the base model.
    Unlearn(Common),
    /// Score every training image for every query and method.
    Attribute(Common),
    /// Retrain without top-K images and measure the queries.
    Evaluate(Common),
    /// Aggregate evaluation CSVs into markdown and SVG.
    Report(Common),
    /// Print the effective config as JSON.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run config; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override applied after parsing, e.g. `unlearn.alpha=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Workspace root; all config paths are relative to it.
    #[arg(long, env = "UATTR_WORKSPACE")]
    workspace: Option<PathBuf>,
    /// Upper bound on parallel jobs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate(c)
            | Command::Train(c)
            | Command::Fisher(c)
            | Command::Unlearn(c)
            | Command::Attribute(c)
            | Command::Evaluate(c)
            | Command::Report(c)
            | Command::Config(c) => c,
        }
    }
}

fn run(cli: Cli) -> uattr::Result<String> {
    let common = cli.command.common();
    let cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Command::Config(_) = cli.command {
        return Ok(serde_json::to_string_pretty(&cfg)?);
    }
    let root = common
        .workspace
        .clone()
        .ok_or_else(|| Error::Validation("no workspace: pass --workspace or set UATTR_WORKSPACE".into()))?;
    std::fs::create_dir_all(&root)?;
    let ctx = Context {
        root,
        cfg,
        jobs: common.jobs,
    };
    match cli.command {
        Command::Generate(_) => commands::generate_cmd(&ctx),
        Command::Train(_) => commands::train_cmd(&ctx),
        Command::Fisher(_) => commands::fisher_cmd(&ctx),
        Command::Unlearn(_) => commands::unlearn_cmd(&ctx),
        Command::Attribute(_) => commands::attribute_cmd(&ctx),
        Command::Evaluate(_) => commands::evaluate_cmd(&ctx),
        Command::Report(_) => commands::report_cmd(&ctx),
        Command::Config(_) => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let mut body = json!({ "error": e.kind(), "message": e.to_string() });
            if let Error::DependencyMissing(p) | Error::Format { path: p, .. } = &e {
                body["path"] = json!(p);
            }
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
