mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::eval::EvalTask;
use commands::serve::ServeOptions;
use commands::Ctx;
use exit::{CmdResult, Failure};

/// Build and evaluate image-caption pairs from whole-slide patch embeddings.
#[derive(Parser, Debug)]
#[command(name = "histopair", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file; relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Dotted config override, e.g. `--set pipeline.top_k_per_category=32`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Select and deduplicate candidate patches for every slide.
    Extract,
    /// Describe, revise and summarize kept candidates into pairs.jsonl (resumable).
    Generate,
    /// Two-stage contrastive training of projection heads.
    Train,
    /// Run one downstream evaluation.
    Eval {
        #[arg(value_enum)]
        task: EvalTask,
    },
    /// Combine evaluation results into one report.
    Report {
        /// Extra result files to include.
        #[arg(long = "results")]
        results: Vec<PathBuf>,
    },
    /// Serve the deterministic mock backend over HTTP.
    MockServe {
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Fraction of describe calls to fail with a permanent error.
        #[arg(long, default_value_t = 0.0)]
        describe_failure_rate: f64,
    },
    /// Write a synthetic manifest and mock patch embeddings.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        slides: usize,
        /// Grid side; each slide has side * side patches.
        #[arg(long, default_value_t = 100)]
        side: u32,
    },
}

fn run(cli: Cli) -> CmdResult {
    let g = &cli.global;
    let loaded = config::load(g.config.as_deref(), &g.sets, g.seed, g.workers)?;
    let ctx = Ctx { config: loaded.config, digest: loaded.digest };
    log::debug!("config digest {}", ctx.digest);
    match cli.command {
        Command::Extract => commands::extract::run(&ctx).map(drop),
        Command::Generate => commands::generate::run(&ctx).map(drop),
        Command::Train => commands::train::run(&ctx).map(drop),
        Command::Eval { task } => commands::eval::run(&ctx, task).map(drop),
        Command::Report { results } => commands::report::run(&ctx, &results).map(drop),
        Command::MockServe { host, port, describe_failure_rate } => {
            commands::serve::run(&ctx, &ServeOptions { host, port, describe_failure_rate })
        }
        Command::Synth { out, slides, side } => commands::synth::run(&out, slides, side, ctx.config.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(&f),
    }
}

/// Print the cause chain, skipping causes already spelled out by their parent.
fn report(f: &Failure) -> ExitCode {
    let mut msg = String::new();
    for cause in f.error.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg += ": ";
            }
            msg += &text;
        }
    }
    eprintln!("error: {}", msg.trim_end());
    f.code()
}
