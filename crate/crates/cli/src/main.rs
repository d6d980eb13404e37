use std::path::PathBuf;
use std::process::ExitCode;

use btmtrack::config::RunConfig;
use btmtrack::pipeline;
use clap::{Parser, Subcommand};

/// Dual-template RGB-T tracker: synthetic data, training, tracking,
/// evaluation and the pruning benchmark.
#[derive(Parser, Debug)]
#[command(name = "btmtrack", version)]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the train and test splits.
    Gen,
    /// Train a model on the train split.
    Train {
        /// Continue from the checkpoint's epoch counter.
        #[arg(long)]
        resume: bool,
    },
    /// Track test sequences, one result file per sequence.
    Track {
        /// Track only this sequence directory.
        #[arg(long)]
        sequence: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score result files against the ground truth.
    Eval {
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Analytic cost model and measured throughput per pruning strategy.
    BenchPrune,
}

fn config(cli: &Cli) -> btmtrack::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| btmtrack::Error::Config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.model.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.paths.out_dir = o.clone();
    }
    match &cli.command {
        Command::Track { sequence, checkpoint } => {
            if let Some(s) = sequence {
                cfg.paths.sequence = s.clone();
            }
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = c.clone();
            }
        }
        Command::Eval { results: Some(r) } => cfg.paths.results_dir = r.clone(),
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> btmtrack::Result<()> {
    let cfg = config(cli)?;
    print!("{}", cfg.echo());
    match &cli.command {
        Command::Gen => {
            let dirs = pipeline::cmd_gen(&cfg)?;
            println!("wrote {} sequences under {}", dirs.len(), cfg.paths.data_dir.display());
        }
        Command::Train { resume } => {
            let rows = pipeline::cmd_train(&cfg, *resume)?;
            if let Some(last) = rows.last() {
                println!("epoch {} loss {:.6}", last.epoch, last.loss);
            }
            println!("checkpoint {}", cfg.paths.checkpoint().display());
        }
        Command::Track { .. } => {
            let files = pipeline::cmd_track(&cfg)?;
            println!("wrote {} result files under {}", files.len(), cfg.paths.results_dir().display());
        }
        Command::Eval { .. } => print!("{}", pipeline::cmd_eval(&cfg)?.to_table()),
        Command::BenchPrune => print!("{}", pipeline::cmd_bench_prune(&cfg)?.to_table()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BTM_LOG", "info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
