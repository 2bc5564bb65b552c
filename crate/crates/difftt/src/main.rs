use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use difftt::commands;
use difftt::{Error, Result, RunConfig};

#[derive(Parser)]
#[command(name = "difftt", version, about = "Cascade prediction with meta-auxiliary test-time training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set lr=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Shared seed for data generation, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Write artifacts here instead of a fresh timestamped directory.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Parent of timestamped run directories.
    #[arg(long, global = true, default_value = "runs")]
    runs_root: PathBuf,
    /// Treat graph edges as directed.
    #[arg(long, global = true)]
    directed: bool,
    /// Keep already-adopted users in the next-user softmax and ranking.
    #[arg(long, global = true)]
    no_seen_mask: bool,
    /// Score every position after the first instead of only unobserved ones.
    #[arg(long, global = true)]
    eval_all_positions: bool,
    /// Meta-gradient order (`first`).
    #[arg(long, global = true)]
    meta_order: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        /// Output directory for `cascades.txt` and `graph.txt` (default: `<run>/data`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Joint training from scratch.
    TrainJoint {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Meta-auxiliary training from a joint checkpoint.
    MetaTrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Test-set evaluation without adaptation.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write the user embedding tables as CSV.
        #[arg(long)]
        export_embeddings: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Test-set evaluation with per-cascade test-time training.
    TttEval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Adaptation step counts; several values run a sweep.
        #[arg(long, value_delimiter = ',')]
        delta: Vec<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-cascade ΔMSLE table and histogram from two evaluation tables.
    Report {
        /// `*_cascades.csv` with adaptation.
        #[arg(long)]
        with: PathBuf,
        /// `*_cascades.csv` without adaptation.
        #[arg(long)]
        without: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Generate { common, .. }
            | Command::TrainJoint { common, .. }
            | Command::MetaTrain { common, .. }
            | Command::Evaluate { common, .. }
            | Command::TttEval { common, .. }
            | Command::Report { common, .. } => common,
        }
    }
}

fn resolve_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &c.config {
        cfg.apply_file(path)?;
    }
    cfg.apply_overrides(&c.overrides)?;
    if let Some(seed) = c.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if c.directed {
        cfg.directed = true;
    }
    if c.no_seen_mask {
        cfg.mask_seen = false;
    }
    if c.eval_all_positions {
        cfg.eval_all_positions = true;
    }
    if let Some(order) = &c.meta_order {
        cfg.set("meta_order", order)?;
    }
    Ok(cfg)
}

/// Sends log lines to stderr and the run log.
struct Tee(File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()
    }
}

fn init_logging(run: &Path) -> Result<()> {
    std::fs::create_dir_all(run).map_err(|e| Error::Io {
        path: run.to_path_buf(),
        source: e,
    })?;
    let path = run.join("run.log");
    let file = File::create(&path).map_err(|e| Error::Io { path, source: e })?;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Pipe(Box::new(Tee(file))))
        .init();
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    let cfg = resolve_config(common)?;
    let run = common
        .run_dir
        .clone()
        .unwrap_or_else(|| commands::new_run_dir(&common.runs_root, cfg.train.seed));
    init_logging(&run)?;
    log::info!("run directory {}", run.display());
    match &cli.command {
        Command::Generate { out, .. } => {
            let out = out.clone().unwrap_or_else(|| run.join("data"));
            commands::generate(&cfg, &out, &run)?;
        }
        Command::TrainJoint { data, .. } => {
            commands::train_joint(&cfg, data, &run)?;
        }
        Command::MetaTrain { data, checkpoint, .. } => {
            commands::train_meta(&cfg, data, checkpoint, &run)?;
        }
        Command::Evaluate {
            data,
            checkpoint,
            export_embeddings,
            ..
        } => {
            commands::evaluate(&cfg, data, checkpoint, &run, *export_embeddings)?;
        }
        Command::TttEval {
            data, checkpoint, delta, ..
        } => {
            commands::ttt_eval(&cfg, data, checkpoint, &run, delta)?;
        }
        Command::Report { with, without, .. } => {
            commands::report(with, without, &run)?;
        }
    }
    println!("{}", run.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
