mod commands;
mod report;
mod selftest;
mod sweep;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fpt_core::data::Split;
use fpt_core::{FptConfig, FptError, TrainMode};

#[derive(Parser)]
#[command(name = "fpt", version, about = "Fine-grained prompt tuning on a frozen high-resolution backbone")]
#[command(args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file with every field spelled out.
    Config {
        #[arg(long, value_enum, default_value_t = Preset::Desk)]
        preset: Preset,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic dataset into a directory.
    Synth {
        #[command(flatten)]
        opts: RunOptions,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the frozen backbone once and store selected features per split.
    Cache {
        #[command(flatten)]
        opts: RunOptions,
        /// Replace an existing cache.
        #[arg(long)]
        force: bool,
    },
    /// Train the side network and write a checkpoint plus a JSON report.
    Train {
        #[command(flatten)]
        opts: RunOptions,
        #[arg(long)]
        out: PathBuf,
        /// Recompute frozen features every batch instead of reading the cache.
        #[arg(long)]
        live: bool,
    },
    /// Print the AUC of a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: Split,
        #[arg(long)]
        data_root: Option<PathBuf>,
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        live: bool,
    },
    /// Efficiency table: parameters, activation memory, scores, PPE and PME.
    Report {
        #[command(flatten)]
        opts: RunOptions,
        /// Rows of (score, learnable %, memory) to score instead of the config.
        #[arg(long)]
        fixtures: Option<PathBuf>,
        /// Train reports whose test AUC fills the score column.
        #[arg(long = "run")]
        runs: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Train every combination of the given values in child processes.
    Sweep {
        #[command(flatten)]
        opts: RunOptions,
        /// `key=v1,v2,...`; keys are the override flag names, e.g. `lr` or `mode`.
        #[arg(long = "grid", required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the invariant checks at a tiny scale.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Desk,
    VitB,
}

/// Config file plus flag overrides; flags win.
#[derive(Args, Clone, Debug, Default)]
struct RunOptions {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Defaults to $FPT_CACHE_DIR, then `fpt-cache`.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// fpt, fpt_no_selection, fpt_symmetric or side_only.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<TrainMode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    prompts: Option<usize>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    synth_seed: Option<u64>,
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    s.parse().map_err(|e: FptError| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: FptError| e.to_string())
}

impl RunOptions {
    fn config(&self) -> fpt_core::Result<FptConfig> {
        let mut cfg = match &self.config {
            Some(p) => FptConfig::load(p)?,
            None => FptConfig::desk(),
        };
        if let Some(r) = &self.data_root {
            cfg.data.root = Some(r.clone());
        }
        let t = &mut cfg.train;
        macro_rules! set {
            ($field:expr, $flag:expr) => {
                if let Some(v) = $flag {
                    $field = v;
                }
            };
        }
        set!(t.mode, self.mode);
        set!(t.seed, self.seed);
        set!(t.epochs, self.epochs);
        set!(t.batch_size, self.batch_size);
        set!(t.lr, self.lr);
        set!(t.weight_decay, self.weight_decay);
        set!(cfg.selection.ratio, self.ratio);
        set!(cfg.side.num_prompts, self.prompts);
        set!(cfg.data.synth.samples, self.samples);
        set!(cfg.data.synth.seed, self.synth_seed);
        cfg.validate()?;
        Ok(cfg)
    }

    fn cache_dir(&self) -> PathBuf {
        resolve_cache_dir(self.cache_dir.as_ref())
    }
}

fn resolve_cache_dir(flag: Option<&PathBuf>) -> PathBuf {
    flag.cloned()
        .or_else(|| std::env::var_os(fpt_core::cache::CACHE_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("fpt-cache"))
}

/// Exit status for each error class; scripts depend on these values.
fn exit_code(e: &FptError) -> u8 {
    match e {
        FptError::Config(_) => 2,
        FptError::Io { .. } | FptError::Format { .. } => 3,
        FptError::StaleCache { .. } | FptError::PartialCache(_) | FptError::CacheExists(_) | FptError::CacheLookup(_) => 4,
        FptError::NanLoss { .. } => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Config { preset, out } => commands::config(preset, out.as_deref()),
        Command::Synth { opts, out } => commands::synth(&opts, &out),
        Command::Cache { opts, force } => commands::cache(&opts, force),
        Command::Train { opts, out, live } => commands::train(&opts, &out, live),
        Command::Eval {
            checkpoint,
            split,
            data_root,
            cache_dir,
            live,
        } => commands::eval(&checkpoint, split, data_root, &resolve_cache_dir(cache_dir.as_ref()), live),
        Command::Report { opts, fixtures, runs, json } => report::run(&opts, fixtures.as_deref(), &runs, json),
        Command::Sweep { opts, grid, out, jobs } => sweep::run(&opts, &grid, &out, jobs),
        Command::Selftest => return selftest::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
