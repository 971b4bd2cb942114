//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::data::{
    load_split, logits_load, logits_save, synthetic_teacher, LogitRecord, MarginRange, Split,
    MAX_TOKENS,
};
use crate::error::{Error, Result};
use crate::harness::checkpoint::Checkpoint;
use crate::harness::config::{RunMode, TrainConfig};
use crate::harness::train::{evaluate_raw, train_baseline, train_distill, Dataset};
use crate::layers::{count_params_for, Arch, ModelConfig};
use crate::tensor::Rng;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "studentkd", version, about = "Train small sentence classifiers, optionally distilled from cached teacher logits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Baseline training with cross-entropy on gold labels.
    Train(TrainArgs),
    /// Training against cached teacher logits.
    Distill(TrainArgs),
    /// Accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Trainable parameter count and ratio against the 110M teacher.
    Params(ParamsArgs),
    /// Writes a fake teacher cache for every split of a data directory.
    MakeSyntheticTeacher(SyntheticArgs),
    /// Validates a teacher cache and summarizes its coverage.
    InspectCache(InspectArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// TOML file with any of the flag names below (underscores); flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    arch: Option<Arch>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    logits: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    step_size: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    /// Use only the first N training rows.
    #[arg(long)]
    train_limit: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    arch: Option<Arch>,
    data: Option<PathBuf>,
    logits: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    alpha: Option<f64>,
    lr: Option<f64>,
    step_size: Option<usize>,
    gamma: Option<f64>,
    embed_dim: Option<usize>,
    hidden_dim: Option<usize>,
    train_limit: Option<usize>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
}

#[derive(Debug, Args)]
struct ParamsArgs {
    #[arg(long)]
    arch: Arch,
    /// Vocabulary size including PAD and UNK.
    #[arg(long, conflicts_with = "data")]
    vocab_size: Option<usize>,
    /// Build the vocabulary from `<data>/train.tsv` instead.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    embed_dim: usize,
    #[arg(long, default_value_t = 64)]
    hidden_dim: usize,
}

#[derive(Debug, Args)]
struct SyntheticArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Probability that the teacher's argmax matches the gold label.
    #[arg(long, default_value_t = 1.0)]
    quality: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    margin_lo: f64,
    #[arg(long, default_value_t = 4.0)]
    margin_hi: f64,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    logits: PathBuf,
    /// Check coverage against the TSVs in this directory.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

/// Parses `argv` (program name first), runs the command, and returns the
/// process exit code. Output goes to stdout, diagnostics to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        EXIT_NUMERIC
    } else if e.is_data_error() {
        EXIT_DATA
    } else {
        EXIT_USAGE
    }
}

fn dispatch(cmd: Command) -> std::result::Result<(), Failure> {
    match cmd {
        Command::Train(a) => train_cmd(a, RunMode::Baseline),
        Command::Distill(a) => train_cmd(a, RunMode::Distill),
        Command::Eval(a) => {
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let raw = load_split(&a.split.path_in(&a.data))?;
            let acc = evaluate_raw(&ckpt, &raw)?;
            println!("{} accuracy {acc:.6} ({} examples)", a.split.as_str(), raw.len());
            Ok(())
        }
        Command::Params(a) => params_cmd(a),
        Command::MakeSyntheticTeacher(a) => synthetic_cmd(a),
        Command::InspectCache(a) => inspect_cmd(a),
    }
}

fn load_file_config(path: &Path) -> std::result::Result<FileConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    toml::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config file {}: {e}", path.display())))
}

fn resolve(a: TrainArgs, mode: RunMode) -> std::result::Result<(TrainConfig, Option<usize>), Failure> {
    let file = match &a.config {
        Some(p) => load_file_config(p)?,
        None => FileConfig::default(),
    };
    let arch = a
        .arch
        .or(file.arch)
        .ok_or_else(|| Failure::Usage("missing required flag --arch".into()))?;
    let mut cfg = TrainConfig::new(arch, mode);
    cfg.data_dir = Some(
        a.data
            .or(file.data)
            .ok_or_else(|| Failure::Usage("missing required flag --data".into()))?,
    );
    cfg.logits = a.logits.or(file.logits);
    if mode == RunMode::Distill && cfg.logits.is_none() {
        return Err(Failure::Usage("distill requires the --logits flag".into()));
    }
    cfg.out_dir = a.out.or(file.out);
    macro_rules! pick {
        ($($f:ident),*) => {$(
            if let Some(v) = a.$f.or(file.$f) { cfg.$f = v; }
        )*};
    }
    pick!(seed, epochs, batch_size, alpha, lr, step_size, gamma, embed_dim, hidden_dim);
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok((cfg, a.train_limit.or(file.train_limit)))
}

fn train_cmd(a: TrainArgs, mode: RunMode) -> std::result::Result<(), Failure> {
    let (cfg, limit) = resolve(a, mode)?;
    let dir = cfg.data_dir.clone().expect("resolved");
    let data = Dataset::load(&dir, cfg.max_len, cfg.min_freq, limit)?;
    let (ckpt, report) = match mode {
        RunMode::Baseline => train_baseline(&cfg, &data)?,
        RunMode::Distill => {
            let cache = logits_load(cfg.logits.as_deref().expect("resolved"))?;
            train_distill(&cfg, &data, &cache)?
        }
    };
    let out = cfg.out_dir.clone().unwrap_or_else(|| {
        PathBuf::from(format!("runs/{}-{}-seed{}", cfg.arch, cfg.mode, cfg.seed))
    });
    report.write_to(&out)?;
    ckpt.save(&out.join("checkpoint.bin"))?;
    print!("{report}");
    println!("wrote {}", out.display());
    Ok(())
}

fn params_cmd(a: ParamsArgs) -> std::result::Result<(), Failure> {
    let vocab_size = match (a.vocab_size, &a.data) {
        (Some(v), _) => v,
        (None, Some(dir)) => {
            let raw = load_split(&Split::Train.path_in(dir))?;
            crate::data::build_vocab(&raw, 1)?.len()
        }
        (None, None) => {
            return Err(Failure::Usage("params needs --vocab-size or --data".into()));
        }
    };
    let cfg = ModelConfig {
        embed_dim: a.embed_dim,
        hidden_dim: a.hidden_dim,
        ..ModelConfig::new(a.arch, vocab_size)
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let count = count_params_for(&cfg);
    println!(
        "arch {}  vocab {}  params {}  ratio vs 110M x{:.1}",
        a.arch, vocab_size, count.total, count.ratio_vs_teacher
    );
    Ok(())
}

fn synthetic_cmd(a: SyntheticArgs) -> std::result::Result<(), Failure> {
    let margin = MarginRange {
        lo: a.margin_lo,
        hi: a.margin_hi,
    };
    let mut rng = Rng::new(a.seed);
    let mut records: Vec<LogitRecord> = Vec::new();
    for split in Split::ALL {
        let raw = load_split(&split.path_in(&a.data))?;
        let labels: Vec<usize> = raw.iter().map(|r| r.label).collect();
        records.extend(
            synthetic_teacher(split.as_str(), &labels, a.quality, margin, &mut rng)
                .map_err(|e| Failure::Usage(e.to_string()))?,
        );
    }
    logits_save(&a.out, &records)?;
    println!("wrote {} records to {}", records.len(), a.out.display());
    Ok(())
}

fn inspect_cmd(a: InspectArgs) -> std::result::Result<(), Failure> {
    let cache = logits_load(&a.logits)?;
    println!("{} records", cache.len());
    let summary = cache.summary();
    for (split, cov) in &summary {
        println!(
            "  {split:<6} {:>7} records  ids {}..={}{}",
            cov.count,
            cov.min_id,
            cov.max_id,
            if cov.is_dense() { "" } else { "  (gaps)" }
        );
    }
    if let Some(dir) = a.data {
        for split in Split::ALL {
            let rows = load_split(&split.path_in(&dir))?.len();
            let cov = summary.get(split.as_str());
            let ok = cov.is_some_and(|c| c.count == rows && c.is_dense());
            if !ok {
                return Err(Error::Cache(format!(
                    "{} split has {rows} rows but the cache covers {}",
                    split.as_str(),
                    cov.map_or(0, |c| c.count)
                ))
                .into());
            }
        }
        println!("coverage matches {} (max sentence length {MAX_TOKENS})", dir.display());
    }
    Ok(())
}
