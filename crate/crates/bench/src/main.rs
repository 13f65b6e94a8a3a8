use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use packedbert::bench::{render, run_ladder, write_report, BenchSpec, LengthMode, OutputFormat, Preset};
use packedbert::encoder::ModelConfig;

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    BertBase,
    Albert,
    Distilbert,
    DebertaCfg,
    Custom,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::BertBase => Preset::BertBase,
            PresetArg::Albert => Preset::Albert,
            PresetArg::Distilbert => Preset::Distilbert,
            PresetArg::DebertaCfg => Preset::DebertaCfg,
            PresetArg::Custom => Preset::Custom,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Uniform,
    Fixed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

/// Runs the encoder optimization ladder on seeded variable-length batches.
#[derive(Debug, Parser)]
#[command(name = "packedbert-bench", version)]
struct Args {
    #[arg(long, value_enum, default_value = "bert-base")]
    preset: PresetArg,
    /// Overrides for the preset as `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// One or more maximum sequence lengths.
    #[arg(long, value_delimiter = ',')]
    max_seq_len: Vec<usize>,
    /// Average-to-maximum length ratios for `--mode fixed`.
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    #[arg(long, value_enum, default_value = "uniform")]
    mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    /// Ladder steps to run, or `all`.
    #[arg(long, value_delimiter = ',', default_value = "all")]
    variants: Vec<String>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    /// Report destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Weight file; weights are random when absent.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Print a verdict per variant on stderr.
    #[arg(long)]
    check: bool,
}

fn build_spec(args: &Args) -> Result<BenchSpec> {
    let preset = Preset::from(args.preset);
    let mut spec = BenchSpec::new(preset);
    if let Some(path) = &args.config {
        spec.config = ModelConfig::load_kv(path, spec.config.clone())?;
        spec.batch_size = spec.config.batch_size;
        spec.max_seq_lens = vec![spec.config.max_seq_len];
    }
    if let Some(layers) = args.layers {
        spec.config.layers = layers;
    }
    if let Some(bs) = args.batch_size {
        spec.batch_size = bs;
    }
    if !args.max_seq_len.is_empty() {
        spec.max_seq_lens = args.max_seq_len.clone();
    }
    spec.modes = match args.mode {
        ModeArg::Uniform => {
            if !args.alpha.is_empty() {
                bail!("--alpha needs --mode fixed");
            }
            vec![LengthMode::Uniform]
        }
        ModeArg::Fixed => {
            if args.alpha.is_empty() {
                bail!("--mode fixed needs at least one --alpha");
            }
            args.alpha.iter().map(|&a| LengthMode::FixedAlpha(a)).collect()
        }
    };
    spec.seed = args.seed;
    spec.repeats = args.repeats;
    spec.variants = args.variants.clone();
    spec.workers = args.workers;
    spec.weights = args.weights.clone();
    spec.validate()?;
    Ok(spec)
}

fn run(args: &Args) -> Result<bool> {
    let spec = build_spec(args)?;
    let report = run_ladder(&spec)?;
    let format = match args.format {
        FormatArg::Csv => OutputFormat::Csv,
        FormatArg::Json => OutputFormat::Json,
    };
    match &args.out {
        Some(path) => write_report(&report.rows, format, path)?,
        None => print!("{}", render(&report.rows, format)?),
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if args.check {
        let tol = spec.tolerance();
        for row in &report.rows {
            let verdict = if row.max_rel_dev <= tol { "ok" } else { "FAIL" };
            eprintln!(
                "check {verdict}: {} max_len {} alpha {:.3} deviation {:.3e} (tolerance {tol:.0e})",
                row.variant, row.max_len, row.alpha_actual, row.max_rel_dev
            );
        }
    }
    for f in &report.failures {
        eprintln!("error: {f}");
    }
    Ok(report.passed())
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args).context("benchmark failed") {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
