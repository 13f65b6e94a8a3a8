//! Benchmark harness: seeded length generation, the optimization ladder,
//! timing and CSV/JSON reporting.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward, random_input, EncoderWeights, ModelConfig, OptFlags};
use crate::error::{Error, Result};
use crate::flops::count;
use crate::packing::SeqLengths;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    BertBase,
    Albert,
    Distilbert,
    DebertaCfg,
    Custom,
}

impl Preset {
    pub const ALL: [Preset; 5] = [
        Preset::BertBase,
        Preset::Albert,
        Preset::Distilbert,
        Preset::DebertaCfg,
        Preset::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::BertBase => "bert_base",
            Preset::Albert => "albert",
            Preset::Distilbert => "distilbert",
            Preset::DebertaCfg => "deberta_cfg",
            Preset::Custom => "custom",
        }
    }

    /// Name written to report rows.
    pub fn label(self) -> String {
        match self {
            Preset::DebertaCfg => format!("{} (config-only)", self.name()),
            _ => self.name().to_string(),
        }
    }

    /// Base configuration; `Custom` starts from the small desk model.
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::BertBase => ModelConfig::bert_base(),
            Preset::Albert => ModelConfig::albert(),
            Preset::Distilbert => ModelConfig::distilbert(),
            Preset::DebertaCfg => ModelConfig::deberta_cfg(),
            Preset::Custom => ModelConfig::desk(),
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LengthMode {
    /// Lengths drawn uniformly from `[1, max]`.
    Uniform,
    /// Uniform draw rescaled so the mean is `alpha · max` to within one token.
    FixedAlpha(f64),
}

/// Seeded batch of sequence lengths.
pub fn gen_lengths(batch_size: usize, max_seq_len: usize, mode: LengthMode, seed: u64) -> Result<SeqLengths> {
    if batch_size == 0 || max_seq_len == 0 {
        return Err(Error::Lengths("batch size and max length must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lengths: Vec<usize> = (0..batch_size).map(|_| rng.random_range(1..=max_seq_len)).collect();
    if let LengthMode::FixedAlpha(alpha) = mode {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Lengths(format!("alpha {alpha} outside (0, 1]")));
        }
        if alpha * (max_seq_len as f64) < 1.0 {
            return Err(Error::Lengths(format!(
                "alpha {alpha} times max length {max_seq_len} is below one token"
            )));
        }
        let target = (alpha * max_seq_len as f64 * batch_size as f64).round() as usize;
        let drawn: usize = lengths.iter().sum();
        let scale = target as f64 / drawn as f64;
        for l in lengths.iter_mut() {
            *l = ((*l as f64 * scale).round() as usize).clamp(1, max_seq_len);
        }
        let mut total: usize = lengths.iter().sum();
        let mut i = 0;
        while total != target {
            let l = &mut lengths[i % batch_size];
            if total < target && *l < max_seq_len {
                *l += 1;
                total += 1;
            } else if total > target && *l > 1 {
                *l -= 1;
                total -= 1;
            }
            i += 1;
        }
    }
    SeqLengths::new(lengths, max_seq_len)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            _ => Err(Error::Config(format!("unknown output format `{s}`"))),
        }
    }
}

/// Everything one harness invocation needs.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub preset: Preset,
    /// Model dimensions and flags other than the ladder's.
    pub config: ModelConfig,
    pub batch_size: usize,
    pub max_seq_lens: Vec<usize>,
    /// One entry per length distribution to sweep.
    pub modes: Vec<LengthMode>,
    pub seed: u64,
    pub repeats: usize,
    /// Ladder steps to run, by name; empty means all.
    pub variants: Vec<String>,
    pub workers: usize,
    pub weights: Option<PathBuf>,
}

impl BenchSpec {
    pub fn new(preset: Preset) -> Self {
        let config = preset.config();
        BenchSpec {
            preset,
            batch_size: config.batch_size,
            max_seq_lens: vec![config.max_seq_len],
            config,
            modes: vec![LengthMode::Uniform],
            seed: 0,
            repeats: 10,
            variants: Vec::new(),
            workers: 1,
            weights: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        if self.max_seq_lens.is_empty() || self.modes.is_empty() {
            return Err(Error::Config("nothing to run: no max lengths or length modes".into()));
        }
        for m in &self.modes {
            if let LengthMode::FixedAlpha(a) = m {
                if !(*a > 0.0 && *a <= 1.0) {
                    return Err(Error::Config(format!("alpha {a} outside (0, 1]")));
                }
            }
        }
        self.ladder().map(|_| ())
    }

    /// Selected ladder steps in ladder order.
    pub fn ladder(&self) -> Result<Vec<(&'static str, OptFlags)>> {
        let full = OptFlags::ladder();
        if self.variants.is_empty() || self.variants.iter().any(|v| v == "all") {
            return Ok(full.to_vec());
        }
        for v in &self.variants {
            if !full.iter().any(|(name, _)| name == v) {
                let known: Vec<_> = full.iter().map(|(n, _)| *n).collect();
                return Err(Error::Config(format!("unknown variant `{v}`; expected one of {}", known.join(", "))));
            }
        }
        Ok(full.into_iter().filter(|(name, _)| self.variants.iter().any(|v| v == name)).collect())
    }

    /// Allowed relative deviation from the baseline output.
    pub fn tolerance(&self) -> f64 {
        deviation_tolerance(self.config.layers)
    }
}

pub fn deviation_tolerance(layers: usize) -> f64 {
    if layers <= 1 {
        1e-4
    } else {
        1e-3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub preset: String,
    pub variant: String,
    pub batch: usize,
    pub max_len: usize,
    pub alpha_actual: f64,
    pub workers: usize,
    pub median_ms: f64,
    pub flops_exact: u64,
    pub flops_analytic: f64,
    pub max_rel_dev: f64,
}

#[derive(Clone, Debug, Default)]
pub struct LadderReport {
    pub rows: Vec<ReportRow>,
    /// Soft checks that did not hold; informational only.
    pub warnings: Vec<String>,
    /// Correctness checks that did not hold.
    pub failures: Vec<String>,
}

impl LadderReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn median(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "median of no samples");
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn load_weights(spec: &BenchSpec, config: &ModelConfig) -> Result<EncoderWeights> {
    match &spec.weights {
        Some(path) => EncoderWeights::load(path, config),
        None => Ok(EncoderWeights::init(config, spec.seed)),
    }
}

/// Runs every selected ladder step for every (max length, length mode) pair.
pub fn run_ladder(spec: &BenchSpec) -> Result<LadderReport> {
    spec.validate()?;
    let ladder = spec.ladder()?;
    let tol = spec.tolerance();
    let mut report = LadderReport::default();
    for &max_len in &spec.max_seq_lens {
        let mut config = spec.config.clone();
        config.batch_size = spec.batch_size;
        config.max_seq_len = max_len;
        config.workers = spec.workers;
        let weights = load_weights(spec, &config)?;
        for (mi, &mode) in spec.modes.iter().enumerate() {
            let seed = spec.seed.wrapping_add(mi as u64);
            let lengths = gen_lengths(spec.batch_size, max_len, mode, seed)?;
            let input = random_input(&lengths, config.hidden(), seed ^ 0x5eed);
            let run = |opt: OptFlags| {
                let cfg = config.clone().with_opt(opt);
                crate::with_workers(spec.workers, || forward(&weights, &lengths, &input, &cfg))
            };
            let mut reference = match ladder.first() {
                Some(&(_, opt)) if opt == OptFlags::ALL_OFF => None,
                _ => Some(run(OptFlags::ALL_OFF)?),
            };
            for &(name, opt) in &ladder {
                let mut times = Vec::with_capacity(spec.repeats);
                let mut last = None;
                for _ in 0..spec.repeats {
                    let start = Instant::now();
                    let out = run(opt)?;
                    times.push(start.elapsed().as_secs_f64() * 1e3);
                    last = Some(out);
                }
                let out = last.expect("repeats is at least 1");
                let reference = reference.get_or_insert_with(|| out.clone());
                let dev = out.output.rel_frobenius_error(&reference.output);
                let flops = count(config.flop_shape(), &lengths, opt.flop_variant());
                let scaled = flops.times_layers(config.layers);
                let context = format!("{name} at max_len {max_len}, alpha {:.3}", lengths.alpha());
                if dev.is_nan() || dev > tol {
                    report
                        .failures
                        .push(format!("{context}: deviation {dev:.3e} exceeds {tol:.0e}"));
                }
                if out.flops.total() != scaled.total_exact {
                    report.failures.push(format!(
                        "{context}: counted {} flops, expected {}",
                        out.flops.total(),
                        scaled.total_exact
                    ));
                }
                report.rows.push(ReportRow {
                    preset: spec.preset.label(),
                    variant: name.to_string(),
                    batch: spec.batch_size,
                    max_len,
                    alpha_actual: lengths.alpha(),
                    workers: spec.workers,
                    median_ms: median(&times),
                    flops_exact: scaled.total_exact,
                    flops_analytic: scaled.total_analytic,
                    max_rel_dev: dev,
                });
            }
        }
    }
    report.warnings.extend(alpha_sweep_warnings(&report.rows));
    Ok(report)
}

/// Flags zero-padding rows whose time falls while alpha grows.
pub fn alpha_sweep_warnings(rows: &[ReportRow]) -> Vec<String> {
    let mut out = Vec::new();
    let mut keys: Vec<(&str, usize)> = rows.iter().map(|r| (r.variant.as_str(), r.max_len)).collect();
    keys.sort();
    keys.dedup();
    for (variant, max_len) in keys {
        if variant != "zero_padding" {
            continue;
        }
        let mut series: Vec<&ReportRow> = rows
            .iter()
            .filter(|r| r.variant == variant && r.max_len == max_len)
            .collect();
        series.sort_by(|a, b| a.alpha_actual.total_cmp(&b.alpha_actual));
        for w in series.windows(2) {
            if w[1].median_ms < w[0].median_ms {
                out.push(format!(
                    "{variant} at max_len {max_len}: {:.3} ms at alpha {:.2} is below {:.3} ms at alpha {:.2}",
                    w[1].median_ms, w[1].alpha_actual, w[0].median_ms, w[0].alpha_actual
                ));
            }
        }
    }
    out
}

pub fn write_csv<W: Write>(rows: &[ReportRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Report(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Report(e.to_string()))
}

pub fn write_json<W: Write>(rows: &[ReportRow], mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, rows).map_err(|e| Error::Report(e.to_string()))?;
    writeln!(writer).map_err(|e| Error::Report(e.to_string()))
}

pub fn render(rows: &[ReportRow], format: OutputFormat) -> Result<String> {
    let mut buf = Vec::new();
    match format {
        OutputFormat::Csv => write_csv(rows, &mut buf)?,
        OutputFormat::Json => write_json(rows, &mut buf)?,
    }
    String::from_utf8(buf).map_err(|e| Error::Report(e.to_string()))
}

/// Writes the report to `path`, naming the path on failure.
pub fn write_report(rows: &[ReportRow], format: OutputFormat, path: &Path) -> Result<()> {
    let text = render(rows, format)?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a CSV report back into rows.
pub fn read_csv(text: &str) -> Result<Vec<ReportRow>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::Report(e.to_string())))
        .collect()
}
