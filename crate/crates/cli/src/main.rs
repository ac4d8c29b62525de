//! `focus-sim`: command-line harness around the `focus-core` simulator.
//!
//! Four subcommands cover the whole workflow: `gen-workload` writes a
//! deterministic request file (optionally with scripted decodability tapes),
//! `run` drains a workload through the engine and drops `report.json` plus
//! `steps.csv` into the output directory, `theory` validates the Gaussian
//! eviction-error model by simulation, and `compare` puts two run reports
//! side by side.
//!
//! Everything is seeded; running the same command twice produces identical
//! bytes. Logging goes through `env_logger` under the `FOCUS_SIM_LOG`
//! environment variable. Exit codes: 0 ok, 2 bad configuration or arguments,
//! 3 engine invariant violation, 4 I/O or serialization failure.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use focus_core::cache::CacheMode;
use focus_core::focus::StrategyKind;
use focus_core::metrics::{
    histogram_decoded_per_step, steps_to_csv, RunReport, RunTotals, SequenceReport,
    REPORT_SCHEMA_VERSION,
};
use focus_core::model::{init_weights, ModelConfig};
use focus_core::scheduler::{Engine, EngineConfig, GenRequest, PlaceholderMode};
use focus_core::theory::{chernoff_bound, monte_carlo_p_err, q_function, GaussianShiftModel};
use focus_core::trace::OracleTrace;
use focus_core::workload::{
    gen_workload, read_workload, synth_prompt, write_workload, ScriptedProfile,
};

#[derive(Parser, Debug)]
#[command(name = "focus-sim", version, about = "Block-diffusion decoding simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Drain a workload file through the engine and write run artifacts.
    Run(RunArgs),
    /// Write a deterministic synthetic workload (and optional tapes).
    GenWorkload(GenArgs),
    /// Monte-Carlo check of the eviction-error model; prints a JSON table.
    Theory(TheoryArgs),
    /// Put two run reports side by side.
    Compare(CompareArgs),
}

/// Engine mode selected by `--strategy`. The fused names pick both the
/// candidate ranking and the cache mode: the plain baselines differ only in
/// commit timing, while the ranked strategies all run on the delayed+stable
/// cache so their forward sets are comparable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[clap(rename_all = "snake_case")]
enum StrategyMode {
    /// Forward everything, commit the block in bulk when it finishes.
    None,
    /// Forward everything, commit decoded tokens one forward later.
    Dc,
    /// Forward everything, commit on the stability rule.
    DcPlus,
    /// Budgeted top of the importance-shift ranking.
    FocusTop,
    /// Fixed-size top of the ranking (needs --fixed-k).
    FixedTop,
    /// Fixed-size random masked subset (needs --fixed-k).
    FixedRandom,
    /// Fixed-size bottom of the ranking (needs --fixed-k).
    FixedBottom,
}

impl StrategyMode {
    fn apply(self, cfg: &mut EngineConfig) {
        let (kind, cache) = match self {
            StrategyMode::None => (StrategyKind::None, CacheMode::None),
            StrategyMode::Dc => (StrategyKind::None, CacheMode::Dc),
            StrategyMode::DcPlus => (StrategyKind::None, CacheMode::DcPlus),
            StrategyMode::FocusTop => (StrategyKind::FocusTop, CacheMode::DcPlus),
            StrategyMode::FixedTop => (StrategyKind::FixedTopK, CacheMode::DcPlus),
            StrategyMode::FixedRandom => (StrategyKind::FixedRandomK, CacheMode::DcPlus),
            StrategyMode::FixedBottom => (StrategyKind::FixedBottomK, CacheMode::DcPlus),
        };
        cfg.strategy.kind = kind;
        cfg.cache_mode = cache;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[clap(rename_all = "snake_case")]
enum PlaceholderArg {
    AllMasked,
    UnprocessedOnly,
}

impl From<PlaceholderArg> for PlaceholderMode {
    fn from(p: PlaceholderArg) -> Self {
        match p {
            PlaceholderArg::AllMasked => PlaceholderMode::AllMasked,
            PlaceholderArg::UnprocessedOnly => PlaceholderMode::UnprocessedOnly,
        }
    }
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Workload file (JSONL, one request per line).
    #[arg(long)]
    workload: PathBuf,
    /// Output directory for report.json and steps.csv.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// JSON config file; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Retention budget multiplier (must be > 1).
    #[arg(long)]
    alpha: Option<f64>,
    /// Decode confidence threshold in (0, 1].
    #[arg(long)]
    conf_threshold: Option<f64>,
    /// Generation block width.
    #[arg(long)]
    block_size: Option<usize>,
    /// Candidate ranking + cache mode preset.
    #[arg(long, value_enum)]
    strategy: Option<StrategyMode>,
    /// Candidate count for the fixed_* strategies.
    #[arg(long)]
    fixed_k: Option<usize>,
    /// Which masked positions count as placeholders.
    #[arg(long, value_enum)]
    placeholder_mode: Option<PlaceholderArg>,
    /// Batch slots filled FIFO from the queue.
    #[arg(long)]
    max_batch: Option<usize>,
    /// Hard cap on generated tokens per sequence.
    #[arg(long)]
    max_gen_len: Option<usize>,
    /// Run seed (weights, prompts, random strategy).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Output directory for workload.jsonl (and traces/ if scripted).
    #[arg(long)]
    out: PathBuf,
    /// Number of requests.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Prompt length range, inclusive ("8" or "4..16").
    #[arg(long, default_value = "4..16")]
    prompt_len: String,
    /// Target length range, inclusive ("32" or "32..64").
    #[arg(long, default_value = "32..64")]
    target_len: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write one scripted decodability tape per request.
    #[arg(long)]
    scripted: bool,
    /// Ready-positions-per-step range for scripted tapes.
    #[arg(long, default_value = "1..2")]
    rate: String,
    /// Block width of the scripted tapes.
    #[arg(long, default_value_t = 32)]
    block_size: usize,
    /// Vocabulary of the scripted tapes.
    #[arg(long, default_value_t = 8)]
    trace_vocab: usize,
    /// Attention heads in the scripted tapes.
    #[arg(long, default_value_t = 1)]
    trace_heads: usize,
}

#[derive(Args, Debug)]
struct TheoryArgs {
    /// Signal-to-noise ratios to sweep (repeatable).
    #[arg(long = "gamma", default_values_t = vec![2.0, 3.0, 5.0])]
    gamma: Vec<f64>,
    /// Samples per gamma.
    #[arg(long, default_value_t = 1_000_000)]
    n: u64,
    #[arg(long)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CompareArgs {
    /// Baseline report.json (or its directory).
    baseline: PathBuf,
    /// Candidate report.json (or its directory).
    candidate: PathBuf,
}

/// On-disk config: every engine field optional (defaults apply), plus an
/// optional model section for weighted runs.
#[derive(Debug, Deserialize)]
struct FileConfig {
    #[serde(flatten)]
    engine: EngineConfig,
    model: Option<ModelConfig>,
}

const CONFIG_KEYS: [&str; 10] = [
    "alpha",
    "conf_threshold",
    "block_size",
    "max_batch",
    "max_gen_len",
    "strategy",
    "cache_mode",
    "placeholder_mode",
    "seed",
    "model",
];

fn load_config(path: &Path) -> anyhow::Result<FileConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let obj = value
        .as_object()
        .with_context(|| format!("{}: config must be a JSON object", path.display()))?;
    for key in obj.keys() {
        if !CONFIG_KEYS.contains(&key.as_str()) {
            bail!("{}: unknown config field {:?}", path.display(), key);
        }
    }
    let cfg: FileConfig = serde_json::from_value(value)?;
    Ok(cfg)
}

/// Write to stdout without panicking when the reader has gone away (for
/// example `focus-sim compare ... | head`); by then the work is done, so a
/// closed pipe just means nobody wants the rest.
fn print_out(text: &str) {
    use std::io::Write;
    if std::io::stdout().lock().write_all(text.as_bytes()).is_err() {
        std::process::exit(0);
    }
}

/// Parse "8" as (8, 8) and "4..16" as (4, 16), both ends inclusive.
fn parse_range(s: &str) -> anyhow::Result<(usize, usize)> {
    let parsed = match s.split_once("..") {
        Some((a, b)) => (a.trim().parse()?, b.trim().parse()?),
        None => {
            let n = s.trim().parse()?;
            (n, n)
        }
    };
    Ok(parsed)
}

fn cmd_run(args: RunArgs) -> anyhow::Result<()> {
    let mut cfg = EngineConfig::default();
    let mut model_cfg: Option<ModelConfig> = None;
    if let Some(path) = &args.config {
        let file = load_config(path)?;
        cfg = file.engine;
        model_cfg = file.model;
    }
    if let Some(a) = args.alpha {
        cfg.alpha = a;
    }
    if let Some(c) = args.conf_threshold {
        cfg.conf_threshold = c;
    }
    if let Some(b) = args.block_size {
        cfg.block_size = b;
    }
    if let Some(mode) = args.strategy {
        mode.apply(&mut cfg);
    }
    if let Some(k) = args.fixed_k {
        cfg.strategy.fixed_k = Some(k);
    }
    if let Some(p) = args.placeholder_mode {
        cfg.placeholder_mode = p.into();
    }
    if let Some(b) = args.max_batch {
        cfg.max_batch = b;
    }
    if let Some(m) = args.max_gen_len {
        cfg.max_gen_len = m;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }

    let entries = read_workload(&args.workload)?;
    let workload_dir = args.workload.parent().unwrap_or_else(|| Path::new("."));
    let mut traces = Vec::with_capacity(entries.len());
    for entry in &entries {
        traces.push(match &entry.oracle {
            Some(rel) => Some(OracleTrace::from_path(workload_dir.join(rel))?),
            None => None,
        });
    }

    let needs_model = traces.iter().any(|t| t.is_none());
    let model = if needs_model {
        let mc = model_cfg.unwrap_or_else(|| ModelConfig {
            block_size: cfg.block_size,
            ..ModelConfig::default()
        });
        Some(init_weights(&mc, cfg.seed)?)
    } else {
        None
    };
    let model_json = match &model {
        Some(w) => serde_json::to_value(w.cfg)?,
        None => serde_json::Value::Null,
    };
    let prompt_space = model.as_ref().map(|w| (w.cfg.vocab, w.cfg.mask_token_id));

    let mut engine = Engine::new(cfg, model)?;
    for (entry, trace) in entries.into_iter().zip(traces) {
        let prompt = match &trace {
            // Scripted tapes carry their own logits; the prompt is never read.
            Some(_) => Vec::new(),
            None => {
                let (vocab, mask) = prompt_space.expect("model runs always carry a model config");
                synth_prompt(cfg.seed, &entry.id, entry.prompt_len, vocab, mask)?
            }
        };
        engine.submit(GenRequest {
            id: entry.id,
            prompt,
            target_len: entry.target_len,
            trace,
        })?;
    }
    engine.run_to_completion()?;

    let mut sequences: Vec<SequenceReport> = engine.finished().to_vec();
    sequences.sort_by(|a, b| a.id.cmp(&b.id));
    let ledger = engine.ledger();
    let decodes: Vec<usize> = ledger.steps.iter().map(|s| s.n_decoded).collect();
    let totals = RunTotals {
        sequences: sequences.len(),
        steps: ledger.steps.len() as u64,
        decoded: ledger.total_decoded(),
        decode_flops: ledger.steps.iter().map(|s| s.flops).sum(),
        prefill_flops: ledger.prefill_flops,
        total_flops: ledger.total_flops(),
        redundancy_ratio: ledger.redundancy_ratio(),
        histogram: histogram_decoded_per_step(&decodes, cfg.block_size),
        peak_pages: engine.peak_pages(),
    };
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: serde_json::to_value(cfg)?,
        model: model_json,
        sequences,
        totals: totals.clone(),
    };

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    let report_path = args.out.join("report.json");
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(args.out.join("steps.csv"), steps_to_csv(&ledger.steps))?;
    log::info!("wrote {}", report_path.display());
    match totals.redundancy_ratio {
        Some(r) => print_out(&format!(
            "{} sequences, {} steps, {} decoded, redundancy {:.4}\n",
            totals.sequences, totals.steps, totals.decoded, r
        )),
        None => print_out(&format!(
            "{} sequences, {} steps, {} decoded\n",
            totals.sequences, totals.steps, totals.decoded
        )),
    }
    Ok(())
}

fn cmd_gen_workload(args: GenArgs) -> anyhow::Result<()> {
    let prompt_len = parse_range(&args.prompt_len).context("--prompt-len")?;
    let target_len = parse_range(&args.target_len).context("--target-len")?;
    let rate = parse_range(&args.rate).context("--rate")?;
    let profile = args.scripted.then_some(ScriptedProfile {
        block_size: args.block_size,
        rate,
        vocab: args.trace_vocab,
        heads: args.trace_heads,
    });
    let mut reqs = gen_workload(args.n, prompt_len, target_len, args.seed, profile)?;

    fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    if args.scripted {
        fs::create_dir_all(args.out.join("traces"))?;
    }
    for req in &mut reqs {
        if let Some(trace) = &req.trace {
            let rel = format!("traces/{}.jsonl", req.entry.id);
            let file = File::create(args.out.join(&rel))?;
            trace.write_jsonl(BufWriter::new(file))?;
            req.entry.oracle = Some(rel);
        }
    }
    let entries: Vec<_> = reqs.into_iter().map(|r| r.entry).collect();
    let path = args.out.join("workload.jsonl");
    write_workload(BufWriter::new(File::create(&path)?), &entries)?;
    print_out(&format!(
        "wrote {} requests to {}\n",
        entries.len(),
        path.display()
    ));
    Ok(())
}

#[derive(Debug, Serialize)]
struct TheoryRow {
    gamma: f64,
    /// Monte-Carlo miss probability.
    empirical: f64,
    /// Exact tail value Q(gamma - 1).
    q: f64,
    /// Chernoff bound exp(-(gamma-1)^2 / 2).
    chernoff: f64,
    ci_low: f64,
    ci_high: f64,
    errors: u64,
    n: u64,
}

fn cmd_theory(args: TheoryArgs) -> anyhow::Result<()> {
    let mut rows = Vec::with_capacity(args.gamma.len());
    for &gamma in &args.gamma {
        let model = GaussianShiftModel::new(gamma, 1.0)?;
        let est = monte_carlo_p_err(&model, args.n, args.seed)?;
        rows.push(TheoryRow {
            gamma,
            empirical: est.p_err,
            q: q_function(gamma - 1.0),
            chernoff: chernoff_bound(gamma)?,
            ci_low: est.ci_low,
            ci_high: est.ci_high,
            errors: est.errors,
            n: est.n,
        });
    }
    print_out(&(serde_json::to_string_pretty(&rows)? + "\n"));
    Ok(())
}

fn load_report(path: &Path) -> anyhow::Result<RunReport> {
    let path = if path.is_dir() {
        path.join("report.json")
    } else {
        path.to_path_buf()
    };
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let report = serde_json::from_reader(BufReader::new(file))
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(report)
}

fn cmd_compare(args: CompareArgs) -> anyhow::Result<()> {
    let a = load_report(&args.baseline)?;
    let b = load_report(&args.candidate)?;
    if a.schema_version != b.schema_version {
        bail!(focus_core::Error::Config(format!(
            "report schema mismatch: {} vs {}",
            a.schema_version, b.schema_version
        )));
    }
    let fmt_ratio = |r: Option<f64>| match r {
        Some(r) => format!("{:.4}", r),
        None => "n/a".into(),
    };
    // Decoded tokens per million forward FLOPs: a throughput proxy that only
    // needs the ledger, not wall time.
    let proxy = |t: &RunTotals| {
        if t.total_flops == 0 {
            0.0
        } else {
            t.decoded as f64 / (t.total_flops as f64 / 1e6)
        }
    };
    let mut table = String::new();
    let mut row = |label: &str, left: String, right: String| {
        table.push_str(&format!("{:<24} {:>14} {:>14}\n", label, left, right));
    };
    row("", "baseline".into(), "candidate".into());
    row(
        "sequences",
        a.totals.sequences.to_string(),
        b.totals.sequences.to_string(),
    );
    row("steps", a.totals.steps.to_string(), b.totals.steps.to_string());
    row(
        "decoded",
        a.totals.decoded.to_string(),
        b.totals.decoded.to_string(),
    );
    row(
        "total flops",
        a.totals.total_flops.to_string(),
        b.totals.total_flops.to_string(),
    );
    row(
        "tokens per Mflop",
        format!("{:.4}", proxy(&a.totals)),
        format!("{:.4}", proxy(&b.totals)),
    );
    row(
        "redundancy ratio",
        fmt_ratio(a.totals.redundancy_ratio),
        fmt_ratio(b.totals.redundancy_ratio),
    );
    match (a.totals.redundancy_ratio, b.totals.redundancy_ratio) {
        (Some(base), Some(cand)) if base > 0.0 => {
            table.push_str(&format!(
                "redundancy reduction: {:.2}%\n",
                (1.0 - cand / base) * 100.0
            ));
        }
        _ => table.push_str("redundancy reduction: n/a\n"),
    }
    print_out(&table);
    Ok(())
}

/// Map an error chain onto the documented exit codes: configuration and
/// argument problems are 2, I/O and serialization are 4, everything the
/// engine itself refuses to do is 3.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<focus_core::Error>() {
            return match e {
                focus_core::Error::Config(_) | focus_core::Error::InvalidArgument(_) => 2,
                focus_core::Error::Io(_) | focus_core::Error::Json(_) => 4,
                _ => 3,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 4;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FOCUS_SIM_LOG", "warn"))
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::GenWorkload(args) => cmd_gen_workload(args),
        Command::Theory(args) => cmd_theory(args),
        Command::Compare(args) => cmd_compare(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Join the cause chain, skipping causes a wrapper already printed.
            let mut parts: Vec<String> = Vec::new();
            for cause in err.chain() {
                let msg = cause.to_string();
                if parts.last().is_none_or(|p| !p.ends_with(&msg)) {
                    parts.push(msg);
                }
            }
            eprintln!("error: {}", parts.join(": "));
            ExitCode::from(exit_code(&err))
        }
    }
}
