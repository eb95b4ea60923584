//! Experiment driver for the rotated tensor parallelism simulator.
//!
//! Every subcommand writes its data (CSV or JSON) to `--out` or stdout and a
//! short human summary to stderr. Exit codes: 0 success, 1 tolerance breach or
//! failed check, 2 configuration error.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use rtp_core::analysis::{
    batch_sweep, collinear, ledger_run, simulate_timeline, table1_all, unit_costs, CostModel,
    MemoryInputs, RunStrategy, Schedule,
};
use rtp_core::config::{preset, presets, ModelConfig};
use rtp_core::layers::build_rtp_transformer;
use rtp_core::ring::{RotationMode, TransportKind};
use rtp_core::verify::{
    check_equivalence, gradient_check, mode_name, EquivalenceReport, Fault, FD_TOL, GRAD_TOL,
    OUTPUT_TOL,
};

/// Bytes per element of every numerical run.
pub const ELEMENT_BYTES: u64 = 8;
pub const DEFAULT_WORKERS: usize = 4;
pub const DEFAULT_GLOBAL_BATCH: usize = 8;
pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_SWEEP: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Parser)]
#[command(
    name = "rtp-sim",
    version,
    about = "Rotated tensor parallelism simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rotated model vs serial reference, plus finite-difference gradient checks.
    Verify(VerifyArgs),
    /// Analytic memory table for seven parallelism strategies.
    Memtable(MemtableArgs),
    /// Instrumented per-worker peaks and duplication against the serial run.
    Ledger(CommonArgs),
    /// Logical-time timelines of FSDP and both rotation variants.
    Timeline(CommonArgs),
    /// Peak memory against batch size.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// Flat JSON experiment file; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Named model shape (see `--preset list`).
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long, visible_alias = "n-workers")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub strategy: Option<String>,
    /// Global batch in samples.
    #[arg(long, visible_alias = "batch-size")]
    pub batch: Option<usize>,
    #[arg(long, env = "RTP_SIM_SEED")]
    pub seed: Option<u64>,
    /// lockstep or concurrent.
    #[arg(long)]
    pub transport: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub attention_heads: Option<usize>,
    #[arg(long)]
    pub hidden_size: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub sequence_length: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub embedding_size: Option<usize>,
    /// Use mixture-of-experts blocks.
    #[arg(long)]
    pub moe: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Parameters checked against central differences.
    #[arg(long, default_value_t = 200)]
    pub fd_samples: usize,
    /// Test hook: mislabel one resident shard, given as RANK:UNIT.
    #[arg(long, hide = true)]
    pub fault_corrupt_shard: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct MemtableArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Weight bytes; with --g and --a replaces the model-derived values.
    #[arg(long)]
    pub w: Option<u64>,
    #[arg(long)]
    pub g: Option<u64>,
    #[arg(long)]
    pub a: Option<u64>,
    /// Pipeline-stage boundary activation bytes.
    #[arg(long)]
    pub ap: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Samples per worker, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub batches: Option<Vec<usize>>,
}

/// Flat JSON file schema; every field optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub attention_heads: Option<usize>,
    pub hidden_size: Option<usize>,
    pub layers: Option<usize>,
    pub sequence_length: Option<usize>,
    pub vocab_size: Option<usize>,
    pub embedding_size: Option<usize>,
    pub moe: Option<bool>,
    pub n_workers: Option<usize>,
    pub strategy: Option<String>,
    pub batch_size: Option<usize>,
    pub seed: Option<u64>,
    pub transport: Option<String>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub gamma: Option<f64>,
}

/// Failure classes, mapped to exit codes by [`CliError::exit_code`].
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Breach(String),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Breach(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => f.write_str(m),
            CliError::Breach(m) => write!(f, "check failed: {m}"),
            CliError::Runtime(e) => write!(f, "error: {e:#}"),
        }
    }
}

impl From<rtp_core::Error> for CliError {
    fn from(e: rtp_core::Error) -> Self {
        match e {
            rtp_core::Error::Config(_)
            | rtp_core::Error::Argument(_)
            | rtp_core::Error::Index { .. } => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Fully resolved experiment settings.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub model: ModelConfig,
    pub analytic_only: bool,
    pub n: usize,
    pub strategy: Option<String>,
    pub global_batch: usize,
    pub seed: u64,
    pub transport: TransportKind,
    pub cost: CostModel,
}

impl Experiment {
    /// Samples per worker; the global batch must split evenly.
    pub fn per_worker(&self) -> CliResult<usize> {
        if self.global_batch == 0 || !self.global_batch.is_multiple_of(self.n) {
            return Err(CliError::Config(format!(
                "configuration error: global batch {} cannot be split evenly over {} workers; use a multiple of {}",
                self.global_batch, self.n, self.n
            )));
        }
        Ok(self.global_batch / self.n)
    }

    /// Divisibility checks needed before the model can be sharded over `n` workers.
    pub fn require_shardable(&self) -> CliResult<()> {
        self.model.validate(self.n)?;
        Ok(())
    }

    fn require_executable(&self) -> CliResult<()> {
        self.require_shardable()?;
        if self.analytic_only {
            return Err(CliError::Config(
                "configuration error: this preset is for analytic memory tables only; pick an executable preset such as 'toy'".into(),
            ));
        }
        Ok(())
    }
}

fn parse_transport(s: &str) -> CliResult<TransportKind> {
    match s.to_ascii_lowercase().as_str() {
        "lockstep" => Ok(TransportKind::Lockstep),
        "concurrent" => Ok(TransportKind::concurrent()),
        _ => Err(CliError::Config(format!(
            "configuration error: unknown transport '{s}'; use lockstep or concurrent"
        ))),
    }
}

/// Merges defaults, the JSON file and flags, in increasing precedence.
pub fn resolve(args: &CommonArgs) -> CliResult<Experiment> {
    let file = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Config(format!("configuration error: {}: {e}", path.display()))
            })?;
            serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| {
                CliError::Config(format!("configuration error: {}: {e}", path.display()))
            })?
        }
        None => ExperimentConfig::default(),
    };
    let preset_name = args
        .preset
        .clone()
        .or(file.preset.clone())
        .unwrap_or_else(|| "toy".into());
    let base = preset(&preset_name).ok_or_else(|| {
        let names: Vec<&str> = presets().iter().map(|p| p.name).collect();
        CliError::Config(format!(
            "configuration error: unknown preset '{preset_name}'; available: {}",
            names.join(", ")
        ))
    })?;
    let mut model = base.config.clone();
    let pick =
        |flag: Option<usize>, file: Option<usize>, dflt: usize| flag.or(file).unwrap_or(dflt);
    model.attention_heads = pick(
        args.attention_heads,
        file.attention_heads,
        model.attention_heads,
    );
    model.hidden_size = pick(args.hidden_size, file.hidden_size, model.hidden_size);
    model.layers = pick(args.layers, file.layers, model.layers);
    model.sequence_length = pick(
        args.sequence_length,
        file.sequence_length,
        model.sequence_length,
    );
    model.vocab_size = pick(args.vocab_size, file.vocab_size, model.vocab_size);
    model.embedding_size = pick(
        args.embedding_size,
        file.embedding_size,
        model.embedding_size,
    );
    model.moe = args.moe || file.moe.unwrap_or(model.moe);
    let n = pick(args.workers, file.n_workers, DEFAULT_WORKERS);
    if n == 0 {
        return Err(CliError::Config(
            "configuration error: --workers must be at least 1".into(),
        ));
    }
    let defaults = CostModel::default();
    let cost = CostModel::new(
        args.alpha.or(file.alpha).unwrap_or(defaults.alpha),
        args.beta.or(file.beta).unwrap_or(defaults.beta),
        args.gamma.or(file.gamma).unwrap_or(defaults.gamma),
    )?;
    let transport = parse_transport(
        args.transport
            .as_deref()
            .or(file.transport.as_deref())
            .unwrap_or("lockstep"),
    )?;
    Ok(Experiment {
        model,
        analytic_only: base.analytic_only,
        n,
        strategy: args.strategy.clone().or(file.strategy),
        global_batch: pick(args.batch, file.batch_size, DEFAULT_GLOBAL_BATCH),
        seed: args.seed.or(file.seed).unwrap_or(DEFAULT_SEED),
        transport,
        cost,
    })
}

fn sink(out: &Option<PathBuf>) -> CliResult<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout()),
    })
}

/// Serialises `rows` with a header line; column order follows the struct fields.
pub fn write_csv<W: Write, R: Serialize>(w: W, rows: &[R]) -> CliResult<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).context("writing CSV")?;
    }
    wr.flush().context("writing CSV")?;
    Ok(())
}

fn emit_csv<R: Serialize>(out: &Option<PathBuf>, rows: &[R]) -> CliResult<()> {
    write_csv(sink(out)?, rows)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MemtableRow {
    pub strategy: String,
    #[serde(rename = "N")]
    pub n: u64,
    pub activation_bytes: u64,
    pub param_bytes: u64,
    pub duplication_bytes: u64,
}

/// Seven analytic rows for `n` workers.
pub fn memtable(inputs: MemoryInputs, n: u64) -> CliResult<Vec<MemtableRow>> {
    Ok(table1_all(inputs, n)?
        .into_iter()
        .map(|r| MemtableRow {
            strategy: r.strategy.name().into(),
            n: r.n,
            activation_bytes: r.activation,
            param_bytes: r.param,
            duplication_bytes: r.duplication,
        })
        .collect())
}

/// Byte totals of one serial replica of `model` on `global_batch` samples.
pub fn model_memory(model: &ModelConfig, n: usize, global_batch: usize) -> MemoryInputs {
    let experts = if model.moe { n } else { 1 };
    let w = model.param_count(experts) * ELEMENT_BYTES;
    let b = global_batch as u64;
    MemoryInputs {
        w,
        g: w,
        a: model.activation_elements_per_sample() * b * ELEMENT_BYTES,
        ap: model.boundary_elements_per_sample() * b * ELEMENT_BYTES,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TimelineRow {
    pub worker: usize,
    pub stream: String,
    pub label: String,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SweepRow {
    pub strategy: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub batch: usize,
    pub global_batch: usize,
    pub peak_bytes: u64,
    pub activation_bytes: u64,
}

fn run_strategies(exp: &Experiment, with_serial: bool) -> CliResult<Vec<RunStrategy>> {
    match &exp.strategy {
        Some(s) => Ok(vec![s.parse::<RunStrategy>()?]),
        None if with_serial => Ok(RunStrategy::ALL.to_vec()),
        None => Ok(vec![RunStrategy::RtpInplace, RunStrategy::RtpOutofplace]),
    }
}

fn schedules(exp: &Experiment) -> CliResult<Vec<Schedule>> {
    match &exp.strategy {
        Some(s) => Ok(vec![s.parse::<Schedule>()?]),
        None => Ok(Schedule::ALL.to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradSummary {
    pub samples: usize,
    pub per_kind: Vec<(String, f64)>,
    pub max_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub status: String,
    pub n: usize,
    pub global_batch: usize,
    pub model: ModelConfig,
    pub tolerances: [(String, f64); 3],
    pub equivalence: Vec<EquivalenceReport>,
    pub gradient_check: Option<GradSummary>,
    pub error: Option<String>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.status == "PASS"
    }
}

fn parse_fault(s: &str) -> CliResult<Fault> {
    let (r, u) = s.split_once(':').ok_or_else(|| {
        CliError::Config(format!("configuration error: fault '{s}' is not RANK:UNIT"))
    })?;
    let num = |v: &str| {
        v.trim().parse::<usize>().map_err(|_| {
            CliError::Config(format!("configuration error: fault '{s}' is not RANK:UNIT"))
        })
    };
    Ok(Fault::CorruptShard {
        rank: num(r)?,
        unit: num(u)?,
    })
}

/// Runs every equivalence and gradient check; a protocol failure becomes a FAIL report.
pub fn verify(
    exp: &Experiment,
    fd_samples: usize,
    fault: Option<Fault>,
) -> CliResult<VerifyReport> {
    exp.require_executable()?;
    let per_worker = exp.per_worker()?;
    let modes = match &exp.strategy {
        Some(s) => vec![s.parse::<RunStrategy>()?.mode().ok_or_else(|| {
            CliError::Config("configuration error: verify compares a rotated strategy against the serial run; pick RTP-inplace or RTP-outofplace".into())
        })?],
        None => vec![RotationMode::InPlace, RotationMode::OutOfPlace],
    };
    if let Some(Fault::CorruptShard { rank, unit }) = fault {
        let units = build_rtp_transformer(&exp.model, exp.n)?.units.len();
        if rank >= exp.n || unit >= units {
            return Err(CliError::Config(format!("configuration error: fault target {rank}:{unit} is outside {} workers x {units} units", exp.n)));
        }
    }
    let mut report = VerifyReport {
        status: "PASS".into(),
        n: exp.n,
        global_batch: exp.global_batch,
        model: exp.model.clone(),
        tolerances: [
            ("output".into(), OUTPUT_TOL),
            ("gradient".into(), GRAD_TOL),
            ("finite_difference".into(), FD_TOL),
        ],
        equivalence: Vec::new(),
        gradient_check: None,
        error: None,
    };
    for mode in modes {
        match check_equivalence(
            &exp.model,
            exp.n,
            mode,
            exp.transport,
            per_worker,
            exp.seed,
            fault,
        ) {
            Ok(r) => report.equivalence.push(r),
            Err(e @ (rtp_core::Error::Protocol(_) | rtp_core::Error::State(_))) => {
                report.status = "FAIL".into();
                report.error = Some(format!("{}: {e}", mode_name(mode)));
                return Ok(report);
            }
            Err(e) => return Err(e.into()),
        }
    }
    if fd_samples > 0 {
        let g = gradient_check(
            &exp.model,
            exp.n,
            RotationMode::OutOfPlace,
            per_worker.min(2),
            exp.seed,
            fd_samples,
        )?;
        report.gradient_check = Some(GradSummary {
            samples: g.samples.len(),
            per_kind: g
                .per_kind
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            max_rel: g.max_rel,
        });
    }
    let ok = report.equivalence.iter().all(EquivalenceReport::passed)
        && report
            .gradient_check
            .as_ref()
            .is_none_or(|g| g.max_rel < FD_TOL);
    if !ok {
        report.status = "FAIL".into();
    }
    Ok(report)
}

pub fn ledger(exp: &Experiment) -> CliResult<Vec<rtp_core::analysis::LedgerRow>> {
    exp.require_executable()?;
    let per_worker = exp.per_worker()?;
    let mut rows = Vec::new();
    for s in run_strategies(exp, true)? {
        rows.extend(
            ledger_run::<f64>(&exp.model, s, exp.n, per_worker, exp.seed, exp.transport)?.rows(),
        );
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimelineReport {
    pub schedule: String,
    pub makespan: u64,
    pub startup: u64,
    pub idle_fraction: f64,
}

/// Events of every selected schedule; labels are prefixed with the schedule name.
pub fn timeline(exp: &Experiment) -> CliResult<(Vec<TimelineRow>, Vec<TimelineReport>)> {
    exp.require_shardable()?;
    let per_worker = exp.per_worker()?;
    let stack = build_rtp_transformer(&exp.model, exp.n)?;
    let units = unit_costs(&stack, per_worker, ELEMENT_BYTES);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for s in schedules(exp)? {
        let t = simulate_timeline(s, &units, exp.n, &exp.cost)?;
        t.check()?;
        let sm = t.summary();
        summary.push(TimelineReport {
            schedule: s.name().into(),
            makespan: sm.makespan,
            startup: sm.startup,
            idle_fraction: sm.idle_fraction,
        });
        rows.extend(t.events.into_iter().map(|e| TimelineRow {
            worker: e.worker,
            stream: e.stream.to_string(),
            label: format!("{}:{}", s.name(), e.label),
            start: e.start,
            end: e.end,
        }));
    }
    Ok((rows, summary))
}

/// Sweep rows plus, per strategy, whether the points are collinear.
pub fn sweep(
    exp: &Experiment,
    batches: &[usize],
) -> CliResult<(Vec<SweepRow>, Vec<(String, bool)>)> {
    exp.require_executable()?;
    if batches.is_empty() || batches.contains(&0) {
        return Err(CliError::Config(
            "configuration error: sweep batches must be positive".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for s in run_strategies(exp, false)? {
        let pts = batch_sweep::<f64>(&exp.model, s, exp.n, batches, exp.seed, exp.transport)?;
        lines.push((s.name().to_string(), collinear(&pts)));
        let n = if s == RunStrategy::Serial { 1 } else { exp.n };
        rows.extend(pts.into_iter().map(|p| SweepRow {
            strategy: s.name().into(),
            n,
            batch: p.batch,
            global_batch: p.global_batch,
            peak_bytes: p.peak_bytes,
            activation_bytes: p.activation_bytes,
        }));
    }
    Ok((rows, lines))
}

fn write_json<T: Serialize>(out: &Option<PathBuf>, value: &T) -> CliResult<()> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value).context("writing JSON")?;
    writeln!(w).context("writing JSON")?;
    Ok(())
}

fn execute(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Verify(a) => {
            let exp = resolve(&a.common)?;
            let fault = a
                .fault_corrupt_shard
                .as_deref()
                .map(parse_fault)
                .transpose()?;
            let report = verify(&exp, a.fd_samples, fault)?;
            write_json(&a.common.out, &report)?;
            eprintln!("verify N={}: {}", exp.n, report.status);
            if let Some(e) = &report.error {
                eprintln!("{e}");
            }
            if !report.passed() {
                return Err(CliError::Breach("verification failed".into()));
            }
        }
        Command::Memtable(a) => {
            let exp = resolve(&a.common)?;
            let inputs = match (a.w, a.g, a.a) {
                (Some(w), Some(g), Some(act)) => MemoryInputs {
                    w,
                    g,
                    a: act,
                    ap: a.ap.unwrap_or(0),
                },
                (None, None, None) if a.ap.is_none() => {
                    model_memory(&exp.model, exp.n, exp.global_batch)
                }
                _ => {
                    return Err(CliError::Config(
                        "configuration error: give --w, --g and --a together (--ap optional)"
                            .into(),
                    ))
                }
            };
            let rows = memtable(inputs, exp.n as u64)?;
            emit_csv(&a.common.out, &rows)?;
            eprintln!(
                "memtable N={}: W={} G={} A={} A_p={}",
                exp.n, inputs.w, inputs.g, inputs.a, inputs.ap
            );
        }
        Command::Ledger(a) => {
            let exp = resolve(a)?;
            let rows = ledger(&exp)?;
            emit_csv(&a.out, &rows)?;
            eprintln!("ledger N={}: {} rows", exp.n, rows.len());
        }
        Command::Timeline(a) => {
            let exp = resolve(a)?;
            let (rows, summary) = timeline(&exp)?;
            emit_csv(&a.out, &rows)?;
            for s in summary {
                eprintln!(
                    "{}: makespan={} startup={} idle_fraction={:.6}",
                    s.schedule, s.makespan, s.startup, s.idle_fraction
                );
            }
        }
        Command::Sweep(a) => {
            let exp = resolve(&a.common)?;
            let batches = a.batches.clone().unwrap_or_else(|| DEFAULT_SWEEP.to_vec());
            let (rows, lines) = sweep(&exp, &batches)?;
            emit_csv(&a.common.out, &rows)?;
            let mut straight = true;
            for (s, ok) in lines {
                eprintln!("{s}: {}", if ok { "collinear" } else { "NOT collinear" });
                straight &= ok;
            }
            if !straight {
                return Err(CliError::Breach("sweep points are not collinear".into()));
            }
        }
    }
    Ok(())
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: &Cli) -> i32 {
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

/// Reads an experiment file, for callers that want the raw schema.
pub fn read_experiment(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("configuration error: {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Config(format!("configuration error: {}: {e}", path.display())))
}
