//! Instrumented training steps: per-worker ledgers, duplication against the
//! serial run, batch sweeps, and per-unit costs for the timeline simulator.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::ledger::{duplication, Category, MemoryLedger};
use super::timeline::UnitCost;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::serial::SerialModel;
use crate::layers::{build_rtp_transformer, Batch, RtpTransformer, Stack, UnitKind};
use crate::ring::{RotationMode, TransportKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RunStrategy {
    Serial,
    RtpInplace,
    RtpOutofplace,
}

impl RunStrategy {
    pub const ALL: [RunStrategy; 3] = [
        RunStrategy::Serial,
        RunStrategy::RtpInplace,
        RunStrategy::RtpOutofplace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RunStrategy::Serial => "serial",
            RunStrategy::RtpInplace => "RTP-inplace",
            RunStrategy::RtpOutofplace => "RTP-outofplace",
        }
    }

    pub fn mode(self) -> Option<RotationMode> {
        match self {
            RunStrategy::Serial => None,
            RunStrategy::RtpInplace => Some(RotationMode::InPlace),
            RunStrategy::RtpOutofplace => Some(RotationMode::OutOfPlace),
        }
    }
}

impl fmt::Display for RunStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RunStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "serial" | "noparallelism" => Ok(RunStrategy::Serial),
            "rtpinplace" => Ok(RunStrategy::RtpInplace),
            "rtpoutofplace" | "rtpoutplace" | "rtp" => Ok(RunStrategy::RtpOutofplace),
            _ => Err(Error::Argument(format!("unknown run strategy '{s}'"))),
        }
    }
}

/// Ledgers of one instrumented training step and of the serial baseline on the same global batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LedgerRun {
    pub strategy: RunStrategy,
    /// Workers in the run (1 for the serial strategy).
    pub n: usize,
    pub samples_per_worker: usize,
    pub workers: Vec<MemoryLedger>,
    pub serial: MemoryLedger,
    pub stack: Stack,
    pub element_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LedgerRow {
    pub strategy: String,
    #[serde(rename = "N")]
    pub n: usize,
    pub category: String,
    pub peak_bytes: u64,
    pub duplication: i64,
}

/// Runs one training step of `config` on `n` workers with `samples_per_worker`
/// samples each, alongside the serial baseline on the gathered batch.
pub fn ledger_run<T: Scalar>(
    config: &ModelConfig,
    strategy: RunStrategy,
    n: usize,
    samples_per_worker: usize,
    seed: u64,
    transport: TransportKind,
) -> Result<LedgerRun> {
    if samples_per_worker == 0 {
        return Err(Error::Config(
            "batch must be at least one sample per worker".into(),
        ));
    }
    let stack = build_rtp_transformer(config, n)?;
    let params = stack.init_params::<T>(seed);
    let batch = Batch::<T>::random(config, samples_per_worker * n, seed);
    let mut serial = SerialModel::new(&stack, params.clone())?;
    serial.train_step(&batch)?;
    let (run_n, workers) = match strategy.mode() {
        None => (1, vec![serial.ledger.clone()]),
        Some(mode) => {
            let mut rtp = RtpTransformer::new(stack.clone(), &params, mode, transport)?;
            rtp.train_step(&batch)?;
            (
                n,
                rtp.engine()
                    .workers()
                    .iter()
                    .map(|w| w.ledger.clone())
                    .collect(),
            )
        }
    };
    Ok(LedgerRun {
        strategy,
        n: run_n,
        samples_per_worker,
        workers,
        serial: serial.ledger,
        stack,
        element_bytes: T::bytes(),
    })
}

impl LedgerRun {
    fn worst(&self, f: impl Fn(&MemoryLedger) -> u64) -> u64 {
        self.workers.iter().map(f).max().unwrap_or(0)
    }

    pub fn peak(&self, cat: Category) -> u64 {
        self.worst(|l| l.peak(cat))
    }

    /// Peak of Param + Grad + CommBuffer on the worst worker.
    pub fn peak_state(&self) -> u64 {
        self.worst(MemoryLedger::peak_state)
    }

    /// Peak of every category except `Other` on the worst worker.
    pub fn peak_tracked(&self) -> u64 {
        self.worst(MemoryLedger::peak_tracked)
    }

    pub fn in_flight_peak(&self) -> u64 {
        self.worst(MemoryLedger::in_flight_peak)
    }

    /// Padded bytes of each unit's sharded parameters, in unit order.
    pub fn unit_bytes(&self) -> Vec<u64> {
        self.stack
            .units
            .iter()
            .map(|u| u.layout.total_len() as u64 * self.element_bytes)
            .collect()
    }

    /// Rows: one per category, then `Param+Grad`, `ParamState` and `Tracked` aggregates.
    pub fn rows(&self) -> Vec<LedgerRow> {
        let s = &self.serial;
        let mut out: Vec<(String, u64, u64)> = Category::ALL
            .iter()
            .map(|&c| (c.to_string(), self.peak(c), s.peak(c)))
            .collect();
        out.push((
            "Param+Grad".into(),
            self.peak(Category::Param) + self.peak(Category::Grad),
            s.peak(Category::Param) + s.peak(Category::Grad),
        ));
        out.push(("ParamState".into(), self.peak_state(), s.peak_state()));
        out.push(("Tracked".into(), self.peak_tracked(), s.peak_tracked()));
        out.into_iter()
            .map(|(category, peak, serial)| LedgerRow {
                strategy: self.strategy.name().into(),
                n: self.n,
                category,
                peak_bytes: peak,
                duplication: duplication(self.n, peak, serial),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SweepPoint {
    /// Samples per worker.
    pub batch: usize,
    pub global_batch: usize,
    /// Worst-worker peak of all tracked categories.
    pub peak_bytes: u64,
    pub activation_bytes: u64,
}

/// One instrumented step per per-worker batch size.
pub fn batch_sweep<T: Scalar>(
    config: &ModelConfig,
    strategy: RunStrategy,
    n: usize,
    batches: &[usize],
    seed: u64,
    transport: TransportKind,
) -> Result<Vec<SweepPoint>> {
    batches
        .iter()
        .map(|&b| {
            let run = ledger_run::<T>(config, strategy, n, b, seed, transport)?;
            Ok(SweepPoint {
                batch: b,
                global_batch: b * run.n,
                peak_bytes: run.peak_tracked(),
                activation_bytes: run.peak(Category::Activation),
            })
        })
        .collect()
}

/// Exact collinearity of `(global_batch, peak_bytes)` by integer cross products.
pub fn collinear(points: &[SweepPoint]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let (x0, y0) = (points[0].global_batch as i128, points[0].peak_bytes as i128);
    let (x1, y1) = (points[1].global_batch as i128, points[1].peak_bytes as i128);
    points[2..].iter().all(|p| {
        let (x, y) = (p.global_batch as i128, p.peak_bytes as i128);
        (y1 - y0) * (x - x0) == (y - y0) * (x1 - x0)
    })
}

/// Slope of peak bytes per global sample as a reduced fraction `(num, den)`.
pub fn slope(points: &[SweepPoint]) -> Option<(i128, i128)> {
    let (a, b) = (points.first()?, points.last()?);
    let dx = b.global_batch as i128 - a.global_batch as i128;
    if dx == 0 {
        return None;
    }
    let dy = b.peak_bytes as i128 - a.peak_bytes as i128;
    let g = gcd(dy.abs(), dx.abs()).max(1);
    Some((dy / g, dx / g))
}

fn gcd(a: i128, b: i128) -> i128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Per-worker FLOPs of one shard-step of every unit, for `samples` samples per worker.
/// Embedding lookups count one operation per copied element; expert load is assumed uniform.
pub fn unit_costs(stack: &Stack, samples: usize, element_bytes: u64) -> Vec<UnitCost> {
    let n = stack.n as u64;
    let seq = stack.config.sequence_length as u64;
    let rows = samples as u64 * seq;
    stack
        .units
        .iter()
        .map(|u| {
            let step_flops = match u.kind {
                UnitKind::Embedding { dim, .. } => rows * dim as u64 / n,
                UnitKind::Linear {
                    input,
                    output,
                    matrices,
                    ..
                } => 2 * rows * input as u64 * (output as u64 / n) * matrices as u64,
                UnitKind::Attention { hidden, heads, seq } => {
                    let (h, s) = (hidden as u64, seq as u64);
                    let d = h / heads as u64;
                    let local_heads = heads as u64 / n;
                    let proj = 3 * 2 * rows * h * (h / n) + 2 * rows * (h / n) * h;
                    let core = samples as u64 * local_heads * 2 * 2 * s * s * d;
                    proj + core
                }
                UnitKind::Moe { hidden, ffn, .. } => {
                    2 * 2 * (rows / n) * hidden as u64 * ffn as u64
                }
            };
            UnitCost {
                label: u.name.clone(),
                step_flops,
                unit_bytes: u.layout.total_len() as u64 * element_bytes,
            }
        })
        .collect()
}
