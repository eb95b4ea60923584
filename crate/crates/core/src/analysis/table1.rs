//! Closed-form memory rows for seven parallelism strategies, total over all workers.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Strategy {
    NoParallelism,
    TensorParallel,
    DataParallel,
    PipelineParallel,
    Fsdp,
    Rtp,
    RtpInplace,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::NoParallelism,
        Strategy::TensorParallel,
        Strategy::DataParallel,
        Strategy::PipelineParallel,
        Strategy::Fsdp,
        Strategy::Rtp,
        Strategy::RtpInplace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::NoParallelism => "NoParallelism",
            Strategy::TensorParallel => "TensorParallel",
            Strategy::DataParallel => "DataParallel",
            Strategy::PipelineParallel => "PipelineParallel",
            Strategy::Fsdp => "FSDP",
            Strategy::Rtp => "RTP",
            Strategy::RtpInplace => "RTPInplace",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "noparallelism" | "none" | "serial" => Strategy::NoParallelism,
            "tensorparallel" | "tp" => Strategy::TensorParallel,
            "dataparallel" | "dp" | "ddp" => Strategy::DataParallel,
            "pipelineparallel" | "pp" | "pipeline" => Strategy::PipelineParallel,
            "fsdp" => Strategy::Fsdp,
            "rtp" | "rtpoutofplace" | "rtpoutplace" => Strategy::Rtp,
            "rtpinplace" => Strategy::RtpInplace,
            _ => return Err(Error::Argument(format!("unknown strategy '{s}'"))),
        })
    }
}

/// Byte totals for one serial replica: activations `a`, weights `w`, gradients `g`,
/// and the pipeline-stage boundary activation `ap`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct MemoryInputs {
    pub w: u64,
    pub g: u64,
    pub a: u64,
    pub ap: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Table1Row {
    pub strategy: Strategy,
    pub n: u64,
    pub activation: u64,
    pub param: u64,
    pub duplication: u64,
}

/// Evaluates one row of the memory table in exact integer arithmetic.
pub fn table1_memory(strategy: Strategy, m: MemoryInputs, n: u64) -> Result<Table1Row> {
    if n == 0 {
        return Err(Error::Argument("worker count must be at least 1".into()));
    }
    let MemoryInputs { w, g, a, ap } = m;
    let wg = w + g;
    let big = w.max(g);
    let (activation, param, duplication) = match strategy {
        Strategy::NoParallelism => (a, wg, 0),
        Strategy::TensorParallel => (a * n, wg, a * (n - 1)),
        Strategy::DataParallel => (a, wg * n, wg * (n - 1)),
        Strategy::PipelineParallel => (a + ap * n, wg, ap * n),
        Strategy::Fsdp => (a, wg + big * (n - 1), big * (n - 1)),
        Strategy::Rtp => (a, wg + big, big),
        Strategy::RtpInplace => (a, wg, 0),
    };
    Ok(Table1Row {
        strategy,
        n,
        activation,
        param,
        duplication,
    })
}

/// All seven rows in table order.
pub fn table1_all(m: MemoryInputs, n: u64) -> Result<Vec<Table1Row>> {
    Strategy::ALL
        .iter()
        .map(|&s| table1_memory(s, m, n))
        .collect()
}
