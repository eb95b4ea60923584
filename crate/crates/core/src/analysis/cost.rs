//! Latency-bandwidth-compute timing model.
//!
//! Times are reported in integer picosecond ticks so schedule identities hold
//! exactly; each primitive cost is rounded to a tick once, then only summed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ticks per second.
pub const TICKS_PER_SECOND: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// Seconds per message.
    pub alpha: f64,
    /// Seconds per byte.
    pub beta: f64,
    /// Seconds per floating-point operation.
    pub gamma: f64,
}

impl Default for CostModel {
    fn default() -> Self {
        Self {
            alpha: 1e-6,
            beta: 1e-10,
            gamma: 1e-11,
        }
    }
}

fn ticks(seconds: f64) -> u64 {
    (seconds * TICKS_PER_SECOND).round() as u64
}

impl CostModel {
    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self> {
        let m = Self { alpha, beta, gamma };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// `alpha + beta * bytes`, in seconds.
    pub fn comm_time(&self, bytes: u64) -> f64 {
        self.alpha + self.beta * bytes as f64
    }

    /// `gamma * flops`, in seconds.
    pub fn compute_time(&self, flops: u64) -> f64 {
        self.gamma * flops as f64
    }

    pub fn comm_ticks(&self, bytes: u64) -> u64 {
        ticks(self.comm_time(bytes))
    }

    pub fn compute_ticks(&self, flops: u64) -> u64 {
        ticks(self.compute_time(flops))
    }
}

/// FLOPs of one GEMM `[b, i] x [i, o]`.
pub fn gemm_flops(b: u64, i: u64, o: u64) -> u64 {
    2 * b * i * o
}

/// Per-worker compute time of a sharded GEMM run as `N` kernels of `(B/N, I, O/N)`,
/// each paying `launch_overhead` seconds.
pub fn sharded_gemm_time(
    b: u64,
    i: u64,
    o: u64,
    n: u64,
    cost: &CostModel,
    launch_overhead: f64,
) -> f64 {
    let kernel = cost.gamma * gemm_flops(b, i, o) as f64 / (n * n) as f64;
    n as f64 * (kernel + launch_overhead)
}

/// Rotation time of an `m`-byte parameter over `N` workers: `N-1` sends of `m/N` bytes.
pub fn rotation_comm_time(m: u64, n: u64, cost: &CostModel) -> f64 {
    n.saturating_sub(1) as f64 * cost.comm_time(m / n.max(1))
}

/// [`rotation_comm_time`] in ticks.
pub fn rotation_comm_ticks(m: u64, n: u64, cost: &CostModel) -> u64 {
    n.saturating_sub(1) * cost.comm_ticks(m / n.max(1))
}

/// Ring allgather of `m` bytes modelled step by step: each of the `N-1` rounds
/// every worker forwards one `m/N`-byte block to its clockwise neighbour, and a
/// round ends when its slowest transfer lands.
pub fn ring_allgather_ticks(m: u64, n: u64, cost: &CostModel) -> u64 {
    let n = n.max(1);
    let block = m / n;
    let mut clock = 0u64;
    for _round in 1..n {
        let round_end = (0..n)
            .map(|_| clock + cost.comm_ticks(block))
            .max()
            .unwrap_or(clock);
        clock = round_end;
    }
    clock
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_worker_has_no_communication() {
        let c = CostModel::default();
        assert_eq!(rotation_comm_time(1 << 20, 1, &c), 0.0);
        assert_eq!(ring_allgather_ticks(1 << 20, 1, &c), 0);
    }

    #[test]
    fn negative_parameters_rejected() {
        assert!(CostModel::new(-1.0, 0.0, 0.0).is_err());
        assert!(CostModel::new(0.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn ticks_round_to_picoseconds() {
        let c = CostModel::new(1e-6, 0.0, 0.0).unwrap();
        assert_eq!(c.comm_ticks(123), 1_000_000);
    }
}
