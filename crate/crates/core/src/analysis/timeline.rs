//! Logical-time simulation of one forward sweep under three schedules.
//!
//! All workers follow the same symmetric schedule, so every worker gets the
//! same event times. Communication events model a simultaneous send to the
//! clockwise neighbour and receive from the counter-clockwise one.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use super::cost::{rotation_comm_ticks, CostModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub enum Stream {
    Compute,
    Comm,
}

impl fmt::Display for Stream {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stream::Compute => "compute",
            Stream::Comm => "comm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Schedule {
    /// Gather the whole unit, then compute; the next unit's gather overlaps this compute.
    Fsdp,
    /// Blocking exchange between compute steps.
    RtpInplace,
    /// Prefetch of the next shard overlaps the current compute step.
    RtpOutofplace,
}

impl Schedule {
    pub const ALL: [Schedule; 3] = [
        Schedule::Fsdp,
        Schedule::RtpInplace,
        Schedule::RtpOutofplace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Schedule::Fsdp => "FSDP",
            Schedule::RtpInplace => "RTP-inplace",
            Schedule::RtpOutofplace => "RTP-outofplace",
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "fsdp" => Ok(Schedule::Fsdp),
            "rtpinplace" => Ok(Schedule::RtpInplace),
            "rtpoutofplace" | "rtpoutplace" | "rtp" => Ok(Schedule::RtpOutofplace),
            _ => Err(Error::Argument(format!("unknown schedule '{s}'"))),
        }
    }
}

/// One layer unit: FLOPs of one shard-step on one worker and the unit's full parameter bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct UnitCost {
    pub label: String,
    pub step_flops: u64,
    pub unit_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Event {
    pub worker: usize,
    pub stream: Stream,
    pub label: String,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Timeline {
    pub schedule: Schedule,
    pub n: usize,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimelineSummary {
    pub makespan: u64,
    pub startup: u64,
    pub idle: u64,
    pub idle_fraction: f64,
}

impl Timeline {
    pub fn makespan(&self) -> u64 {
        self.events.iter().map(|e| e.end).max().unwrap_or(0)
    }

    /// Start of the earliest compute event.
    pub fn startup(&self) -> u64 {
        self.events
            .iter()
            .filter(|e| e.stream == Stream::Compute)
            .map(|e| e.start)
            .min()
            .unwrap_or(0)
    }

    /// Ticks during which `worker`'s compute stream is not busy before the makespan.
    pub fn idle(&self, worker: usize) -> u64 {
        let busy: u64 = self
            .events
            .iter()
            .filter(|e| e.worker == worker && e.stream == Stream::Compute)
            .map(|e| e.end - e.start)
            .sum();
        self.makespan() - busy
    }

    pub fn summary(&self) -> TimelineSummary {
        let makespan = self.makespan();
        let idle: u64 = (0..self.n).map(|w| self.idle(w)).sum();
        let idle_fraction = if makespan == 0 {
            0.0
        } else {
            idle as f64 / (self.n as u64 * makespan) as f64
        };
        TimelineSummary {
            makespan,
            startup: self.startup(),
            idle,
            idle_fraction,
        }
    }

    /// Stream exclusivity and ring pairing: every transfer on worker `w` is
    /// mirrored by a receive on `w + 1` with the same label and interval.
    pub fn check(&self) -> Result<()> {
        let mut lanes: BTreeMap<(usize, Stream), Vec<&Event>> = BTreeMap::new();
        for e in &self.events {
            if e.end < e.start {
                return Err(Error::State(format!(
                    "event {} ends before it starts",
                    e.label
                )));
            }
            lanes.entry((e.worker, e.stream)).or_default().push(e);
        }
        for ((w, s), mut evs) in lanes {
            evs.sort_by_key(|e| (e.start, e.end));
            for pair in evs.windows(2) {
                if pair[1].start < pair[0].end {
                    return Err(Error::State(format!(
                        "worker {w} {s} stream: '{}' overlaps '{}'",
                        pair[0].label, pair[1].label
                    )));
                }
            }
        }
        for e in self.events.iter().filter(|e| e.stream == Stream::Comm) {
            let peer = (e.worker + 1) % self.n;
            let mirrored = self.events.iter().any(|f| {
                f.worker == peer
                    && f.stream == Stream::Comm
                    && f.label == e.label
                    && f.start == e.start
                    && f.end == e.end
            });
            if !mirrored {
                return Err(Error::State(format!(
                    "transfer '{}' from worker {} has no receive",
                    e.label, e.worker
                )));
            }
        }
        Ok(())
    }
}

/// Simulates one forward sweep over `units` on `n` workers.
pub fn simulate_timeline(
    schedule: Schedule,
    units: &[UnitCost],
    n: usize,
    cost: &CostModel,
) -> Result<Timeline> {
    if n == 0 {
        return Err(Error::Argument("worker count must be at least 1".into()));
    }
    cost.validate()?;
    let nn = n as u64;
    // Per-worker (stream, label, start, end) template, replicated over workers below.
    let mut plan: Vec<(Stream, String, u64, u64)> = Vec::new();
    match schedule {
        Schedule::RtpInplace => {
            let mut t = 0;
            for u in units {
                let c = cost.compute_ticks(u.step_flops);
                let m = cost.comm_ticks(u.unit_bytes / nn);
                for s in 0..n {
                    plan.push((Stream::Compute, format!("{}:compute{s}", u.label), t, t + c));
                    t += c;
                    if s + 1 < n {
                        plan.push((Stream::Comm, format!("{}:rotate{s}", u.label), t, t + m));
                        t += m;
                    }
                }
            }
        }
        Schedule::RtpOutofplace => {
            let mut t = 0;
            for u in units {
                let c = cost.compute_ticks(u.step_flops);
                let m = cost.comm_ticks(u.unit_bytes / nn);
                for s in 0..n {
                    plan.push((Stream::Compute, format!("{}:compute{s}", u.label), t, t + c));
                    if s + 1 < n {
                        plan.push((
                            Stream::Comm,
                            format!("{}:prefetch{}", u.label, s + 1),
                            t,
                            t + m,
                        ));
                        t += c.max(m);
                    } else {
                        t += c;
                    }
                }
            }
        }
        Schedule::Fsdp => {
            let mut gather_free = 0;
            let mut compute_free = 0;
            for u in units {
                let g = rotation_comm_ticks(u.unit_bytes, nn, cost);
                let c = nn * cost.compute_ticks(u.step_flops);
                let g_start = gather_free;
                let g_end = g_start + g;
                if n > 1 {
                    plan.push((
                        Stream::Comm,
                        format!("{}:allgather", u.label),
                        g_start,
                        g_end,
                    ));
                }
                let c_start = compute_free.max(g_end);
                plan.push((
                    Stream::Compute,
                    format!("{}:compute", u.label),
                    c_start,
                    c_start + c,
                ));
                // One-unit prefetch: the next gather may begin once this unit computes.
                gather_free = c_start.max(g_end);
                compute_free = c_start + c;
            }
        }
    }
    let events = (0..n)
        .flat_map(|worker| {
            plan.iter().map(move |(stream, label, start, end)| Event {
                worker,
                stream: *stream,
                label: label.clone(),
                start: *start,
                end: *end,
            })
        })
        .collect();
    Ok(Timeline {
        schedule,
        n,
        events,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(flops: u64, bytes: u64) -> UnitCost {
        UnitCost {
            label: "u".into(),
            step_flops: flops,
            unit_bytes: bytes,
        }
    }

    #[test]
    fn single_worker_has_no_transfers() {
        let c = CostModel::default();
        for s in Schedule::ALL {
            let t = simulate_timeline(s, &[unit(1000, 800)], 1, &c).unwrap();
            assert!(t.events.iter().all(|e| e.stream == Stream::Compute));
            t.check().unwrap();
        }
    }

    #[test]
    fn schedules_parse() {
        for s in Schedule::ALL {
            assert_eq!(s.name().parse::<Schedule>().unwrap(), s);
        }
    }
}
