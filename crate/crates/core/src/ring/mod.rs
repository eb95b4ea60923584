//! Ring of workers exchanging weight shards.
//!
//! Clockwise moves a payload from rank `i` to rank `(i + 1) mod N`. Every slot
//! carries a `rotation_offset` counting net clockwise steps, and the position
//! law `logical_id == (rank - rotation_offset) mod N` holds after every step.
//!
//! Layer code and the group API both describe work as a list of [`Op`]s; the
//! [`transport`] executes that list either in one control flow (lockstep) or
//! with one thread per worker over rendezvous channels (concurrent).

mod exchange;
pub mod group;
pub mod schedule;
pub mod transport;

use serde::Serialize;

use crate::analysis::MemoryLedger;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use group::{RingWorker, WorkerGroup};
pub use schedule::{backward_schedule, forward_schedule, Op, Payload};
pub use transport::{ConcurrentTransport, TransportKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Direction {
    Clockwise,
    CounterClockwise,
}

impl Direction {
    /// Rank that receives what `rank` sends.
    pub fn dest(self, rank: usize, n: usize) -> usize {
        match self {
            Direction::Clockwise => (rank + 1) % n,
            Direction::CounterClockwise => (rank + n - 1) % n,
        }
    }

    /// Rank whose payload `rank` receives.
    pub fn source(self, rank: usize, n: usize) -> usize {
        self.reverse().dest(rank, n)
    }

    pub fn reverse(self) -> Self {
        match self {
            Direction::Clockwise => Direction::CounterClockwise,
            Direction::CounterClockwise => Direction::Clockwise,
        }
    }

    pub fn offset_delta(self) -> i64 {
        match self {
            Direction::Clockwise => 1,
            Direction::CounterClockwise => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RotationMode {
    /// Blocking buffer swap; no extra storage.
    InPlace,
    /// Receive into a spare shard buffer while the resident shard stays readable.
    OutOfPlace,
}

/// The single shard a worker holds for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardSlot<T> {
    pub weight: Tensor<T>,
    pub grad_acc: Tensor<T>,
    pub logical_id: usize,
    pub rotation_offset: i64,
}

impl<T: Scalar> ShardSlot<T> {
    /// Slot at its home position with a zeroed accumulator.
    pub fn home(rank: usize, weight: Tensor<T>) -> Self {
        let grad_acc = Tensor::zeros(weight.shape());
        Self {
            weight,
            grad_acc,
            logical_id: rank,
            rotation_offset: 0,
        }
    }

    /// Logical id the position law predicts for `rank` after `offset` net clockwise steps.
    pub fn expected_id(rank: usize, offset: i64, n: usize) -> usize {
        (rank as i64 - offset).rem_euclid(n as i64) as usize
    }

    pub fn bytes(&self) -> u64 {
        self.weight.bytes() + self.grad_acc.bytes()
    }
}

/// Point-to-point message. `tag` is the sender's exchange counter.
#[derive(Debug)]
pub struct Message<T> {
    pub tag: u64,
    pub from: usize,
    pub logical_id: usize,
    pub rotation_offset: i64,
    pub weight: Option<Tensor<T>>,
    pub grad: Option<Tensor<T>>,
}

impl<T: Scalar> Message<T> {
    pub fn elements(&self) -> usize {
        self.weight.as_ref().map_or(0, Tensor::len) + self.grad.as_ref().map_or(0, Tensor::len)
    }

    pub fn bytes(&self) -> u64 {
        self.elements() as u64 * T::bytes()
    }
}

/// Receive buffer of an out-of-place rotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Spare<T> {
    pub weight: Tensor<T>,
    pub logical_id: usize,
    pub rotation_offset: i64,
    pub filled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum CommKind {
    Rotation,
    AllGather,
    AllToAll,
}

impl CommKind {
    fn idx(self) -> usize {
        self as usize
    }
}

/// Messages and elements sent, by collective kind.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommStats {
    messages: [u64; 3],
    elements: [u64; 3],
}

impl CommStats {
    pub fn record(&mut self, kind: CommKind, elements: usize) {
        self.messages[kind.idx()] += 1;
        self.elements[kind.idx()] += elements as u64;
    }

    pub fn messages(&self, kind: CommKind) -> u64 {
        self.messages[kind.idx()]
    }

    pub fn elements(&self, kind: CommKind) -> u64 {
        self.elements[kind.idx()]
    }

    pub fn merge(&mut self, other: &CommStats) {
        for i in 0..3 {
            self.messages[i] += other.messages[i];
            self.elements[i] += other.elements[i];
        }
    }
}

/// Per-worker, per-layer communication state: step tag, optional spare, counters.
#[derive(Debug, Clone, PartialEq)]
pub struct RingPort<T> {
    tag: u64,
    spare: Option<Spare<T>>,
    kind: CommKind,
    stats: CommStats,
}

impl<T: Scalar> RingPort<T> {
    pub fn new(kind: CommKind) -> Self {
        Self {
            tag: 0,
            spare: None,
            kind,
            stats: CommStats::default(),
        }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn stats(&self) -> &CommStats {
        &self.stats
    }

    pub fn spare(&self) -> Option<&Spare<T>> {
        self.spare.as_ref()
    }

    pub fn has_spare(&self) -> bool {
        self.spare.is_some()
    }

    /// Adds traffic performed on this worker's behalf by a scratch collective.
    pub fn merge_stats(&mut self, other: &CommStats) {
        self.stats.merge(other);
    }

    /// Registers `buffer` as the receive buffer; it must match the resident shard size.
    pub fn install_spare(
        &mut self,
        buffer: Tensor<T>,
        resident: &Tensor<T>,
        ledger: &mut MemoryLedger,
        unit: usize,
    ) -> Result<()> {
        if self.spare.is_some() {
            return Err(Error::State("spare buffer already installed".into()));
        }
        if buffer.len() != resident.len() {
            return Err(Error::Argument(format!(
                "buffer size mismatch: spare has {} elements, shard has {}",
                buffer.len(),
                resident.len()
            )));
        }
        ledger.alloc_unit(unit, crate::analysis::Category::CommBuffer, buffer.bytes());
        self.spare = Some(Spare {
            weight: buffer,
            logical_id: 0,
            rotation_offset: 0,
            filled: false,
        });
        Ok(())
    }

    /// Drops the spare and releases its ledger entry. No-op without a spare.
    pub fn release_spare(&mut self, ledger: &mut MemoryLedger, unit: usize) {
        if let Some(s) = self.spare.take() {
            ledger.free_unit(
                unit,
                crate::analysis::Category::CommBuffer,
                s.weight.bytes(),
            );
        }
    }
}

/// Mutable borrow of everything a ring op touches on one worker.
pub struct RingView<'a, T> {
    pub rank: usize,
    pub unit: usize,
    pub slot: &'a mut ShardSlot<T>,
    pub port: &'a mut RingPort<T>,
    pub ledger: &'a mut MemoryLedger,
}

/// Anything that owns a slot on a ring: a bare worker, a layer shard, a gather scratch.
pub trait RingMember<T: Scalar>: Send {
    fn ring_view(&mut self) -> RingView<'_, T>;
}
