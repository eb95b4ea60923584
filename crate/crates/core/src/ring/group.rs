//! Group-level rotation and gather primitives on bare workers.

use super::{
    CommKind, CommStats, Direction, Op, Payload, RingMember, RingPort, RingView, ShardSlot,
    TransportKind,
};
use crate::analysis::{Category, MemoryLedger};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{concat, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkerGroup {
    n: usize,
    transport: TransportKind,
}

/// A worker holding one shard and nothing else.
#[derive(Debug, Clone, PartialEq)]
pub struct RingWorker<T> {
    pub rank: usize,
    pub slot: ShardSlot<T>,
    pub port: RingPort<T>,
    pub ledger: MemoryLedger,
}

const WORKER_UNIT: usize = 0;

impl<T: Scalar> RingWorker<T> {
    /// Home-position worker; weight and accumulator are booked as Param and Grad.
    pub fn new(rank: usize, weight: Tensor<T>) -> Self {
        let slot = ShardSlot::home(rank, weight);
        let mut ledger = MemoryLedger::new();
        ledger.alloc_unit(WORKER_UNIT, Category::Param, slot.weight.bytes());
        ledger.alloc_unit(WORKER_UNIT, Category::Grad, slot.grad_acc.bytes());
        Self {
            rank,
            slot,
            port: RingPort::new(CommKind::Rotation),
            ledger,
        }
    }

    pub fn attach_spare(&mut self, buffer: Tensor<T>) -> Result<()> {
        self.port
            .install_spare(buffer, &self.slot.weight, &mut self.ledger, WORKER_UNIT)
    }

    pub fn detach_spare(&mut self) {
        self.port.release_spare(&mut self.ledger, WORKER_UNIT);
    }
}

impl<T: Scalar> RingMember<T> for RingWorker<T> {
    fn ring_view(&mut self) -> RingView<'_, T> {
        RingView {
            rank: self.rank,
            unit: WORKER_UNIT,
            slot: &mut self.slot,
            port: &mut self.port,
            ledger: &mut self.ledger,
        }
    }
}

/// Scratch member for a gather: a private copy of the shard travels the ring.
struct Gatherer<T> {
    rank: usize,
    slot: ShardSlot<T>,
    port: RingPort<T>,
    ledger: MemoryLedger,
    parts: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> RingMember<T> for Gatherer<T> {
    fn ring_view(&mut self) -> RingView<'_, T> {
        RingView {
            rank: self.rank,
            unit: 0,
            slot: &mut self.slot,
            port: &mut self.port,
            ledger: &mut self.ledger,
        }
    }
}

impl WorkerGroup {
    pub fn new(n: usize, transport: TransportKind) -> Result<Self> {
        if n == 0 {
            return Err(Error::Argument(
                "worker group needs at least one worker".into(),
            ));
        }
        Ok(Self { n, transport })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn transport(&self) -> TransportKind {
        self.transport
    }

    /// Executes `ops` with `compute` on every member; members must be ranks `0..n` in order.
    pub fn run<T, M, F>(&self, members: &mut [M], ops: &[Op], compute: F) -> Result<()>
    where
        T: Scalar,
        M: RingMember<T>,
        F: Fn(&mut M, usize) -> Result<()> + Sync,
    {
        if members.len() != self.n {
            return Err(Error::Argument(format!(
                "group of {} workers given {} members",
                self.n,
                members.len()
            )));
        }
        self.transport.execute(members, ops, &compute)
    }

    fn transfer_only<T: Scalar, M: RingMember<T>>(
        &self,
        members: &mut [M],
        ops: &[Op],
    ) -> Result<()> {
        self.run(members, ops, |_: &mut M, _| Ok(()))
    }

    /// Worker `i` receives the weight of worker `(i - 1) mod N`. Accumulators stay put.
    pub fn rotate_clockwise<T: Scalar>(&self, workers: &mut [RingWorker<T>]) -> Result<()> {
        self.transfer_only(
            workers,
            &[Op::Exchange(Direction::Clockwise, Payload::Weight)],
        )
    }

    /// Worker `i` receives weight and accumulator of worker `(i + 1) mod N`.
    pub fn rotate_counterclockwise<T: Scalar>(&self, workers: &mut [RingWorker<T>]) -> Result<()> {
        self.transfer_only(
            workers,
            &[Op::Exchange(
                Direction::CounterClockwise,
                Payload::WeightAndGrad,
            )],
        )
    }

    /// In-place rotations in the given order, in a single transport session.
    pub fn rotate_sequence<T: Scalar>(
        &self,
        workers: &mut [RingWorker<T>],
        dirs: &[Direction],
    ) -> Result<()> {
        let ops: Vec<Op> = dirs
            .iter()
            .map(|&d| match d {
                Direction::Clockwise => Op::Exchange(d, Payload::Weight),
                Direction::CounterClockwise => Op::Exchange(d, Payload::WeightAndGrad),
            })
            .collect();
        self.transfer_only(workers, &ops)
    }

    /// Double-buffered rotation through each worker's attached spare.
    /// Counter-clockwise also hands the accumulator over.
    pub fn rotate_outofplace<T: Scalar>(
        &self,
        workers: &mut [RingWorker<T>],
        dir: Direction,
    ) -> Result<()> {
        if let Some(w) = workers.iter().find(|w| !w.port.has_spare()) {
            return Err(Error::State(format!(
                "rank {} has no spare buffer attached",
                w.rank
            )));
        }
        let mut ops = vec![Op::Prefetch(dir)];
        if dir == Direction::CounterClockwise {
            ops.push(Op::Exchange(dir, Payload::Grad));
        }
        ops.push(Op::Commit);
        if self.n == 1 {
            return Ok(());
        }
        self.transfer_only(workers, &ops)
    }

    /// Every worker ends with all shards concatenated along axis 0 in canonical order.
    /// Shards travel `N - 1` clockwise steps; the callers' shards are left untouched.
    pub fn ring_allgather_tensors<T: Scalar>(
        &self,
        shards: &[Tensor<T>],
    ) -> Result<(Vec<Tensor<T>>, Vec<CommStats>)> {
        if shards.len() != self.n {
            return Err(Error::Argument(format!(
                "allgather over {} workers given {} shards",
                self.n,
                shards.len()
            )));
        }
        let n = self.n;
        let mut members: Vec<Gatherer<T>> = shards
            .iter()
            .enumerate()
            .map(|(rank, s)| Gatherer {
                rank,
                slot: ShardSlot::home(rank, s.clone()),
                port: RingPort::new(CommKind::AllGather),
                ledger: MemoryLedger::new(),
                parts: vec![None; n],
            })
            .collect();
        let mut ops = Vec::new();
        for s in 0..n {
            ops.push(Op::Compute(s));
            if s + 1 < n {
                ops.push(Op::Exchange(Direction::Clockwise, Payload::Weight));
            }
        }
        self.run(&mut members, &ops, |g: &mut Gatherer<T>, _| {
            let id = g.slot.logical_id;
            if g.parts[id].is_some() {
                return Err(Error::Protocol(format!(
                    "rank {} saw shard {id} twice",
                    g.rank
                )));
            }
            g.parts[id] = Some(g.slot.weight.clone());
            Ok(())
        })?;
        let mut gathered = Vec::with_capacity(n);
        let mut stats = Vec::with_capacity(n);
        for g in members {
            let parts: Vec<Tensor<T>> = g
                .parts
                .into_iter()
                .map(|p| p.expect("every shard visits"))
                .collect();
            gathered.push(concat(&parts, 0)?);
            stats.push(g.port.stats().clone());
        }
        Ok((gathered, stats))
    }

    /// Allgather of the workers' resident weights; traffic is added to each worker's counters.
    pub fn ring_allgather<T: Scalar>(
        &self,
        workers: &mut [RingWorker<T>],
    ) -> Result<Vec<Tensor<T>>> {
        let shards: Vec<Tensor<T>> = workers.iter().map(|w| w.slot.weight.clone()).collect();
        let (gathered, stats) = self.ring_allgather_tensors(&shards)?;
        for (w, s) in workers.iter_mut().zip(&stats) {
            w.port.stats.merge(s);
        }
        Ok(gathered)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn workers(n: usize, len: usize) -> Vec<RingWorker<f64>> {
        (0..n)
            .map(|r| {
                RingWorker::new(
                    r,
                    Tensor::from_vec((0..len).map(|k| (r * 100 + k) as f64).collect()),
                )
            })
            .collect()
    }

    fn ids(ws: &[RingWorker<f64>]) -> Vec<usize> {
        ws.iter().map(|w| w.slot.logical_id).collect()
    }

    #[test]
    fn clockwise_four_workers() {
        let g = WorkerGroup::new(4, TransportKind::Lockstep).unwrap();
        let mut ws = workers(4, 3);
        g.rotate_clockwise(&mut ws).unwrap();
        assert_eq!(ids(&ws), vec![3, 0, 1, 2]);
        assert_eq!(ws[0].slot.weight.data()[0], 300.0);
        g.rotate_clockwise(&mut ws).unwrap();
        g.rotate_clockwise(&mut ws).unwrap();
        assert_eq!(ids(&ws), vec![1, 2, 3, 0]);
    }

    #[test]
    fn single_worker_is_noop() {
        let g = WorkerGroup::new(1, TransportKind::Lockstep).unwrap();
        let mut ws = workers(1, 2);
        let before = ws.clone();
        g.rotate_clockwise(&mut ws).unwrap();
        g.rotate_counterclockwise(&mut ws).unwrap();
        assert_eq!(ws, before);
        assert_eq!(g.ring_allgather(&mut ws).unwrap()[0], before[0].slot.weight);
    }

    #[test]
    fn outofplace_requires_matching_spare() {
        let mut ws = workers(2, 3);
        let err = ws[0].attach_spare(Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, Error::Argument(m) if m.contains("buffer size mismatch")));
        let g = WorkerGroup::new(2, TransportKind::Lockstep).unwrap();
        assert!(matches!(
            g.rotate_outofplace(&mut ws, Direction::Clockwise),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn mismatched_tags_are_protocol_errors() {
        let g = WorkerGroup::new(3, TransportKind::Lockstep).unwrap();
        let mut ws = workers(3, 2);
        ws[1].port.tag = 7;
        let err = g.rotate_clockwise(&mut ws).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn allgather_counts_as_allgather_traffic() {
        let g = WorkerGroup::new(4, TransportKind::Lockstep).unwrap();
        let mut ws = workers(4, 2);
        let full = g.ring_allgather(&mut ws).unwrap();
        let expect: Vec<f64> = (0..4)
            .flat_map(|r| [(r * 100) as f64, (r * 100 + 1) as f64])
            .collect();
        for f in &full {
            assert_eq!(f.data(), &expect[..]);
        }
        for w in &ws {
            assert_eq!(w.port.stats().elements(CommKind::AllGather), 6);
            assert_eq!(w.port.stats().messages(CommKind::Rotation), 0);
            assert_eq!(w.slot.logical_id, w.rank);
        }
    }
}
