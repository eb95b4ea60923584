//! Executors for op lists.
//!
//! Both transports apply the same per-worker halves from `exchange`, in the
//! same order per worker, so results are bitwise identical.

use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, RecvTimeoutError, SendTimeoutError, Sender};
use serde::Serialize;

use super::exchange::{incoming, local, outgoing, Transfer};
use super::{Direction, Message, Op, RingMember};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConcurrentTransport {
    /// Per send or receive; expiry is reported as a deadlock.
    pub timeout: Duration,
    /// Test hook: this rank never runs, so its neighbours must time out.
    pub absent: Option<usize>,
}

impl Default for ConcurrentTransport {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(10),
            absent: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub enum TransportKind {
    /// Single control flow; every op is applied to all workers before the next.
    #[default]
    Lockstep,
    /// One thread per worker, rendezvous channels per directed ring edge.
    Concurrent(ConcurrentTransport),
}

impl TransportKind {
    pub fn concurrent() -> Self {
        TransportKind::Concurrent(ConcurrentTransport::default())
    }

    pub fn name(&self) -> &'static str {
        match self {
            TransportKind::Lockstep => "lockstep",
            TransportKind::Concurrent(_) => "concurrent",
        }
    }

    /// Runs `ops` on `members`, where `members[i]` is rank `i`.
    pub fn execute<T, M, F>(&self, members: &mut [M], ops: &[Op], compute: &F) -> Result<()>
    where
        T: Scalar,
        M: RingMember<T>,
        F: Fn(&mut M, usize) -> Result<()> + Sync,
    {
        for (i, m) in members.iter_mut().enumerate() {
            let r = m.ring_view().rank;
            if r != i {
                return Err(Error::Argument(format!(
                    "member at position {i} reports rank {r}"
                )));
            }
        }
        match self {
            TransportKind::Lockstep => lockstep(members, ops, compute),
            TransportKind::Concurrent(c) => concurrent(c, members, ops, compute),
        }
    }
}

fn lockstep<T, M, F>(members: &mut [M], ops: &[Op], compute: &F) -> Result<()>
where
    T: Scalar,
    M: RingMember<T>,
    F: Fn(&mut M, usize) -> Result<()>,
{
    let n = members.len();
    for op in ops {
        match op {
            Op::Compute(s) => {
                for m in members.iter_mut() {
                    compute(m, *s)?;
                }
            }
            Op::Exchange(..) | Op::Prefetch(_) => {
                if n == 1 {
                    continue;
                }
                let (dir, t) = Transfer::of(op).expect("transfer op");
                let mut outbox = Vec::with_capacity(n);
                for m in members.iter_mut() {
                    outbox.push(Some(outgoing(&mut m.ring_view(), dir, t)?));
                }
                for (rank, m) in members.iter_mut().enumerate() {
                    let src = dir.source(rank, n);
                    let msg = outbox[src].take().expect("each message consumed once");
                    incoming(&mut m.ring_view(), msg, t, src)?;
                }
            }
            _ => {
                for m in members.iter_mut() {
                    local(&mut m.ring_view(), op)?;
                }
            }
        }
    }
    Ok(())
}

struct Endpoints<T> {
    cw_tx: Sender<Message<T>>,
    cw_rx: Receiver<Message<T>>,
    ccw_tx: Sender<Message<T>>,
    ccw_rx: Receiver<Message<T>>,
}

impl<T> Endpoints<T> {
    fn pair(&self, dir: Direction) -> (&Sender<Message<T>>, &Receiver<Message<T>>) {
        match dir {
            Direction::Clockwise => (&self.cw_tx, &self.cw_rx),
            Direction::CounterClockwise => (&self.ccw_tx, &self.ccw_rx),
        }
    }
}

fn endpoints<T>(n: usize) -> Vec<Endpoints<T>> {
    // Edge i carries what rank i sends in the given direction.
    let edges = |_: Direction| {
        (0..n)
            .map(|_| bounded::<Message<T>>(0))
            .unzip::<_, _, Vec<_>, Vec<_>>()
    };
    let (cw_tx, cw_rx) = edges(Direction::Clockwise);
    let (ccw_tx, ccw_rx) = edges(Direction::CounterClockwise);
    (0..n)
        .map(|r| Endpoints {
            cw_tx: cw_tx[r].clone(),
            cw_rx: cw_rx[Direction::Clockwise.source(r, n)].clone(),
            ccw_tx: ccw_tx[r].clone(),
            ccw_rx: ccw_rx[Direction::CounterClockwise.source(r, n)].clone(),
        })
        .collect()
}

/// Even ranks send first, odd ranks receive first; with N odd the last rank receives first.
fn sends_first(rank: usize, n: usize) -> bool {
    rank.is_multiple_of(2) && !(n % 2 == 1 && rank == n - 1)
}

fn concurrent<T, M, F>(
    cfg: &ConcurrentTransport,
    members: &mut [M],
    ops: &[Op],
    compute: &F,
) -> Result<()>
where
    T: Scalar,
    M: RingMember<T>,
    F: Fn(&mut M, usize) -> Result<()> + Sync,
{
    let n = members.len();
    let eps = endpoints::<T>(n);
    let results: Vec<Result<()>> = std::thread::scope(|sc| {
        let mut handles = Vec::with_capacity(n);
        let mut parked = Vec::new();
        for (rank, (m, ep)) in members.iter_mut().zip(eps).enumerate() {
            if cfg.absent == Some(rank) {
                parked.push(ep);
                handles.push(None);
                continue;
            }
            let timeout = cfg.timeout;
            handles.push(Some(
                sc.spawn(move || drive(m, ops, compute, &ep, rank, n, timeout)),
            ));
        }
        let out = handles
            .into_iter()
            .enumerate()
            .map(|(rank, h)| match h {
                None => Err(Error::Deadlock(format!(
                    "rank {rank} never joined the ring"
                ))),
                Some(h) => h
                    .join()
                    .unwrap_or_else(|_| Err(Error::State(format!("rank {rank} panicked")))),
            })
            .collect();
        drop(parked);
        out
    });
    let mut first_secondary = None;
    for r in results {
        match r {
            Ok(()) => {}
            Err(e) if e.is_secondary() => {
                first_secondary.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    first_secondary.map_or(Ok(()), Err)
}

fn drive<T, M, F>(
    m: &mut M,
    ops: &[Op],
    compute: &F,
    ep: &Endpoints<T>,
    rank: usize,
    n: usize,
    timeout: Duration,
) -> Result<()>
where
    T: Scalar,
    M: RingMember<T>,
    F: Fn(&mut M, usize) -> Result<()>,
{
    for op in ops {
        match op {
            Op::Compute(s) => compute(m, *s)?,
            Op::Exchange(..) | Op::Prefetch(_) => {
                if n == 1 {
                    continue;
                }
                let (dir, t) = Transfer::of(op).expect("transfer op");
                let (tx, rx) = ep.pair(dir);
                let msg = outgoing(&mut m.ring_view(), dir, t)?;
                let received = if sends_first(rank, n) {
                    send(tx, msg, rank, timeout)?;
                    recv(rx, rank, timeout)?
                } else {
                    let r = recv(rx, rank, timeout)?;
                    send(tx, msg, rank, timeout)?;
                    r
                };
                incoming(&mut m.ring_view(), received, t, dir.source(rank, n))?;
            }
            _ => local(&mut m.ring_view(), op)?,
        }
    }
    Ok(())
}

fn send<T>(tx: &Sender<Message<T>>, msg: Message<T>, rank: usize, timeout: Duration) -> Result<()> {
    tx.send_timeout(msg, timeout).map_err(|e| match e {
        SendTimeoutError::Timeout(_) => {
            Error::Deadlock(format!("rank {rank}: send timed out after {timeout:?}"))
        }
        SendTimeoutError::Disconnected(_) => {
            Error::Disconnected(format!("rank {rank}: peer left before receiving"))
        }
    })
}

fn recv<T>(rx: &Receiver<Message<T>>, rank: usize, timeout: Duration) -> Result<Message<T>> {
    rx.recv_timeout(timeout).map_err(|e| match e {
        RecvTimeoutError::Timeout => {
            Error::Deadlock(format!("rank {rank}: receive timed out after {timeout:?}"))
        }
        RecvTimeoutError::Disconnected => {
            Error::Disconnected(format!("rank {rank}: peer left before sending"))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordering_rule() {
        assert!(sends_first(0, 4) && !sends_first(1, 4) && sends_first(2, 4) && !sends_first(3, 4));
        assert!(sends_first(0, 3) && !sends_first(1, 3) && !sends_first(2, 3));
        assert!(!sends_first(4, 5));
    }
}
