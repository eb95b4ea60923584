//! Per-worker halves of every ring op, shared by both transports.

use super::{Direction, Message, Op, Payload, RingView, Spare};
use crate::analysis::Category;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Transfer {
    Rotate(Payload),
    Prefetch,
}

impl Transfer {
    pub(crate) fn of(op: &Op) -> Option<(Direction, Transfer)> {
        match *op {
            Op::Exchange(d, p) => Some((d, Transfer::Rotate(p))),
            Op::Prefetch(d) => Some((d, Transfer::Prefetch)),
            _ => None,
        }
    }
}

fn empty<T: Scalar>() -> Tensor<T> {
    Tensor::zeros(&[0])
}

/// Advances the step tag and builds the outgoing message.
pub(crate) fn outgoing<T: Scalar>(
    v: &mut RingView<'_, T>,
    dir: Direction,
    t: Transfer,
) -> Result<Message<T>> {
    v.port.tag += 1;
    let offset = v.slot.rotation_offset + dir.offset_delta();
    let (weight, grad) = match t {
        Transfer::Rotate(Payload::Weight) => {
            (Some(std::mem::replace(&mut v.slot.weight, empty())), None)
        }
        Transfer::Rotate(Payload::Grad) => {
            (None, Some(std::mem::replace(&mut v.slot.grad_acc, empty())))
        }
        Transfer::Rotate(Payload::WeightAndGrad) => (
            Some(std::mem::replace(&mut v.slot.weight, empty())),
            Some(std::mem::replace(&mut v.slot.grad_acc, empty())),
        ),
        Transfer::Prefetch => (Some(v.slot.weight.clone()), None),
    };
    let msg = Message {
        tag: v.port.tag,
        from: v.rank,
        logical_id: v.slot.logical_id,
        rotation_offset: offset,
        weight,
        grad,
    };
    v.port.stats.record(v.port.kind, msg.elements());
    if matches!(t, Transfer::Rotate(_)) {
        v.ledger.in_flight(msg.bytes());
    }
    Ok(msg)
}

/// Installs a received message; validates tag, sender and payload.
pub(crate) fn incoming<T: Scalar>(
    v: &mut RingView<'_, T>,
    msg: Message<T>,
    t: Transfer,
    expected_from: usize,
) -> Result<()> {
    if msg.tag != v.port.tag {
        return Err(Error::Protocol(format!(
            "rank {} at step tag {} received tag {} from rank {}",
            v.rank, v.port.tag, msg.tag, msg.from
        )));
    }
    if msg.from != expected_from {
        return Err(Error::Protocol(format!(
            "rank {} expected a message from rank {expected_from}, got rank {}",
            v.rank, msg.from
        )));
    }
    let missing = || {
        Error::Protocol(format!(
            "rank {}: message from rank {} lacks payload",
            v.rank, msg.from
        ))
    };
    match t {
        Transfer::Rotate(p) => {
            if matches!(p, Payload::Grad) {
                let spare = v.port.spare.as_ref().filter(|s| s.filled).ok_or_else(|| {
                    Error::State("gradient exchange without a prefetched weight".into())
                })?;
                if spare.logical_id != msg.logical_id {
                    return Err(Error::Protocol(format!(
                        "rank {}: gradient for shard {} does not match prefetched shard {}",
                        v.rank, msg.logical_id, spare.logical_id
                    )));
                }
                v.slot.grad_acc = msg.grad.ok_or_else(missing)?;
                return Ok(());
            }
            if matches!(p, Payload::Weight | Payload::WeightAndGrad) {
                v.slot.weight = msg.weight.ok_or_else(missing)?;
            }
            if matches!(p, Payload::WeightAndGrad) {
                v.slot.grad_acc = msg.grad.ok_or_else(missing)?;
            }
            v.slot.logical_id = msg.logical_id;
            v.slot.rotation_offset = msg.rotation_offset;
        }
        Transfer::Prefetch => {
            let w = msg.weight.ok_or_else(missing)?;
            let spare = v.port.spare.as_mut().ok_or_else(|| {
                Error::State(format!("rank {}: prefetch without a spare buffer", v.rank))
            })?;
            if spare.weight.len() != w.len() {
                return Err(Error::Argument(format!(
                    "buffer size mismatch: spare has {} elements, message has {}",
                    spare.weight.len(),
                    w.len()
                )));
            }
            spare.weight.data_mut().copy_from_slice(w.data());
            spare.logical_id = msg.logical_id;
            spare.rotation_offset = msg.rotation_offset;
            spare.filled = true;
        }
    }
    Ok(())
}

/// Ops that touch only the local worker.
pub(crate) fn local<T: Scalar>(v: &mut RingView<'_, T>, op: &Op) -> Result<()> {
    match op {
        Op::Commit => {
            let spare = v.port.spare.as_mut().filter(|s| s.filled).ok_or_else(|| {
                Error::State(format!("rank {}: commit without a filled spare", v.rank))
            })?;
            std::mem::swap(&mut v.slot.weight, &mut spare.weight);
            v.slot.logical_id = spare.logical_id;
            v.slot.rotation_offset = spare.rotation_offset;
            spare.filled = false;
        }
        Op::AllocSpare => {
            if v.port.spare.is_some() {
                return Err(Error::State(format!(
                    "rank {}: spare already allocated",
                    v.rank
                )));
            }
            let weight = Tensor::zeros(v.slot.weight.shape());
            v.ledger
                .alloc_unit(v.unit, Category::CommBuffer, weight.bytes());
            v.port.spare = Some(Spare {
                weight,
                logical_id: 0,
                rotation_offset: 0,
                filled: false,
            });
        }
        Op::ReleaseSpare => v.port.release_spare(v.ledger, v.unit),
        Op::Compute(_) | Op::Exchange(..) | Op::Prefetch(_) => unreachable!("not a local op"),
    }
    Ok(())
}
