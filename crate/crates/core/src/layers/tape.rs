//! Replay tape: one record per forward step, consumed last-in first-out.
//!
//! Forward step `s` records the logical shard it used. Backward step `s'`
//! pops the record of forward step `N - 1 - s'` and asserts the resident shard
//! carries the same id, so backward replays against the rotated-back weights.

use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Intermediates a forward step saves for its backward step.
#[derive(Debug, Clone, PartialEq)]
pub enum Cache<T> {
    None,
    Attention {
        q: Tensor<T>,
        k: Tensor<T>,
        v: Tensor<T>,
        probs: Tensor<T>,
        ctx: Tensor<T>,
    },
    Expert {
        /// Token rows routed to this expert, ascending.
        rows: Vec<usize>,
        x: Tensor<T>,
        h1: Tensor<T>,
        a1: Tensor<T>,
        o: Tensor<T>,
    },
}

impl<T: Scalar> Cache<T> {
    pub fn bytes(&self) -> u64 {
        match self {
            Cache::None => 0,
            Cache::Attention {
                q,
                k,
                v,
                probs,
                ctx,
            } => q.bytes() + k.bytes() + v.bytes() + probs.bytes() + ctx.bytes(),
            Cache::Expert { x, h1, a1, o, .. } => x.bytes() + h1.bytes() + a1.bytes() + o.bytes(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TapeRecord<T> {
    pub logical_id: usize,
    pub cache: Cache<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayTape<T> {
    records: Vec<TapeRecord<T>>,
}

impl<T> Default for ReplayTape<T> {
    fn default() -> Self {
        Self {
            records: Vec::new(),
        }
    }
}

impl<T: Scalar> ReplayTape<T> {
    pub fn push(&mut self, record: TapeRecord<T>) {
        self.records.push(record);
    }

    pub fn pop(&mut self) -> Option<TapeRecord<T>> {
        self.records.pop()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Logical ids in forward order.
    pub fn ids(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.logical_id).collect()
    }
}
