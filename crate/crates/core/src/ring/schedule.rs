//! Op lists for one rotation pass.
//!
//! Forward step `s` computes against shard `(rank - s) mod N`; backward step
//! `s'` against `(rank + 1 + s') mod N`, which undoes the forward pass.
//! Out-of-place schedules release the spare before the final step so the
//! output can reuse its bytes.

use super::{Direction, RotationMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Payload {
    Weight,
    Grad,
    WeightAndGrad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Run the caller's compute for step `s`.
    Compute(usize),
    /// Blocking exchange: the payload leaves the slot and the neighbour's arrives.
    Exchange(Direction, Payload),
    /// Send a copy of the resident weight; receive into the spare.
    Prefetch(Direction),
    /// Swap spare and resident weight.
    Commit,
    AllocSpare,
    ReleaseSpare,
}

pub fn forward_schedule(n: usize, mode: RotationMode) -> Vec<Op> {
    pass(n, mode, Direction::Clockwise)
}

pub fn backward_schedule(n: usize, mode: RotationMode) -> Vec<Op> {
    pass(n, mode, Direction::CounterClockwise)
}

fn pass(n: usize, mode: RotationMode, dir: Direction) -> Vec<Op> {
    let backward = dir == Direction::CounterClockwise;
    let mut ops = Vec::new();
    match mode {
        RotationMode::InPlace => {
            let payload = if backward {
                Payload::WeightAndGrad
            } else {
                Payload::Weight
            };
            for s in 0..n {
                ops.push(Op::Compute(s));
                if s + 1 < n {
                    ops.push(Op::Exchange(dir, payload));
                }
            }
        }
        RotationMode::OutOfPlace => {
            if n > 1 {
                ops.push(Op::AllocSpare);
            }
            for s in 0..n {
                let last = s + 1 == n;
                if last && n > 1 {
                    ops.push(Op::ReleaseSpare);
                }
                if !last {
                    ops.push(Op::Prefetch(dir));
                }
                ops.push(Op::Compute(s));
                if !last {
                    if backward {
                        ops.push(Op::Exchange(dir, Payload::Grad));
                    }
                    ops.push(Op::Commit);
                }
            }
        }
    }
    ops
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(ops: &[Op], f: impl Fn(&Op) -> bool) -> usize {
        ops.iter().filter(|o| f(o)).count()
    }

    #[test]
    fn n_computes_and_n_minus_one_transfers() {
        for n in 1..6 {
            for mode in [RotationMode::InPlace, RotationMode::OutOfPlace] {
                for ops in [forward_schedule(n, mode), backward_schedule(n, mode)] {
                    assert_eq!(count(&ops, |o| matches!(o, Op::Compute(_))), n);
                    let moves = count(&ops, |o| {
                        matches!(
                            o,
                            Op::Exchange(_, Payload::Weight | Payload::WeightAndGrad)
                                | Op::Prefetch(_)
                        )
                    });
                    assert_eq!(moves, n - 1);
                }
            }
        }
    }

    #[test]
    fn single_worker_schedule_is_pure_compute() {
        assert_eq!(
            forward_schedule(1, RotationMode::OutOfPlace),
            vec![Op::Compute(0)]
        );
        assert_eq!(
            backward_schedule(1, RotationMode::InPlace),
            vec![Op::Compute(0)]
        );
    }

    #[test]
    fn spare_released_before_final_compute() {
        let ops = forward_schedule(3, RotationMode::OutOfPlace);
        let rel = ops.iter().position(|o| *o == Op::ReleaseSpare).unwrap();
        let last = ops.iter().position(|o| *o == Op::Compute(2)).unwrap();
        assert!(rel < last);
        assert_eq!(ops[0], Op::AllocSpare);
    }
}
