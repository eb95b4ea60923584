//! Output-partitioned linear layers: shard `j` owns output columns `cols(j)`
//! of every projection (and the matching bias slice).

use std::ops::Range;

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::{concat, Tensor};

/// Partial output `[rows, matrices * width]`: `[X A_0j (+ b_j) | X A_1j | ...]`.
pub(crate) fn forward<T: Scalar>(
    x: &Tensor<T>,
    locals: &[Tensor<T>],
    matrices: usize,
    bias: bool,
) -> Result<Tensor<T>> {
    let mut blocks = Vec::with_capacity(matrices);
    for w in &locals[..matrices] {
        let mut y = x.matmul(w)?;
        if bias {
            y = y.add_row_vector(&locals[matrices])?;
        }
        blocks.push(y);
    }
    concat(&blocks, 1)
}

/// Reorders per-shard partials into `[Y_0 | Y_1 | ...]`, each `Y_m` concatenated over shards.
pub(crate) fn assemble<T: Scalar>(parts: &[Tensor<T>], matrices: usize) -> Result<Tensor<T>> {
    if matrices == 1 {
        return concat(parts, 1);
    }
    let split: Vec<Vec<Tensor<T>>> = parts
        .iter()
        .map(|p| p.split(1, matrices))
        .collect::<Result<_>>()?;
    let per_matrix: Vec<Tensor<T>> = (0..matrices)
        .map(|m| concat(&split.iter().map(|s| s[m].clone()).collect::<Vec<_>>(), 1))
        .collect::<Result<_>>()?;
    concat(&per_matrix, 1)
}

/// Local parameter gradients and this shard's contribution to `dX`.
pub(crate) fn backward<T: Scalar>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    locals: &[Tensor<T>],
    cols: Range<usize>,
    output: usize,
    matrices: usize,
    bias: bool,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let xt = x.transpose()?;
    let mut grads = Vec::with_capacity(locals.len());
    let mut dx: Option<Tensor<T>> = None;
    let mut bias_grad = None;
    for (m, w) in locals[..matrices].iter().enumerate() {
        let dy_m = dy.narrow(1, m * output + cols.start, cols.len())?;
        grads.push(xt.matmul(&dy_m)?);
        let part = dy_m.matmul(&w.transpose()?)?;
        match &mut dx {
            None => dx = Some(part),
            Some(acc) => acc.add_assign(&part)?,
        }
        if bias {
            bias_grad = Some(dy_m.sum_rows()?);
        }
    }
    grads.extend(bias_grad);
    Ok((grads, dx.expect("at least one matrix")))
}
