//! Top-1 mixture of experts; expert `j` is shard `j`.

use super::tape::Cache;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gate probabilities and the chosen expert per token (lowest index wins ties).
pub fn route<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let probs = x.matmul(gate)?.softmax_rows()?;
    let (rows, experts) = probs.dims2()?;
    let choice = (0..rows)
        .map(|r| {
            let row = &probs.data()[r * experts..(r + 1) * experts];
            let mut best = 0;
            for (e, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = e;
                }
            }
            best
        })
        .collect();
    Ok((probs, choice))
}

/// `(w1 [H,F], b1 [F], w2 [F,H], b2 [H])` from one expert's stacked local tensors.
pub(crate) fn expert_params<T: Scalar>(locals: &[Tensor<T>]) -> Result<[Tensor<T>; 4]> {
    let squeeze = |t: &Tensor<T>| {
        let shape = t.shape()[1..].to_vec();
        t.clone().reshape(&shape)
    };
    Ok([
        squeeze(&locals[0])?,
        squeeze(&locals[1])?,
        squeeze(&locals[2])?,
        squeeze(&locals[3])?,
    ])
}

/// Rows of `t` scaled by `probs[rows[i], expert]`.
fn scale_rows<T: Scalar>(
    t: &Tensor<T>,
    probs: &Tensor<T>,
    rows: &[usize],
    expert: usize,
) -> Result<Tensor<T>> {
    let (_, width) = t.dims2()?;
    let experts = probs.shape()[1];
    let mut out = t.clone();
    for (i, &r) in rows.iter().enumerate() {
        let p = probs.data()[r * experts + expert];
        for v in &mut out.data_mut()[i * width..(i + 1) * width] {
            *v *= p;
        }
    }
    Ok(out)
}

/// Runs expert `j` on the tokens routed to it; the partial holds `p * FFN_j(x)` for those rows.
pub(crate) fn forward_step<T: Scalar>(
    x: &Tensor<T>,
    probs: &Tensor<T>,
    choice: &[usize],
    j: usize,
    locals: &[Tensor<T>],
) -> Result<(Tensor<T>, Cache<T>)> {
    let [w1, b1, w2, b2] = expert_params(locals)?;
    let rows: Vec<usize> = choice
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == j)
        .map(|(t, _)| t)
        .collect();
    let xj = x.gather_rows(&rows)?;
    let h1 = xj.matmul(&w1)?.add_row_vector(&b1)?;
    let a1 = h1.gelu();
    let o = a1.matmul(&w2)?.add_row_vector(&b2)?;
    let partial = scale_rows(&o, probs, &rows, j)?;
    Ok((
        partial,
        Cache::Expert {
            rows,
            x: xj,
            h1,
            a1,
            o,
        },
    ))
}

/// Scatters per-expert row blocks into a `[total_rows, hidden]` tensor, experts in canonical order.
pub(crate) fn assemble<T: Scalar>(
    parts: &[Tensor<T>],
    rows: &[Vec<usize>],
    total_rows: usize,
    hidden: usize,
) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(&[total_rows, hidden]);
    for (p, r) in parts.iter().zip(rows) {
        out.scatter_add_rows(r, p)?;
    }
    Ok(out)
}

/// Expert `j` backward. Writes `dL/dp` for its tokens into `dprob`.
pub(crate) fn backward_step<T: Scalar>(
    cache: &Cache<T>,
    dy: &Tensor<T>,
    probs: &Tensor<T>,
    j: usize,
    locals: &[Tensor<T>],
    dprob: &mut [T],
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let Cache::Expert { rows, x, h1, a1, o } = cache else {
        return Err(Error::State(
            "expert step replayed a foreign tape record".into(),
        ));
    };
    let [w1, _, w2, _] = expert_params(locals)?;
    let dyj = dy.gather_rows(rows)?;
    let width = o.shape()[1];
    for (i, &r) in rows.iter().enumerate() {
        let mut acc = T::zero();
        for h in 0..width {
            acc += dyj.data()[i * width + h] * o.data()[i * width + h];
        }
        dprob[r] = acc;
    }
    let d_o = scale_rows(&dyj, probs, rows, j)?;
    let dw2 = a1.transpose()?.matmul(&d_o)?;
    let db2 = d_o.sum_rows()?;
    let da1 = d_o.matmul(&w2.transpose()?)?;
    let dh1 = h1.gelu_backward(&da1)?;
    let dw1 = x.transpose()?.matmul(&dh1)?;
    let db1 = dh1.sum_rows()?;
    let dx = dh1.matmul(&w1.transpose()?)?;
    let grads = vec![dw1, db1, dw2, db2];
    Ok((grads, dx))
}

/// Gate path: returns `(dX, local gate gradient)`; `expert_dx` already holds the expert path.
pub(crate) fn gate_backward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    probs: &Tensor<T>,
    choice: &[usize],
    dprob: &[T],
    expert_dx: Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let experts = probs.shape()[1];
    let mut dprobs = Tensor::zeros(probs.shape());
    for (t, (&c, &g)) in choice.iter().zip(dprob).enumerate() {
        dprobs.data_mut()[t * experts + c] = g;
    }
    let dlogits = Tensor::softmax_rows_backward(probs, &dprobs)?;
    let gate_grad = x.transpose()?.matmul(&dlogits)?;
    let mut dx = expert_dx;
    dx.add_assign(&dlogits.matmul(&gate.transpose()?)?)?;
    Ok((dx, gate_grad))
}
