//! Bidirectional multi-head self-attention without biases.
//!
//! Heads are packed as column groups of width `d`; probabilities are stored as
//! `[samples * heads * seq, seq]` with block `(sample, head)` at row
//! `(sample * heads + head) * seq`.

use super::tape::Cache;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn shape_of<T: Scalar>(q: &Tensor<T>, seq: usize, d: usize) -> Result<(usize, usize)> {
    let (rows, width) = q.dims2()?;
    if d == 0 || width % d != 0 || rows % seq != 0 {
        return Err(Error::Argument(format!(
            "attention input {rows}x{width} with seq {seq}, head dim {d}"
        )));
    }
    Ok((rows / seq, width / d))
}

/// Returns `(probs, ctx)` for the heads packed in `q`, `k`, `v`.
pub fn core_forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    seq: usize,
    d: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (samples, heads) = shape_of(q, seq, d)?;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let mut probs = Tensor::zeros(&[samples * heads * seq, seq]);
    let mut ctx = Tensor::zeros(q.shape());
    for n in 0..samples {
        for h in 0..heads {
            let qh = q.block(n * seq, h * d, seq, d)?;
            let kh = k.block(n * seq, h * d, seq, d)?;
            let vh = v.block(n * seq, h * d, seq, d)?;
            let p = qh.matmul(&kh.transpose()?)?.scale(scale).softmax_rows()?;
            ctx.set_block(n * seq, h * d, &p.matmul(&vh)?)?;
            probs.set_block((n * heads + h) * seq, 0, &p)?;
        }
    }
    Ok((probs, ctx))
}

/// Gradients `(dq, dk, dv)` given the upstream gradient of `ctx`.
pub fn core_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    dctx: &Tensor<T>,
    seq: usize,
    d: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (samples, heads) = shape_of(q, seq, d)?;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    for n in 0..samples {
        for h in 0..heads {
            let (r, c) = (n * seq, h * d);
            let qh = q.block(r, c, seq, d)?;
            let kh = k.block(r, c, seq, d)?;
            let vh = v.block(r, c, seq, d)?;
            let p = probs.block((n * heads + h) * seq, 0, seq, seq)?;
            let dc = dctx.block(r, c, seq, d)?;
            let dp = dc.matmul(&vh.transpose()?)?;
            dv.set_block(r, c, &p.transpose()?.matmul(&dc)?)?;
            let ds = Tensor::softmax_rows_backward(&p, &dp)?.scale(scale);
            dq.set_block(r, c, &ds.matmul(&kh)?)?;
            dk.set_block(r, c, &ds.transpose()?.matmul(&qh)?)?;
        }
    }
    Ok((dq, dk, dv))
}

/// One head group: partial output `ctx_j Wo_j` (summed over shards later) and its cache.
pub(crate) fn forward_step<T: Scalar>(
    x: &Tensor<T>,
    locals: &[Tensor<T>],
    seq: usize,
    d: usize,
) -> Result<(Tensor<T>, Cache<T>)> {
    let q = x.matmul(&locals[0])?;
    let k = x.matmul(&locals[1])?;
    let v = x.matmul(&locals[2])?;
    let (probs, ctx) = core_forward(&q, &k, &v, seq, d)?;
    let partial = ctx.matmul(&locals[3])?;
    Ok((
        partial,
        Cache::Attention {
            q,
            k,
            v,
            probs,
            ctx,
        },
    ))
}

/// Local gradients `[dWq, dWk, dWv, dWo]` and this head group's contribution to `dX`.
pub(crate) fn backward_step<T: Scalar>(
    x: &Tensor<T>,
    cache: &Cache<T>,
    dy: &Tensor<T>,
    locals: &[Tensor<T>],
    seq: usize,
    d: usize,
) -> Result<(Vec<Tensor<T>>, Tensor<T>)> {
    let Cache::Attention {
        q,
        k,
        v,
        probs,
        ctx,
    } = cache
    else {
        return Err(Error::State(
            "attention step replayed a foreign tape record".into(),
        ));
    };
    let dwo = ctx.transpose()?.matmul(dy)?;
    let dctx = dy.matmul(&locals[3].transpose()?)?;
    let (dq, dk, dv) = core_backward(q, k, v, probs, &dctx, seq, d)?;
    let xt = x.transpose()?;
    let grads = vec![xt.matmul(&dq)?, xt.matmul(&dk)?, xt.matmul(&dv)?, dwo];
    let mut dx = dq.matmul(&locals[0].transpose()?)?;
    dx.add_assign(&dk.matmul(&locals[1].transpose()?)?)?;
    dx.add_assign(&dv.matmul(&locals[2].transpose()?)?)?;
    Ok((grads, dx))
}
