//! Unsharded reference model used as the equivalence oracle.
//!
//! Every layer is computed on full weights with straightforward loops, and the
//! ledger receives the same activation bookings a rotated worker makes, scaled
//! to the whole batch. Reorder-buffer scratch (`Other`) is not booked.

use crate::analysis::{Category, MemoryLedger};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{embedding_backward, embedding_lookup, mse_grad, mse_loss, Tensor};

use super::model::{AttnBlock, Batch, FfnBlock, ModelParams, Stack, UnitParams};
use super::GATE_UNIT_OFFSET;

/// `x W (+ b)`.
pub fn linear_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add_row_vector(b),
        None => Ok(y),
    }
}

/// `(dW, db, dX)` of `x W (+ b)`.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    bias: bool,
) -> Result<(Tensor<T>, Option<Tensor<T>>, Tensor<T>)> {
    let dw = x.transpose()?.matmul(dy)?;
    let db = if bias { Some(dy.sum_rows()?) } else { None };
    Ok((dw, db, dy.matmul(&w.transpose()?)?))
}

/// Scaled dot-product attention over all heads; probabilities `[samples * heads * seq, seq]`.
pub fn attention_core<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    seq: usize,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (rows, hidden) = q.dims2()?;
    if heads == 0 || hidden % heads != 0 || seq == 0 || rows % seq != 0 {
        return Err(Error::Argument(format!(
            "attention {rows}x{hidden} with {heads} heads, seq {seq}"
        )));
    }
    let d = hidden / heads;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut probs = vec![T::zero(); rows * heads * seq];
    let mut ctx = vec![T::zero(); rows * hidden];
    for n in 0..rows / seq {
        for h in 0..heads {
            for i in 0..seq {
                let qi = (n * seq + i) * hidden + h * d;
                let mut scores: Vec<T> = (0..seq)
                    .map(|j| {
                        let kj = (n * seq + j) * hidden + h * d;
                        (0..d).fold(T::zero(), |acc, c| acc + qd[qi + c] * kd[kj + c]) * scale
                    })
                    .collect();
                let m = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for sc in &mut scores {
                    *sc = (*sc - m).exp();
                    z += *sc;
                }
                let prow = ((n * heads + h) * seq + i) * seq;
                for j in 0..seq {
                    let p = scores[j] / z;
                    probs[prow + j] = p;
                    let vj = (n * seq + j) * hidden + h * d;
                    for c in 0..d {
                        ctx[qi + c] += p * vd[vj + c];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![rows * heads, seq], probs)?,
        Tensor::new(vec![rows, hidden], ctx)?,
    ))
}

/// `(dq, dk, dv)` of [`attention_core`].
pub fn attention_core_backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &Tensor<T>,
    dctx: &Tensor<T>,
    seq: usize,
    heads: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (rows, hidden) = q.dims2()?;
    let d = hidden / heads;
    let scale = T::lit(1.0 / (d as f64).sqrt());
    let (qd, kd, vd, pd, gd) = (q.data(), k.data(), v.data(), probs.data(), dctx.data());
    let mut dq = vec![T::zero(); rows * hidden];
    let mut dk = vec![T::zero(); rows * hidden];
    let mut dv = vec![T::zero(); rows * hidden];
    for n in 0..rows / seq {
        for h in 0..heads {
            for i in 0..seq {
                let gi = (n * seq + i) * hidden + h * d;
                let prow = ((n * heads + h) * seq + i) * seq;
                let dp: Vec<T> = (0..seq)
                    .map(|j| {
                        let vj = (n * seq + j) * hidden + h * d;
                        (0..d).fold(T::zero(), |acc, c| acc + gd[gi + c] * vd[vj + c])
                    })
                    .collect();
                let dot = (0..seq).fold(T::zero(), |acc, j| acc + pd[prow + j] * dp[j]);
                for j in 0..seq {
                    let p = pd[prow + j];
                    let ds = p * (dp[j] - dot) * scale;
                    let oj = (n * seq + j) * hidden + h * d;
                    for c in 0..d {
                        dv[oj + c] += p * gd[gi + c];
                        dq[gi + c] += ds * kd[oj + c];
                        dk[oj + c] += ds * qd[gi + c];
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![rows, hidden], dq)?,
        Tensor::new(vec![rows, hidden], dk)?,
        Tensor::new(vec![rows, hidden], dv)?,
    ))
}

/// Tensors kept between the forward and backward of a full attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSaved<T> {
    pub q: Tensor<T>,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    pub probs: Tensor<T>,
    pub ctx: Tensor<T>,
}

impl<T: Scalar> AttentionSaved<T> {
    pub fn bytes(&self) -> u64 {
        self.q.bytes() + self.k.bytes() + self.v.bytes() + self.probs.bytes() + self.ctx.bytes()
    }
}

/// `w = [wq, wk, wv, wo]`.
pub fn attention_forward<T: Scalar>(
    x: &Tensor<T>,
    w: [&Tensor<T>; 4],
    seq: usize,
    heads: usize,
) -> Result<(Tensor<T>, AttentionSaved<T>)> {
    let (q, k, v) = (x.matmul(w[0])?, x.matmul(w[1])?, x.matmul(w[2])?);
    let (probs, ctx) = attention_core(&q, &k, &v, seq, heads)?;
    let y = ctx.matmul(w[3])?;
    Ok((
        y,
        AttentionSaved {
            q,
            k,
            v,
            probs,
            ctx,
        },
    ))
}

/// `([dWq, dWk, dWv, dWo], dX)`.
pub fn attention_backward<T: Scalar>(
    x: &Tensor<T>,
    saved: &AttentionSaved<T>,
    dy: &Tensor<T>,
    w: [&Tensor<T>; 4],
    seq: usize,
    heads: usize,
) -> Result<([Tensor<T>; 4], Tensor<T>)> {
    let dwo = saved.ctx.transpose()?.matmul(dy)?;
    let dctx = dy.matmul(&w[3].transpose()?)?;
    let (dq, dk, dv) = attention_core_backward(
        &saved.q,
        &saved.k,
        &saved.v,
        &saved.probs,
        &dctx,
        seq,
        heads,
    )?;
    let xt = x.transpose()?;
    let mut dx = dq.matmul(&w[0].transpose()?)?;
    dx.add_assign(&dk.matmul(&w[1].transpose()?)?)?;
    dx.add_assign(&dv.matmul(&w[2].transpose()?)?)?;
    Ok(([xt.matmul(&dq)?, xt.matmul(&dk)?, xt.matmul(&dv)?, dwo], dx))
}

/// Tensors kept between the forward and backward of a full mixture-of-experts layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MoeSaved<T> {
    pub probs: Tensor<T>,
    pub choice: Vec<usize>,
    pub h1: Tensor<T>,
    pub a1: Tensor<T>,
    pub o: Tensor<T>,
}

impl<T: Scalar> MoeSaved<T> {
    /// Expert caches: routed input copy, `h1`, `a1` and `o` for every token.
    pub fn cache_bytes(&self, x: &Tensor<T>) -> u64 {
        x.bytes() + self.h1.bytes() + self.a1.bytes() + self.o.bytes()
    }
}

fn row<T: Scalar>(t: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    t.narrow(0, r, 1)
}

/// Expert `e` of stacked tensors `[E, ...]` as a 2-D matrix or a `[1, width]` row.
fn expert<T: Scalar>(stacked: &Tensor<T>, e: usize) -> Result<Tensor<T>> {
    let s = stacked.narrow(0, e, 1)?;
    let shape = match stacked.shape().len() {
        3 => stacked.shape()[1..].to_vec(),
        _ => vec![1, stacked.shape()[1]],
    };
    s.reshape(&shape)
}

/// Top-1 routing token by token; `p = [w1, b1, w2, b2]` stacked over experts.
pub fn moe_forward<T: Scalar>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    p: &[Tensor<T>],
) -> Result<(Tensor<T>, MoeSaved<T>)> {
    let (rows, hidden) = x.dims2()?;
    let ffn = p[0].shape()[2];
    let probs = x.matmul(gate)?.softmax_rows()?;
    let experts = probs.shape()[1];
    let mut choice = Vec::with_capacity(rows);
    let mut h1 = Tensor::zeros(&[rows, ffn]);
    let mut a1 = Tensor::zeros(&[rows, ffn]);
    let mut o = Tensor::zeros(&[rows, hidden]);
    let mut y = Tensor::zeros(&[rows, hidden]);
    for t in 0..rows {
        let pr = &probs.data()[t * experts..(t + 1) * experts];
        let e = (0..experts).fold(0, |best, i| if pr[i] > pr[best] { i } else { best });
        choice.push(e);
        let ht = row(x, t)?
            .matmul(&expert(&p[0], e)?)?
            .add(&expert(&p[1], e)?)?;
        let at = ht.gelu();
        let ot = at.matmul(&expert(&p[2], e)?)?.add(&expert(&p[3], e)?)?;
        y.write_window(0, t, &ot.scale(pr[e]))?;
        h1.write_window(0, t, &ht)?;
        a1.write_window(0, t, &at)?;
        o.write_window(0, t, &ot)?;
    }
    Ok((
        y,
        MoeSaved {
            probs,
            choice,
            h1,
            a1,
            o,
        },
    ))
}

/// `(expert grads [dw1, db1, dw2, db2] stacked, gate grad, dX)`.
pub fn moe_backward<T: Scalar>(
    x: &Tensor<T>,
    saved: &MoeSaved<T>,
    dy: &Tensor<T>,
    gate: &Tensor<T>,
    p: &[Tensor<T>],
) -> Result<(Vec<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let (rows, _) = x.dims2()?;
    let experts = saved.probs.shape()[1];
    let mut grads: Vec<Tensor<T>> = p.iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut dgate = Tensor::zeros(gate.shape());
    let mut dx = Tensor::zeros(x.shape());
    let gate_t = gate.transpose()?;
    for t in 0..rows {
        let e = saved.choice[t];
        let pr = &saved.probs.data()[t * experts..(t + 1) * experts];
        let (xt, dyt, ot) = (row(x, t)?, row(dy, t)?, row(&saved.o, t)?);
        let dp = dyt.mul(&ot)?.sum();
        let d_o = dyt.scale(pr[e]);
        let dh = row(&saved.h1, t)?.gelu_backward(&d_o.matmul(&expert(&p[2], e)?.transpose()?)?)?;
        let local = [
            xt.transpose()?.matmul(&dh)?,
            dh.clone(),
            row(&saved.a1, t)?.transpose()?.matmul(&d_o)?,
            d_o,
        ];
        for (g, l) in grads.iter_mut().zip(local) {
            let width = g.len() / experts;
            for (a, b) in g.data_mut()[e * width..(e + 1) * width]
                .iter_mut()
                .zip(l.data())
            {
                *a += *b;
            }
        }
        let dz: Vec<T> = (0..experts)
            .map(|i| {
                let onehot = if i == e { dp } else { T::zero() };
                pr[i] * (onehot - pr[e] * dp)
            })
            .collect();
        let dz = Tensor::new(vec![1, experts], dz)?;
        dgate.add_assign(&xt.transpose()?.matmul(&dz)?)?;
        let mut dxt = dh.matmul(&expert(&p[0], e)?.transpose()?)?;
        dxt.add_assign(&dz.matmul(&gate_t)?)?;
        dx.write_window(0, t, &dxt)?;
    }
    Ok((grads, dgate, dx))
}

/// Result of one reference training step.
#[derive(Debug, Clone, PartialEq)]
pub struct SerialStep<T> {
    pub loss: T,
    pub logits: Tensor<T>,
    pub grads: Vec<UnitParams<T>>,
}

/// Full model on one device with its own memory ledger.
#[derive(Debug, Clone)]
pub struct SerialModel<T> {
    stack: Stack,
    params: ModelParams<T>,
    pub ledger: MemoryLedger,
}

struct SavedBlock<T> {
    attn_in: Tensor<T>,
    attn: Option<AttentionSaved<T>>,
    /// Split form: fused `[q | k | v]`, probabilities, context.
    split: Option<(Tensor<T>, Tensor<T>, Tensor<T>)>,
    ffn_in: Tensor<T>,
    h: Option<Tensor<T>>,
    a: Option<Tensor<T>>,
    moe: Option<MoeSaved<T>>,
}

impl<T: Scalar> SerialModel<T> {
    /// Books full parameters and gradients per unit, gates under their own unit id.
    pub fn new(stack: &Stack, params: ModelParams<T>) -> Result<Self> {
        if params.units.len() != stack.units.len() {
            return Err(Error::Argument(
                "parameter set does not match the stack".into(),
            ));
        }
        let mut ledger = MemoryLedger::new();
        for (u, p) in stack.units.iter().zip(&params.units) {
            let bytes: u64 = p.tensors.iter().map(Tensor::bytes).sum();
            ledger.alloc_unit(u.id, Category::Param, bytes);
            ledger.alloc_unit(u.id, Category::Grad, bytes);
            if let Some(g) = &p.gate {
                ledger.alloc_unit(GATE_UNIT_OFFSET + u.id, Category::Param, g.bytes());
                ledger.alloc_unit(GATE_UNIT_OFFSET + u.id, Category::Grad, g.bytes());
            }
        }
        Ok(Self {
            stack: stack.clone(),
            params,
            ledger,
        })
    }

    pub fn params(&self) -> &ModelParams<T> {
        &self.params
    }

    fn book(&mut self, t: &Tensor<T>) {
        self.ledger.alloc(Category::Activation, t.bytes());
    }

    fn unbook(&mut self, t: &Tensor<T>) {
        self.ledger.free(Category::Activation, t.bytes());
    }

    fn w(&self, unit: usize, i: usize) -> &Tensor<T> {
        &self.params.units[unit].tensors[i]
    }

    fn bias(&self, unit: usize) -> Option<&Tensor<T>> {
        self.params.units[unit].tensors.get(1)
    }

    /// Linear unit with a single matrix and optional bias.
    fn linear_fwd(&mut self, unit: usize, x: &Tensor<T>) -> Result<Tensor<T>> {
        let y = linear_forward(x, self.w(unit, 0), self.bias(unit))?;
        self.book(&y);
        Ok(y)
    }

    fn linear_bwd(
        &mut self,
        unit: usize,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grads: &mut [UnitParams<T>],
    ) -> Result<Tensor<T>> {
        let has_bias = self.bias(unit).is_some();
        let (dw, db, dx) = linear_backward(x, self.w(unit, 0), dy, has_bias)?;
        grads[unit].tensors[0].add_assign(&dw)?;
        if let Some(db) = db {
            grads[unit].tensors[1].add_assign(&db)?;
        }
        self.unbook(x);
        self.book(&dx);
        Ok(dx)
    }

    /// Forward, loss and backward on the full batch.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<SerialStep<T>> {
        let stack = self.stack.clone();
        let cfg = &stack.config;
        let (seq, heads) = (cfg.sequence_length, cfg.attention_heads);
        let mut grads: Vec<UnitParams<T>> = self
            .params
            .units
            .iter()
            .map(UnitParams::zeros_like)
            .collect();

        let mut x = embedding_lookup(self.w(stack.embedding, 0), &batch.ids)?;
        self.book(&x);
        let mut saved = Vec::with_capacity(stack.blocks.len());
        for block in &stack.blocks {
            let attn_in = x;
            let (y, attn, split) = match block.attn {
                AttnBlock::Sharded { attn } => {
                    let w = [
                        self.w(attn, 0),
                        self.w(attn, 1),
                        self.w(attn, 2),
                        self.w(attn, 3),
                    ];
                    let (y, s) = attention_forward(&attn_in, w, seq, heads)?;
                    self.ledger.alloc(Category::Activation, s.bytes());
                    self.book(&y);
                    (y, Some(s), None)
                }
                AttnBlock::Split { qkv, out } => {
                    let (q, k, v) = (
                        attn_in.matmul(self.w(qkv, 0))?,
                        attn_in.matmul(self.w(qkv, 1))?,
                        attn_in.matmul(self.w(qkv, 2))?,
                    );
                    let fused = crate::tensor::concat(&[q.clone(), k.clone(), v.clone()], 1)?;
                    self.book(&fused);
                    let (probs, ctx) = attention_core(&q, &k, &v, seq, heads)?;
                    self.book(&probs);
                    self.book(&ctx);
                    let y = linear_forward(&ctx, self.w(out, 0), None)?;
                    self.book(&y);
                    (y, None, Some((fused, probs, ctx)))
                }
            };
            let x1 = y.add(&attn_in)?;
            let (f, h, a, moe) = match block.ffn {
                FfnBlock::Dense { ffn1, ffn2 } => {
                    let h = self.linear_fwd(ffn1, &x1)?;
                    let a = h.gelu();
                    self.book(&a);
                    let f = self.linear_fwd(ffn2, &a)?;
                    (f, Some(h), Some(a), None)
                }
                FfnBlock::Moe { moe } => {
                    let p = &self.params.units[moe];
                    let gate = p
                        .gate
                        .as_ref()
                        .ok_or_else(|| Error::State("moe unit without gate".into()))?;
                    let (f, s) = moe_forward(&x1, gate, &p.tensors)?;
                    self.book(&s.probs);
                    self.ledger.alloc(Category::Activation, s.cache_bytes(&x1));
                    self.book(&f);
                    (f, None, None, Some(s))
                }
            };
            x = f.add(&x1)?;
            saved.push(SavedBlock {
                attn_in,
                attn,
                split,
                ffn_in: x1,
                h,
                a,
                moe,
            });
        }
        let logits = self.linear_fwd(stack.head, &x)?;
        let denom = batch.loss_denominator();
        let loss = mse_loss(&logits, &batch.targets, denom)?;
        let dlogits = mse_grad(&logits, &batch.targets, denom)?;
        self.book(&dlogits);

        let mut g = self.linear_bwd(stack.head, &x, &dlogits, &mut grads)?;
        self.unbook(&dlogits);
        self.unbook(&logits);
        for (block, s) in stack.blocks.iter().zip(saved).rev() {
            let dx1 = match block.ffn {
                FfnBlock::Dense { ffn1, ffn2 } => {
                    let a = s.a.expect("dense block");
                    let h = s.h.expect("dense block");
                    let da = self.linear_bwd(ffn2, &a, &g, &mut grads)?;
                    let dh = h.gelu_backward(&da)?;
                    self.unbook(&h);
                    let dx1 = self.linear_bwd(ffn1, &s.ffn_in, &dh, &mut grads)?;
                    self.unbook(&dh);
                    dx1
                }
                FfnBlock::Moe { moe } => {
                    let ms = s.moe.expect("moe block");
                    let p = &self.params.units[moe];
                    let gate = p.gate.as_ref().expect("checked in forward");
                    let (eg, dgate, dx1) = moe_backward(&s.ffn_in, &ms, &g, gate, &p.tensors)?;
                    for (acc, d) in grads[moe].tensors.iter_mut().zip(&eg) {
                        acc.add_assign(d)?;
                    }
                    grads[moe]
                        .gate
                        .as_mut()
                        .expect("gate grad")
                        .add_assign(&dgate)?;
                    self.ledger
                        .free(Category::Activation, ms.cache_bytes(&s.ffn_in));
                    self.unbook(&s.ffn_in);
                    self.unbook(&ms.probs);
                    self.book(&dx1);
                    dx1
                }
            };
            g.add_assign(&dx1)?;
            self.unbook(&dx1);
            let dxa = match block.attn {
                AttnBlock::Sharded { attn } => {
                    let sv = s.attn.expect("sharded attention");
                    let w = [
                        self.w(attn, 0),
                        self.w(attn, 1),
                        self.w(attn, 2),
                        self.w(attn, 3),
                    ];
                    let (dw, dxa) = attention_backward(&s.attn_in, &sv, &g, w, seq, heads)?;
                    for (acc, d) in grads[attn].tensors.iter_mut().zip(&dw) {
                        acc.add_assign(d)?;
                    }
                    self.ledger.free(Category::Activation, sv.bytes());
                    self.unbook(&s.attn_in);
                    self.book(&dxa);
                    dxa
                }
                AttnBlock::Split { qkv, out } => {
                    let (fused, probs, ctx) = s.split.expect("split attention");
                    let dctx = self.linear_bwd(out, &ctx, &g, &mut grads)?;
                    let parts = fused.split(1, 3)?;
                    let (dq, dk, dv) = attention_core_backward(
                        &parts[0], &parts[1], &parts[2], &probs, &dctx, seq, heads,
                    )?;
                    self.unbook(&probs);
                    self.unbook(&fused);
                    self.unbook(&dctx);
                    let dfused = crate::tensor::concat(&[dq.clone(), dk.clone(), dv.clone()], 1)?;
                    self.book(&dfused);
                    let xt = s.attn_in.transpose()?;
                    let mut dxa = Tensor::zeros(s.attn_in.shape());
                    for (i, d) in [dq, dk, dv].iter().enumerate() {
                        grads[qkv].tensors[i].add_assign(&xt.matmul(d)?)?;
                        dxa.add_assign(&d.matmul(&self.w(qkv, i).transpose()?)?)?;
                    }
                    self.unbook(&s.attn_in);
                    self.book(&dxa);
                    self.unbook(&dfused);
                    dxa
                }
            };
            g.add_assign(&dxa)?;
            self.unbook(&dxa);
        }
        embedding_backward(&mut grads[stack.embedding].tensors[0], &batch.ids, &g)?;
        self.unbook(&g);
        Ok(SerialStep {
            loss,
            logits,
            grads,
        })
    }
}
