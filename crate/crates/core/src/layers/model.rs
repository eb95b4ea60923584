//! Transformer stack built from rotated units, and its training-step driver.

use crate::analysis::Category;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ring::{backward_schedule, forward_schedule, RotationMode, TransportKind, WorkerGroup};
use crate::rng::SeededRng;
use crate::scalar::Scalar;
use crate::tensor::{concat, mse_grad, mse_loss, Tensor};

use super::{attention, LayerInput, LayerMember, UnitKind, UnitSpec, Worker, GATE_UNIT_OFFSET};

/// Uniform initialisation bound for every parameter.
pub const INIT_BOUND: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnBlock {
    /// Heads divide the worker count: one head-partitioned unit.
    Sharded { attn: usize },
    /// Fused Q/K/V projection unit, local attention core, output projection unit.
    Split { qkv: usize, out: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FfnBlock {
    Dense { ffn1: usize, ffn2: usize },
    Moe { moe: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub attn: AttnBlock,
    pub ffn: FfnBlock,
}

/// Unit list and wiring of a transformer sharded over `n` workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stack {
    pub config: ModelConfig,
    pub n: usize,
    pub units: Vec<UnitSpec>,
    pub embedding: usize,
    pub blocks: Vec<Block>,
    pub head: usize,
}

/// Embedding, then per block attention + residual and FFN (or MoE) + residual, then a linear head.
pub fn build_rtp_transformer(config: &ModelConfig, n: usize) -> Result<Stack> {
    config.validate(n)?;
    let (h, f, v) = (config.hidden_size, config.embedding_size, config.vocab_size);
    let mut units: Vec<UnitSpec> = Vec::new();
    let mut add = |name: String, kind: UnitKind| -> Result<usize> {
        let id = units.len();
        units.push(UnitSpec::new(id, name, kind, n)?);
        Ok(id)
    };
    let embedding = add("embedding".into(), UnitKind::Embedding { vocab: v, dim: h })?;
    let mut blocks = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let attn = if config.attention_heads.is_multiple_of(n) {
            let kind = UnitKind::Attention {
                hidden: h,
                heads: config.attention_heads,
                seq: config.sequence_length,
            };
            AttnBlock::Sharded {
                attn: add(format!("block{l}.attention"), kind)?,
            }
        } else {
            let qkv = add(
                format!("block{l}.qkv"),
                UnitKind::Linear {
                    input: h,
                    output: h,
                    matrices: 3,
                    bias: false,
                },
            )?;
            let out = add(
                format!("block{l}.attn_out"),
                UnitKind::Linear {
                    input: h,
                    output: h,
                    matrices: 1,
                    bias: false,
                },
            )?;
            AttnBlock::Split { qkv, out }
        };
        let ffn = if config.moe {
            FfnBlock::Moe {
                moe: add(
                    format!("block{l}.moe"),
                    UnitKind::Moe {
                        hidden: h,
                        ffn: f,
                        experts: n,
                    },
                )?,
            }
        } else {
            let ffn1 = add(
                format!("block{l}.ffn1"),
                UnitKind::Linear {
                    input: h,
                    output: f,
                    matrices: 1,
                    bias: true,
                },
            )?;
            let ffn2 = add(
                format!("block{l}.ffn2"),
                UnitKind::Linear {
                    input: f,
                    output: h,
                    matrices: 1,
                    bias: true,
                },
            )?;
            FfnBlock::Dense { ffn1, ffn2 }
        };
        blocks.push(Block { attn, ffn });
    }
    let head = add(
        "head".into(),
        UnitKind::Linear {
            input: h,
            output: v,
            matrices: 1,
            bias: true,
        },
    )?;
    Ok(Stack {
        config: config.clone(),
        n,
        units,
        embedding,
        blocks,
        head,
    })
}

impl Stack {
    pub fn param_count(&self) -> usize {
        self.units.iter().map(UnitSpec::param_count).sum()
    }

    /// Uniform draws in `[-0.1, 0.1]`: unit order, then parameter order, each row-major.
    pub fn init_params<T: Scalar>(&self, seed: u64) -> ModelParams<T> {
        let mut rng = SeededRng::new(seed);
        let units = self
            .units
            .iter()
            .map(|u| {
                let tensors = u
                    .layout
                    .params()
                    .iter()
                    .map(|p| rng.tensor(&p.shape, -INIT_BOUND, INIT_BOUND))
                    .collect();
                let gate = u
                    .gate_shape()
                    .map(|s| rng.tensor(&s, -INIT_BOUND, INIT_BOUND));
                UnitParams { tensors, gate }
            })
            .collect();
        ModelParams { units }
    }

    /// Bytes of all sharded (rotating) parameters, excluding replicated gates.
    pub fn sharded_param_bytes<T: Scalar>(&self) -> u64 {
        self.units
            .iter()
            .map(|u| u.layout.total_len() as u64 * T::bytes())
            .sum()
    }

    /// Largest single unit, in bytes.
    pub fn max_unit_bytes<T: Scalar>(&self) -> u64 {
        self.units
            .iter()
            .map(|u| u.layout.total_len() as u64 * T::bytes())
            .max()
            .unwrap_or(0)
    }
}

/// Full (unsharded) parameters of one unit in layout order, plus the gate if any.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitParams<T> {
    pub tensors: Vec<Tensor<T>>,
    pub gate: Option<Tensor<T>>,
}

impl<T: Scalar> UnitParams<T> {
    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter().chain(self.gate.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.tensors.iter_mut().chain(self.gate.iter_mut())
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.shape()))
                .collect(),
            gate: self.gate.as_ref().map(|g| Tensor::zeros(g.shape())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub units: Vec<UnitParams<T>>,
}

impl<T: Scalar> ModelParams<T> {
    pub fn count(&self) -> usize {
        self.units
            .iter()
            .flat_map(UnitParams::iter)
            .map(Tensor::len)
            .sum()
    }
}

/// Token ids `[samples * seq]` and regression targets `[samples * seq, vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub samples: usize,
    pub seq: usize,
    pub vocab: usize,
    pub ids: Vec<usize>,
    pub targets: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    /// Ids uniform over the vocabulary and targets uniform in `[-1, 1]`, from `seed + 1`.
    pub fn random(config: &ModelConfig, samples: usize, seed: u64) -> Self {
        let mut rng = SeededRng::new(seed.wrapping_add(1));
        let rows = samples * config.sequence_length;
        let ids = rng.token_ids(rows, config.vocab_size);
        let targets = rng.tensor(&[rows, config.vocab_size], -1.0, 1.0);
        Self {
            samples,
            seq: config.sequence_length,
            vocab: config.vocab_size,
            ids,
            targets,
        }
    }

    /// Contiguous per-worker slice of whole samples.
    pub fn shard(&self, rank: usize, n: usize) -> Result<(Vec<usize>, Tensor<T>)> {
        if n == 0 || !self.samples.is_multiple_of(n) {
            return Err(Error::Config(format!(
                "batch of {} samples cannot be split evenly over {n} workers",
                self.samples
            )));
        }
        let rows = self.samples / n * self.seq;
        let ids = self.ids[rank * rows..(rank + 1) * rows].to_vec();
        Ok((ids, self.targets.narrow(0, rank * rows, rows)?))
    }

    /// Mean-squared-error denominator: every logit of the global batch.
    pub fn loss_denominator(&self) -> usize {
        self.samples * self.seq * self.vocab
    }
}

/// N workers holding one shard of each unit, driven pass by pass.
#[derive(Debug, Clone)]
pub struct ShardedUnits<T> {
    units: Vec<UnitSpec>,
    group: WorkerGroup,
    mode: RotationMode,
    workers: Vec<Worker<T>>,
}

impl<T: Scalar> ShardedUnits<T> {
    /// Packs every unit's full parameters and hands shard `r` to worker `r`.
    pub fn new(
        units: Vec<UnitSpec>,
        params: &[UnitParams<T>],
        mode: RotationMode,
        transport: TransportKind,
    ) -> Result<Self> {
        let n = units
            .first()
            .map(UnitSpec::n)
            .ok_or_else(|| Error::Argument("no units".into()))?;
        if units.iter().any(|u| u.n() != n) {
            return Err(Error::Argument(
                "units disagree on the partition factor".into(),
            ));
        }
        if params.len() != units.len() {
            return Err(Error::Argument(format!(
                "{} units given {} parameter sets",
                units.len(),
                params.len()
            )));
        }
        for (i, u) in units.iter().enumerate() {
            if u.id != i {
                return Err(Error::Argument(format!(
                    "unit {} listed at position {i}",
                    u.id
                )));
            }
        }
        let flats = units
            .iter()
            .zip(params)
            .map(|(u, p)| u.layout.pack(&p.tensors))
            .collect::<Result<Vec<_>>>()?;
        let workers = (0..n)
            .map(|r| {
                let shards = flats
                    .iter()
                    .map(|f| f.shard_view(r))
                    .collect::<Result<Vec<_>>>()?;
                let gates = params.iter().map(|p| p.gate.clone()).collect();
                Worker::new(r, n, &units, shards, gates)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            units,
            group: WorkerGroup::new(n, transport)?,
            mode,
            workers,
        })
    }

    pub fn n(&self) -> usize {
        self.group.n()
    }

    pub fn mode(&self) -> RotationMode {
        self.mode
    }

    pub fn units(&self) -> &[UnitSpec] {
        &self.units
    }

    pub fn workers(&self) -> &[Worker<T>] {
        &self.workers
    }

    pub fn workers_mut(&mut self) -> &mut [Worker<T>] {
        &mut self.workers
    }

    pub fn zero_grad(&mut self) {
        for w in &mut self.workers {
            w.zero_grad();
        }
    }

    fn pass(&mut self, unit: usize, backward: bool) -> Result<()> {
        let n = self.n();
        let ops = if backward {
            backward_schedule(n, self.mode)
        } else {
            forward_schedule(n, self.mode)
        };
        let spec = &self.units[unit];
        let mut members: Vec<LayerMember<'_, T>> = self
            .workers
            .iter_mut()
            .map(|worker| LayerMember { worker, spec })
            .collect();
        self.group
            .run(&mut members, &ops, |m: &mut LayerMember<'_, T>, s| {
                if backward {
                    m.backward_step(s)
                } else {
                    m.forward_step(s)
                }
            })
    }

    /// Full forward pass of `unit`; returns each worker's output.
    pub fn forward_unit(
        &mut self,
        unit: usize,
        inputs: Vec<LayerInput<T>>,
    ) -> Result<Vec<Tensor<T>>> {
        if inputs.len() != self.n() {
            return Err(Error::Argument(format!(
                "{} inputs for {} workers",
                inputs.len(),
                self.n()
            )));
        }
        let spec = &self.units[unit];
        for (w, x) in self.workers.iter_mut().zip(inputs) {
            w.begin_forward(spec, x)?;
        }
        self.pass(unit, false)?;
        Ok(self
            .workers
            .iter_mut()
            .map(|w| w.take_result(unit).expect("forward produces output"))
            .collect())
    }

    /// Full backward pass of `unit`; returns each worker's input gradient (none for embeddings).
    pub fn backward_unit(
        &mut self,
        unit: usize,
        upstream: Vec<Tensor<T>>,
    ) -> Result<Vec<Option<Tensor<T>>>> {
        if upstream.len() != self.n() {
            return Err(Error::Argument(format!(
                "{} gradients for {} workers",
                upstream.len(),
                self.n()
            )));
        }
        let spec = &self.units[unit];
        for (w, dy) in self.workers.iter_mut().zip(upstream) {
            w.begin_backward(spec, dy)?;
        }
        self.pass(unit, true)?;
        Ok(self
            .workers
            .iter_mut()
            .map(|w| w.take_result(unit))
            .collect())
    }

    /// Sums the replicated gate's per-worker gradients with a ring allgather, in rank order.
    pub fn sync_gate(&mut self, unit: usize) -> Result<()> {
        let locals = self
            .workers
            .iter_mut()
            .map(|w| {
                w.layers[unit]
                    .gate
                    .as_mut()
                    .and_then(|g| g.take_local_grad())
                    .ok_or_else(|| {
                        Error::State(format!("unit {unit} has no gate gradient to sync"))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let rows = locals[0].shape()[0];
        let (gathered, stats) = self.group.ring_allgather_tensors(&locals)?;
        for ((w, full), st) in self.workers.iter_mut().zip(gathered).zip(&stats) {
            w.ledger.alloc(Category::Other, full.bytes());
            let layer = &mut w.layers[unit];
            layer.port.merge_stats(st);
            let gate = layer.gate.as_mut().expect("checked above");
            for block in full.split(0, full.shape()[0] / rows)? {
                gate.grad.add_assign(&block)?;
            }
            w.ledger.free(Category::Other, full.bytes());
        }
        Ok(())
    }

    fn collect(
        &self,
        pick: impl Fn(&Worker<T>, usize) -> (Tensor<T>, Option<Tensor<T>>),
    ) -> Result<Vec<UnitParams<T>>> {
        self.units
            .iter()
            .map(|u| {
                for w in &self.workers {
                    if w.layers[u.id].slot.logical_id != w.rank {
                        return Err(Error::State(format!(
                            "{}: rank {} is not at home position",
                            u.name, w.rank
                        )));
                    }
                }
                let picked: Vec<_> = self.workers.iter().map(|w| pick(w, u.id)).collect();
                let flat = concat(&picked.iter().map(|p| p.0.clone()).collect::<Vec<_>>(), 0)?;
                let tensors = u.layout.unpack(flat.data())?;
                Ok(UnitParams {
                    tensors,
                    gate: picked[0].1.clone(),
                })
            })
            .collect()
    }

    /// Full gradients reassembled from every worker's home shard accumulator.
    pub fn gradients(&self) -> Result<Vec<UnitParams<T>>> {
        self.collect(|w, u| {
            let l = &w.layers[u];
            (
                l.slot.grad_acc.clone(),
                l.gate.as_ref().map(|g| g.grad.clone()),
            )
        })
    }

    /// Full parameters reassembled from every worker's home shard.
    pub fn parameters(&self) -> Result<Vec<UnitParams<T>>> {
        self.collect(|w, u| {
            let l = &w.layers[u];
            (
                l.slot.weight.clone(),
                l.gate.as_ref().map(|g| g.weight.clone()),
            )
        })
    }

    /// Test hook: mislabels the shard held by `rank` so the next step's identity check fails.
    pub fn corrupt_shard(&mut self, rank: usize, unit: usize) {
        let n = self.n();
        let slot = &mut self.workers[rank].layers[unit].slot;
        slot.logical_id = (slot.logical_id + 1) % n.max(2);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput<T> {
    pub loss: T,
    /// Per-worker logits `[rows, vocab]`, worker order = batch order.
    pub logits: Vec<Tensor<T>>,
}

impl<T: Scalar> StepOutput<T> {
    pub fn gathered_logits(&self) -> Result<Tensor<T>> {
        concat(&self.logits, 0)
    }
}

/// Per-worker tensors the driver keeps between forward and backward of one block.
struct BlockSaved<T> {
    /// Split attention: fused `[q | k | v]` and probabilities.
    core: Option<Vec<(Tensor<T>, Tensor<T>)>>,
    /// Dense FFN: pre-activation `h`, the saved input of GeLU.
    h: Option<Vec<Tensor<T>>>,
}

fn book<T: Scalar>(w: &mut Worker<T>, t: &Tensor<T>) {
    w.ledger.alloc(Category::Activation, t.bytes());
}

fn unbook<T: Scalar>(w: &mut Worker<T>, t: &Tensor<T>) {
    w.ledger.free(Category::Activation, t.bytes());
}

fn dense<T: Scalar>(xs: &[Tensor<T>]) -> Vec<LayerInput<T>> {
    xs.iter().cloned().map(LayerInput::Dense).collect()
}

fn unwrap_grads<T>(gs: Vec<Option<Tensor<T>>>) -> Vec<Tensor<T>> {
    gs.into_iter()
        .map(|g| g.expect("unit produces an input gradient"))
        .collect()
}

/// In-place residual add; the sum reuses `y`'s booking.
fn residual<T: Scalar>(ys: Vec<Tensor<T>>, xs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    ys.into_iter()
        .zip(xs)
        .map(|(mut y, x)| {
            y.add_assign(x)?;
            Ok(y)
        })
        .collect()
}

/// A rotated transformer over `n` workers.
#[derive(Debug, Clone)]
pub struct RtpTransformer<T> {
    stack: Stack,
    engine: ShardedUnits<T>,
}

impl<T: Scalar> RtpTransformer<T> {
    pub fn new(
        stack: Stack,
        params: &ModelParams<T>,
        mode: RotationMode,
        transport: TransportKind,
    ) -> Result<Self> {
        let engine = ShardedUnits::new(stack.units.clone(), &params.units, mode, transport)?;
        Ok(Self { stack, engine })
    }

    pub fn stack(&self) -> &Stack {
        &self.stack
    }

    pub fn engine(&self) -> &ShardedUnits<T> {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut ShardedUnits<T> {
        &mut self.engine
    }

    /// Forward, loss and backward for one global batch; gradients land in the home shards.
    pub fn train_step(&mut self, batch: &Batch<T>) -> Result<StepOutput<T>> {
        let n = self.engine.n();
        let stack = &self.stack;
        let cfg = &stack.config;
        let (seq, d) = (cfg.sequence_length, cfg.head_dim());
        let shards = (0..n)
            .map(|r| batch.shard(r, n))
            .collect::<Result<Vec<_>>>()?;
        let denom = batch.loss_denominator();
        let e = &mut self.engine;
        e.zero_grad();

        let mut x = e.forward_unit(
            stack.embedding,
            shards
                .iter()
                .map(|(ids, _)| LayerInput::Ids(ids.clone()))
                .collect(),
        )?;
        let mut saved = Vec::with_capacity(stack.blocks.len());
        for block in &stack.blocks {
            let (y, core) = match block.attn {
                AttnBlock::Sharded { attn } => (e.forward_unit(attn, dense(&x))?, None),
                AttnBlock::Split { qkv, out } => {
                    let fused = e.forward_unit(qkv, dense(&x))?;
                    let mut cores = Vec::with_capacity(n);
                    let mut ctxs = Vec::with_capacity(n);
                    for (w, t) in e.workers.iter_mut().zip(fused) {
                        let p = t.split(1, 3)?;
                        let (probs, ctx) = attention::core_forward(&p[0], &p[1], &p[2], seq, d)?;
                        book(w, &probs);
                        book(w, &ctx);
                        cores.push((t, probs));
                        ctxs.push(LayerInput::Dense(ctx));
                    }
                    (e.forward_unit(out, ctxs)?, Some(cores))
                }
            };
            let x1 = residual(y, &x)?;
            let (f, h) = match block.ffn {
                FfnBlock::Dense { ffn1, ffn2 } => {
                    let h = e.forward_unit(ffn1, dense(&x1))?;
                    let mut a = Vec::with_capacity(n);
                    for (w, hr) in e.workers.iter_mut().zip(&h) {
                        let ar = hr.gelu();
                        book(w, &ar);
                        a.push(LayerInput::Dense(ar));
                    }
                    (e.forward_unit(ffn2, a)?, Some(h))
                }
                FfnBlock::Moe { moe } => (e.forward_unit(moe, dense(&x1))?, None),
            };
            x = residual(f, &x1)?;
            saved.push(BlockSaved { core, h });
        }
        let logits = e.forward_unit(stack.head, dense(&x))?;
        drop(x);

        let mut loss = T::zero();
        let mut dlogits = Vec::with_capacity(n);
        for ((w, lg), (_, target)) in e.workers.iter_mut().zip(&logits).zip(&shards) {
            loss += mse_loss(lg, target, denom)?;
            let g = mse_grad(lg, target, denom)?;
            book(w, &g);
            dlogits.push(g);
        }

        let mut g = unwrap_grads(e.backward_unit(stack.head, dlogits.clone())?);
        for ((w, dl), lg) in e.workers.iter_mut().zip(&dlogits).zip(&logits) {
            unbook(w, dl);
            unbook(w, lg);
        }
        for (block, saved) in stack.blocks.iter().zip(saved).rev() {
            let dx1 = match block.ffn {
                FfnBlock::Dense { ffn1, ffn2 } => {
                    let da = unwrap_grads(e.backward_unit(ffn2, g.clone())?);
                    let h = saved.h.expect("dense block saved h");
                    let mut dh = Vec::with_capacity(n);
                    for ((w, hr), dar) in e.workers.iter_mut().zip(&h).zip(&da) {
                        dh.push(hr.gelu_backward(dar)?);
                        unbook(w, hr);
                    }
                    let dx1 = unwrap_grads(e.backward_unit(ffn1, dh.clone())?);
                    for (w, t) in e.workers.iter_mut().zip(&dh) {
                        unbook(w, t);
                    }
                    dx1
                }
                FfnBlock::Moe { moe } => {
                    let dx1 = unwrap_grads(e.backward_unit(moe, g.clone())?);
                    e.sync_gate(moe)?;
                    dx1
                }
            };
            accumulate_residual(&mut e.workers, &mut g, dx1)?;
            let dxa = match block.attn {
                AttnBlock::Sharded { attn } => unwrap_grads(e.backward_unit(attn, g.clone())?),
                AttnBlock::Split { qkv, out } => {
                    let dctx = unwrap_grads(e.backward_unit(out, g.clone())?);
                    let cores = saved.core.expect("split block saved its core");
                    let mut dfused = Vec::with_capacity(n);
                    for ((w, (fused, probs)), dc) in e.workers.iter_mut().zip(&cores).zip(&dctx) {
                        let p = fused.split(1, 3)?;
                        let (dq, dk, dv) =
                            attention::core_backward(&p[0], &p[1], &p[2], probs, dc, seq, d)?;
                        unbook(w, probs);
                        unbook(w, fused);
                        unbook(w, dc);
                        let df = concat(&[dq, dk, dv], 1)?;
                        book(w, &df);
                        dfused.push(df);
                    }
                    let dxa = unwrap_grads(e.backward_unit(qkv, dfused.clone())?);
                    for (w, t) in e.workers.iter_mut().zip(&dfused) {
                        unbook(w, t);
                    }
                    dxa
                }
            };
            accumulate_residual(&mut e.workers, &mut g, dxa)?;
        }
        e.backward_unit(stack.embedding, g.clone())?;
        for (w, t) in e.workers.iter_mut().zip(&g) {
            unbook(w, t);
        }
        Ok(StepOutput { loss, logits })
    }
}

/// `g += part` per worker, then releases `part`.
fn accumulate_residual<T: Scalar>(
    workers: &mut [Worker<T>],
    g: &mut [Tensor<T>],
    parts: Vec<Tensor<T>>,
) -> Result<()> {
    for ((w, gr), p) in workers.iter_mut().zip(g.iter_mut()).zip(parts) {
        gr.add_assign(&p)?;
        unbook(w, &p);
    }
    Ok(())
}

/// Worker-local gate shapes must agree with the ledger offset convention.
pub fn gate_unit(unit: usize) -> usize {
    GATE_UNIT_OFFSET + unit
}
