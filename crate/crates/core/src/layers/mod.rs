//! Sharded layers driven by weight rotation.
//!
//! Every worker keeps one [`LayerState`] per layer unit. A forward pass runs
//! `N` compute steps, each against whichever shard is resident; partial
//! results wait in a reorder buffer and are combined in canonical shard order
//! `0..N` at the final step, so the result does not depend on the rank.
//!
//! Ledger conventions, mirrored by the serial oracle:
//! - tensors saved for backward and layer outputs are `Activation`;
//! - reorder-buffer partials and backward scratch are `Other`;
//! - at the final backward step the saved tensors and the layer input are
//!   released before the input gradient is allocated.

pub mod attention;
pub mod embedding;
pub mod linear;
pub mod model;
pub mod moe;
pub mod serial;
pub mod tape;

use crate::analysis::{Category, MemoryLedger};
use crate::error::{Error, Result};
use crate::partition::{
    layout_attention, layout_embedding, layout_linear, layout_moe, layout_projections, ShardLayout,
};
use crate::ring::{CommKind, RingMember, RingPort, RingView, ShardSlot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub use model::{
    build_rtp_transformer, Batch, ModelParams, RtpTransformer, ShardedUnits, Stack, UnitParams,
};
pub use tape::{Cache, ReplayTape, TapeRecord};

/// Ledger unit id of the replicated gate belonging to MoE unit `u` is `GATE_UNIT_OFFSET + u`.
pub const GATE_UNIT_OFFSET: usize = 1 << 20;

const PROJECTION_NAMES: [&str; 3] = ["wq", "wk", "wv"];

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UnitKind {
    Embedding {
        vocab: usize,
        dim: usize,
    },
    /// `matrices` projections `[input, output]` sharing one input; output columns
    /// are `[Y_0 | Y_1 | ...]`. A bias is only supported for a single matrix.
    Linear {
        input: usize,
        output: usize,
        matrices: usize,
        bias: bool,
    },
    /// Bias-free multi-head self-attention over `seq`-token samples.
    Attention {
        hidden: usize,
        heads: usize,
        seq: usize,
    },
    /// Top-1 routed experts, each a two-layer GeLU FFN, plus a replicated gate.
    Moe {
        hidden: usize,
        ffn: usize,
        experts: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnitSpec {
    pub id: usize,
    pub name: String,
    pub kind: UnitKind,
    pub layout: ShardLayout,
}

impl UnitSpec {
    pub fn new(id: usize, name: impl Into<String>, kind: UnitKind, n: usize) -> Result<Self> {
        let layout = match kind {
            UnitKind::Embedding { vocab, dim } => layout_embedding(vocab, dim, n)?,
            UnitKind::Linear {
                input,
                output,
                matrices: 1,
                bias: true,
            } => layout_linear(input, output, n)?,
            UnitKind::Linear {
                bias: true,
                matrices,
                ..
            } => {
                return Err(Error::Argument(format!(
                    "bias needs a single matrix, got {matrices}"
                )))
            }
            UnitKind::Linear {
                input,
                output,
                matrices,
                bias: false,
            } => {
                if matrices == 0 || matrices > PROJECTION_NAMES.len() {
                    return Err(Error::Argument(format!(
                        "unsupported projection count {matrices}"
                    )));
                }
                let names: &[&'static str] = if matrices == 1 {
                    &["weight"]
                } else {
                    &PROJECTION_NAMES[..matrices]
                };
                layout_projections(input, output, names, n)?
            }
            UnitKind::Attention { hidden, heads, seq } => {
                if seq == 0 {
                    return Err(Error::Config("sequence length must be positive".into()));
                }
                layout_attention(hidden, heads, n)?
            }
            UnitKind::Moe {
                hidden,
                ffn,
                experts,
            } => layout_moe(experts, hidden, ffn, n)?,
        };
        Ok(Self {
            id,
            name: name.into(),
            kind,
            layout,
        })
    }

    pub fn n(&self) -> usize {
        self.layout.n()
    }

    pub fn gate_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            UnitKind::Moe {
                hidden, experts, ..
            } => Some(vec![hidden, experts]),
            _ => None,
        }
    }

    /// Full parameter shapes in draw order: layout parameters, then the gate.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut v: Vec<Vec<usize>> = self
            .layout
            .params()
            .iter()
            .map(|p| p.shape.clone())
            .collect();
        v.extend(self.gate_shape());
        v
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    pub fn input_width(&self) -> usize {
        match self.kind {
            UnitKind::Embedding { .. } => 0,
            UnitKind::Linear { input, .. } => input,
            UnitKind::Attention { hidden, .. } | UnitKind::Moe { hidden, .. } => hidden,
        }
    }

    /// Columns of the upstream gradient (equal to the output width).
    pub fn output_width(&self) -> usize {
        match self.kind {
            UnitKind::Embedding { dim, .. } => dim,
            UnitKind::Linear {
                output, matrices, ..
            } => output * matrices,
            UnitKind::Attention { hidden, .. } | UnitKind::Moe { hidden, .. } => hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerInput<T> {
    Ids(Vec<usize>),
    Dense(Tensor<T>),
}

impl<T: Scalar> LayerInput<T> {
    /// Booked bytes; token ids are not tracked.
    fn bytes(&self) -> u64 {
        match self {
            LayerInput::Ids(_) => 0,
            LayerInput::Dense(t) => t.bytes(),
        }
    }

    fn dense(&self) -> Result<&Tensor<T>> {
        match self {
            LayerInput::Dense(t) => Ok(t),
            LayerInput::Ids(_) => Err(Error::Config("dense layer given token ids".into())),
        }
    }

    fn ids(&self) -> Result<&[usize]> {
        match self {
            LayerInput::Ids(ids) => Ok(ids),
            LayerInput::Dense(_) => Err(Error::Config("embedding given a dense input".into())),
        }
    }

    fn rows(&self) -> usize {
        match self {
            LayerInput::Ids(ids) => ids.len(),
            LayerInput::Dense(t) => t.shape()[0],
        }
    }
}

/// Replicated MoE gate `[hidden, experts]` and its per-pass routing state.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState<T> {
    pub weight: Tensor<T>,
    pub grad: Tensor<T>,
    probs: Option<Tensor<T>>,
    choice: Vec<usize>,
    dprob: Vec<T>,
    local_grad: Option<Tensor<T>>,
}

impl<T: Scalar> GateState<T> {
    fn new(weight: Tensor<T>) -> Self {
        let grad = Tensor::zeros(weight.shape());
        Self {
            weight,
            grad,
            probs: None,
            choice: Vec::new(),
            dprob: Vec::new(),
            local_grad: None,
        }
    }

    /// Expert chosen for each token of the current pass.
    pub fn choice(&self) -> &[usize] {
        &self.choice
    }

    /// This worker's unsynchronised gate gradient from the last backward pass.
    pub fn take_local_grad(&mut self) -> Option<Tensor<T>> {
        self.local_grad.take()
    }
}

/// One worker's state for one layer unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState<T> {
    pub slot: ShardSlot<T>,
    pub port: RingPort<T>,
    pub gate: Option<GateState<T>>,
    tape: ReplayTape<T>,
    input: Option<LayerInput<T>>,
    upstream: Option<Tensor<T>>,
    partials: Vec<Option<Tensor<T>>>,
    partial_rows: Vec<Vec<usize>>,
    retired: u64,
    result: Option<Tensor<T>>,
}

impl<T: Scalar> LayerState<T> {
    pub fn tape(&self) -> &ReplayTape<T> {
        &self.tape
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Worker<T> {
    pub rank: usize,
    pub n: usize,
    pub ledger: MemoryLedger,
    pub layers: Vec<LayerState<T>>,
}

impl<T: Scalar> Worker<T> {
    /// Worker at home position holding shard `rank` of every unit.
    pub fn new(
        rank: usize,
        n: usize,
        units: &[UnitSpec],
        shards: Vec<Tensor<T>>,
        gates: Vec<Option<Tensor<T>>>,
    ) -> Result<Self> {
        if shards.len() != units.len() || gates.len() != units.len() {
            return Err(Error::Argument(
                "one shard and one gate slot per unit required".into(),
            ));
        }
        let mut ledger = MemoryLedger::new();
        let mut layers = Vec::with_capacity(units.len());
        for ((spec, shard), gate) in units.iter().zip(shards).zip(gates) {
            if shard.len() != spec.layout.shard_len() {
                return Err(Error::dim(
                    "worker shard",
                    &[spec.layout.shard_len()],
                    shard.shape(),
                ));
            }
            let slot = ShardSlot::home(rank, shard);
            ledger.alloc_unit(spec.id, Category::Param, slot.weight.bytes());
            ledger.alloc_unit(spec.id, Category::Grad, slot.grad_acc.bytes());
            let gate = match (spec.gate_shape(), gate) {
                (Some(shape), Some(g)) if g.shape() == shape.as_slice() => {
                    ledger.alloc_unit(GATE_UNIT_OFFSET + spec.id, Category::Param, g.bytes());
                    ledger.alloc_unit(GATE_UNIT_OFFSET + spec.id, Category::Grad, g.bytes());
                    Some(GateState::new(g))
                }
                (None, None) => None,
                (Some(shape), got) => {
                    return Err(Error::dim(
                        "gate",
                        &shape,
                        got.as_ref().map_or(&[][..], |g| g.shape()),
                    ))
                }
                (None, Some(_)) => {
                    return Err(Error::Argument(format!("unit {} has no gate", spec.name)))
                }
            };
            layers.push(LayerState {
                slot,
                port: RingPort::new(CommKind::Rotation),
                gate,
                tape: ReplayTape::default(),
                input: None,
                upstream: None,
                partials: vec![None; n],
                partial_rows: vec![Vec::new(); n],
                retired: 0,
                result: None,
            });
        }
        Ok(Self {
            rank,
            n,
            ledger,
            layers,
        })
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.slot.grad_acc.fill_zero();
            if let Some(g) = &mut l.gate {
                g.grad.fill_zero();
            }
        }
    }

    /// Hands the layer its input; the input's booking moves with it.
    pub fn begin_forward(&mut self, spec: &UnitSpec, input: LayerInput<T>) -> Result<()> {
        let st = &mut self.layers[spec.id];
        if !st.tape.is_empty() || st.input.is_some() {
            return Err(Error::State(format!(
                "{}: forward started while a pass is unfinished",
                spec.name
            )));
        }
        if st.slot.logical_id != self.rank {
            return Err(Error::Protocol(format!(
                "shard-id assertion failed: {} on rank {} starts forward holding shard {}",
                spec.name, self.rank, st.slot.logical_id
            )));
        }
        match (&spec.kind, &input) {
            (UnitKind::Embedding { vocab, .. }, LayerInput::Ids(ids)) => {
                if let Some(&bad) = ids.iter().find(|&&i| i >= *vocab) {
                    return Err(Error::Index {
                        what: "vocabulary",
                        index: bad,
                        bound: *vocab,
                    });
                }
            }
            (UnitKind::Embedding { .. }, LayerInput::Dense(_)) => {
                input.ids()?;
            }
            (_, LayerInput::Dense(x)) => {
                let (rows, cols) = x.dims2()?;
                if cols != spec.input_width() {
                    return Err(Error::Argument(format!(
                        "{}: input shape {:?}, expected [{rows}, {}]",
                        spec.name,
                        x.shape(),
                        spec.input_width()
                    )));
                }
                if let UnitKind::Attention { seq, .. } = spec.kind {
                    if rows % seq != 0 {
                        return Err(Error::Argument(format!(
                            "{rows} rows are not whole {seq}-token samples"
                        )));
                    }
                }
            }
            (_, LayerInput::Ids(_)) => {
                input.dense()?;
            }
        }
        if let Some(gate) = &mut st.gate {
            let x = input.dense()?;
            let (probs, choice) = moe::route(x, &gate.weight)?;
            self.ledger.alloc(Category::Activation, probs.bytes());
            gate.probs = Some(probs);
            gate.choice = choice;
        }
        st.input = Some(input);
        Ok(())
    }

    pub fn begin_backward(&mut self, spec: &UnitSpec, upstream: Tensor<T>) -> Result<()> {
        let st = &mut self.layers[spec.id];
        if st.tape.len() != self.n || st.input.is_none() {
            return Err(Error::State(format!(
                "{}: backward without a completed forward",
                spec.name
            )));
        }
        let rows = st.input.as_ref().map_or(0, LayerInput::rows);
        if upstream.shape() != [rows, spec.output_width()] {
            return Err(Error::Argument(format!(
                "{}: upstream shape {:?}, expected [{rows}, {}]",
                spec.name,
                upstream.shape(),
                spec.output_width()
            )));
        }
        if let Some(gate) = &mut st.gate {
            gate.dprob = vec![T::zero(); rows];
            self.ledger.alloc(Category::Other, rows as u64 * T::bytes());
        }
        st.upstream = Some(upstream);
        Ok(())
    }

    /// Output of the last completed pass (forward output or input gradient).
    pub fn take_result(&mut self, unit: usize) -> Option<Tensor<T>> {
        self.layers[unit].result.take()
    }
}

/// A worker viewed as a participant in one unit's rotation pass.
pub struct LayerMember<'a, T> {
    pub worker: &'a mut Worker<T>,
    pub spec: &'a UnitSpec,
}

impl<T: Scalar> RingMember<T> for LayerMember<'_, T> {
    fn ring_view(&mut self) -> RingView<'_, T> {
        let w = &mut *self.worker;
        let st = &mut w.layers[self.spec.id];
        RingView {
            rank: w.rank,
            unit: self.spec.id,
            slot: &mut st.slot,
            port: &mut st.port,
            ledger: &mut w.ledger,
        }
    }
}

fn check_buffer_released(spec: &UnitSpec, ledger: &MemoryLedger) -> Result<()> {
    let live = ledger.unit_current(spec.id, Category::CommBuffer);
    if live != 0 {
        return Err(Error::State(format!(
            "{}: {live} B of rotation buffer live at the final step",
            spec.name
        )));
    }
    Ok(())
}

fn sum_in_order<T: Scalar>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let mut acc = parts[0].clone();
    for p in &parts[1..] {
        acc.add_assign(p)?;
    }
    Ok(acc)
}

/// Adds local parameter gradients into the flat accumulator, in layout order.
fn accumulate<T: Scalar>(acc: &mut Tensor<T>, grads: &[Tensor<T>]) -> Result<()> {
    let total: usize = grads.iter().map(Tensor::len).sum();
    if total != acc.len() {
        return Err(Error::dim("gradient accumulate", &[acc.len()], &[total]));
    }
    let mut off = 0;
    for g in grads {
        for (a, &b) in acc.data_mut()[off..off + g.len()].iter_mut().zip(g.data()) {
            *a += b;
        }
        off += g.len();
    }
    Ok(())
}

impl<T: Scalar> LayerMember<'_, T> {
    pub fn forward_step(&mut self, s: usize) -> Result<()> {
        let spec = self.spec;
        let w = &mut *self.worker;
        let (rank, n) = (w.rank, w.n);
        let st = &mut w.layers[spec.id];
        let j = st.slot.logical_id;
        let expected = (rank + n - s % n) % n;
        if j != expected {
            return Err(Error::Protocol(format!(
                "shard-id assertion failed: {} forward step {s} on rank {rank} expects shard {expected}, found {j}",
                spec.name
            )));
        }
        let input = st
            .input
            .as_ref()
            .ok_or_else(|| Error::State(format!("{}: step without input", spec.name)))?;
        let locals = spec.layout.split_shard(st.slot.weight.data())?;
        let (partial, cache) = match spec.kind {
            UnitKind::Embedding { .. } => (
                embedding::forward(input.ids()?, &locals)?,
                tape::Cache::None,
            ),
            UnitKind::Linear { matrices, bias, .. } => (
                linear::forward(input.dense()?, &locals, matrices, bias)?,
                tape::Cache::None,
            ),
            UnitKind::Attention { hidden, heads, seq } => {
                attention::forward_step(input.dense()?, &locals, seq, hidden / heads)?
            }
            UnitKind::Moe { .. } => {
                let gate = st.gate.as_ref().expect("moe unit has a gate");
                let probs = gate.probs.as_ref().expect("routing precedes steps");
                let (partial, cache) =
                    moe::forward_step(input.dense()?, probs, &gate.choice, j, &locals)?;
                if let tape::Cache::Expert { rows, .. } = &cache {
                    st.partial_rows[j] = rows.clone();
                }
                (partial, cache)
            }
        };
        w.ledger.alloc(Category::Other, partial.bytes());
        w.ledger.alloc(Category::Activation, cache.bytes());
        st.tape.push(TapeRecord {
            logical_id: j,
            cache,
        });
        st.partials[j] = Some(partial);
        if s + 1 == n {
            check_buffer_released(spec, &w.ledger)?;
            let parts: Vec<Tensor<T>> = st
                .partials
                .iter_mut()
                .map(|p| p.take().expect("every shard visited"))
                .collect();
            let out = match spec.kind {
                UnitKind::Embedding { .. } => linear::assemble(&parts, 1)?,
                UnitKind::Linear { matrices, .. } => linear::assemble(&parts, matrices)?,
                UnitKind::Attention { .. } => sum_in_order(&parts)?,
                UnitKind::Moe { hidden, .. } => {
                    moe::assemble(&parts, &st.partial_rows, input.rows(), hidden)?
                }
            };
            w.ledger.alloc(Category::Activation, out.bytes());
            for p in &parts {
                w.ledger.free(Category::Other, p.bytes());
            }
            st.result = Some(out);
        }
        Ok(())
    }

    pub fn backward_step(&mut self, s: usize) -> Result<()> {
        let spec = self.spec;
        let w = &mut *self.worker;
        let (rank, n) = (w.rank, w.n);
        let st = &mut w.layers[spec.id];
        let record = st
            .tape
            .pop()
            .ok_or_else(|| Error::State(format!("{}: backward without forward", spec.name)))?;
        let j = st.slot.logical_id;
        let expected = (rank + 1 + s) % n;
        if record.logical_id != j || j != expected {
            return Err(Error::Protocol(format!(
                "shard-id assertion failed: {} backward step {s} on rank {rank} replays shard {} against resident shard {j} (expected {expected})",
                spec.name, record.logical_id
            )));
        }
        let input = st
            .input
            .as_ref()
            .ok_or_else(|| Error::State(format!("{}: step without input", spec.name)))?;
        let dy = st
            .upstream
            .as_ref()
            .ok_or_else(|| Error::State(format!("{}: step without upstream", spec.name)))?;
        let locals = spec.layout.split_shard(st.slot.weight.data())?;
        let cols = spec.layout.range(j);
        let (grads, dx) = match spec.kind {
            UnitKind::Embedding { .. } => {
                (embedding::backward(input.ids()?, dy, &locals, cols)?, None)
            }
            UnitKind::Linear {
                output,
                matrices,
                bias,
                ..
            } => {
                let (g, dx) =
                    linear::backward(input.dense()?, dy, &locals, cols, output, matrices, bias)?;
                (g, Some(dx))
            }
            UnitKind::Attention { hidden, heads, seq } => {
                let (g, dx) = attention::backward_step(
                    input.dense()?,
                    &record.cache,
                    dy,
                    &locals,
                    seq,
                    hidden / heads,
                )?;
                (g, Some(dx))
            }
            UnitKind::Moe { .. } => {
                let gate = st.gate.as_mut().expect("moe unit has a gate");
                let probs = gate.probs.as_ref().expect("routing precedes steps");
                let (g, dx) =
                    moe::backward_step(&record.cache, dy, probs, j, &locals, &mut gate.dprob)?;
                (g, Some(dx))
            }
        };
        accumulate(&mut st.slot.grad_acc, &grads)?;
        if let Some(dx) = dx {
            w.ledger.alloc(Category::Other, dx.bytes());
            st.partials[j] = Some(dx);
        }
        st.retired += record.cache.bytes();
        if s + 1 == n {
            check_buffer_released(spec, &w.ledger)?;
            w.ledger
                .free(Category::Activation, std::mem::take(&mut st.retired));
            let input = st.input.take().expect("checked above");
            st.upstream = None;
            w.ledger.free(Category::Activation, input.bytes());
            let parts: Vec<Tensor<T>> = st.partials.iter_mut().filter_map(Option::take).collect();
            let dx = match spec.kind {
                UnitKind::Embedding { .. } => None,
                UnitKind::Linear { .. } | UnitKind::Attention { .. } => Some(sum_in_order(&parts)?),
                UnitKind::Moe { hidden, .. } => {
                    let gate = st.gate.as_mut().expect("moe unit has a gate");
                    let probs = gate.probs.take().expect("routing precedes steps");
                    w.ledger.free(Category::Activation, probs.bytes());
                    let x = input.dense()?;
                    let expert_dx = moe::assemble(&parts, &st.partial_rows, x.shape()[0], hidden)?;
                    let (dx, gate_grad) = moe::gate_backward(
                        x,
                        &gate.weight,
                        &probs,
                        &gate.choice,
                        &gate.dprob,
                        expert_dx,
                    )?;
                    w.ledger
                        .free(Category::Other, gate.dprob.len() as u64 * T::bytes());
                    gate.dprob.clear();
                    gate.local_grad = Some(gate_grad);
                    Some(dx)
                }
            };
            if let Some(dx) = &dx {
                w.ledger.alloc(Category::Activation, dx.bytes());
            }
            for p in &parts {
                w.ledger.free(Category::Other, p.bytes());
            }
            st.result = dx;
        }
        Ok(())
    }
}
