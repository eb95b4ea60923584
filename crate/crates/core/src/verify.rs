//! End-to-end checks of the rotated model against the serial reference and
//! against central finite differences.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::config::ModelConfig;
use crate::error::Result;
use crate::layers::serial::SerialModel;
use crate::layers::{
    build_rtp_transformer, Batch, LayerInput, RtpTransformer, ShardedUnits, UnitKind, UnitParams,
    UnitSpec,
};
use crate::ring::{RotationMode, TransportKind};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

/// Gathered outputs and the loss against the serial reference.
pub const OUTPUT_TOL: f64 = 1e-10;
/// Every parameter gradient against the serial reference.
pub const GRAD_TOL: f64 = 1e-9;
/// Analytic gradients against central differences.
pub const FD_TOL: f64 = 1e-6;
/// Central-difference step.
pub const FD_STEP: f64 = 1e-6;

/// `max |a - b| / max |b|`, or the absolute deviation when `b` is zero.
pub fn rel_err(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    let diff = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max);
    let scale = b.max_abs();
    if scale > 0.0 {
        diff / scale
    } else {
        diff
    }
}

/// Injected failure for negative tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Mislabel the shard held by `rank` for `unit` before the step.
    CorruptShard { rank: usize, unit: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub n: usize,
    pub mode: String,
    pub moe: bool,
    pub logits_rel: f64,
    pub loss_rel: f64,
    pub grad_rel: f64,
    pub worst_grad_unit: String,
    pub weights_restored: bool,
    pub ledgers_clean: bool,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.logits_rel < OUTPUT_TOL
            && self.loss_rel < OUTPUT_TOL
            && self.grad_rel < GRAD_TOL
            && self.weights_restored
            && self.ledgers_clean
    }
}

pub fn mode_name(mode: RotationMode) -> &'static str {
    match mode {
        RotationMode::InPlace => "RTP-inplace",
        RotationMode::OutOfPlace => "RTP-outofplace",
    }
}

/// One training step of the rotated model and of the serial model on the same batch.
pub fn check_equivalence(
    config: &ModelConfig,
    n: usize,
    mode: RotationMode,
    transport: TransportKind,
    samples_per_worker: usize,
    seed: u64,
    fault: Option<Fault>,
) -> Result<EquivalenceReport> {
    let stack = build_rtp_transformer(config, n)?;
    let params = stack.init_params::<f64>(seed);
    let batch = Batch::<f64>::random(config, samples_per_worker * n, seed);
    let mut serial = SerialModel::new(&stack, params.clone())?;
    let reference = serial.train_step(&batch)?;
    let mut rtp = RtpTransformer::new(stack.clone(), &params, mode, transport)?;
    if let Some(Fault::CorruptShard { rank, unit }) = fault {
        rtp.engine_mut().corrupt_shard(rank, unit);
    }
    let out = rtp.train_step(&batch)?;
    let logits_rel = rel_err(&out.gathered_logits()?, &reference.logits);
    let loss_rel = (out.loss - reference.loss).abs() / reference.loss.abs().max(f64::MIN_POSITIVE);
    let grads = rtp.engine().gradients()?;
    let (mut grad_rel, mut worst_grad_unit) = (0.0, String::new());
    for ((spec, got), want) in stack.units.iter().zip(&grads).zip(&reference.grads) {
        for (g, w) in got.iter().zip(want.iter()) {
            let e = rel_err(g, w);
            if e > grad_rel || worst_grad_unit.is_empty() {
                grad_rel = e.max(grad_rel);
                worst_grad_unit = spec.name.clone();
            }
        }
    }
    Ok(EquivalenceReport {
        n,
        mode: mode_name(mode).into(),
        moe: config.moe,
        logits_rel,
        loss_rel,
        grad_rel,
        worst_grad_unit,
        weights_restored: rtp.engine().parameters()? == params.units,
        ledgers_clean: rtp
            .engine()
            .workers()
            .iter()
            .all(|w| w.ledger.only_persistent_live())
            && serial.ledger.only_persistent_live(),
    })
}

/// Location of one scalar parameter; `unit` indexes the checked layer kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamIndex {
    pub unit: usize,
    /// Position in the unit's tensor list; the gate comes last.
    pub tensor: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FdSample {
    pub kind: &'static str,
    pub unit: String,
    pub at: ParamIndex,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub samples: Vec<FdSample>,
    /// Per parameter kind: `max |analytic - numeric| / max |analytic|`.
    pub per_kind: BTreeMap<&'static str, f64>,
    pub max_rel: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel < FD_TOL
    }
}

fn kind_label(kind: &UnitKind, tensor: usize, tensors: usize) -> &'static str {
    match kind {
        UnitKind::Embedding { .. } => "embedding",
        UnitKind::Linear { bias: true, .. } => "linear",
        UnitKind::Linear { bias: false, .. } => "projection",
        UnitKind::Attention { .. } => "attention",
        UnitKind::Moe { .. } if tensor == tensors => "gate",
        UnitKind::Moe { .. } => "expert",
    }
}

fn scalar_mut(p: &mut [UnitParams<f64>], at: ParamIndex) -> &mut f64 {
    let u = &mut p[at.unit];
    let t = if at.tensor < u.tensors.len() {
        &mut u.tensors[at.tensor]
    } else {
        u.gate.as_mut().expect("gate index")
    };
    &mut t.data_mut()[at.index]
}

/// `sum_r <Y_r, C_r>` over workers, with the rotated unit's gradients when `grads` is set.
fn functional(
    spec: &UnitSpec,
    params: &UnitParams<f64>,
    inputs: &[LayerInput<f64>],
    coeffs: &[Tensor<f64>],
    mode: RotationMode,
    grads: bool,
) -> Result<(f64, Option<UnitParams<f64>>)> {
    let mut engine = ShardedUnits::new(
        vec![spec.clone()],
        std::slice::from_ref(params),
        mode,
        TransportKind::Lockstep,
    )?;
    let outs = engine.forward_unit(0, inputs.to_vec())?;
    let value = outs
        .iter()
        .zip(coeffs)
        .map(|(y, c)| {
            y.data()
                .iter()
                .zip(c.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        })
        .sum();
    if !grads {
        return Ok((value, None));
    }
    engine.backward_unit(0, coeffs.to_vec())?;
    if spec.gate_shape().is_some() {
        engine.sync_gate(0)?;
    }
    Ok((value, engine.gradients()?.pop()))
}

/// Per layer kind, compares the rotated unit's parameter gradients of a random
/// linear functional of its output with central differences. Inputs and
/// functional weights are uniform in `[-1, 1]`; `count` parameters are drawn
/// evenly across kinds.
pub fn gradient_check(
    config: &ModelConfig,
    n: usize,
    mode: RotationMode,
    samples_per_worker: usize,
    seed: u64,
    count: usize,
) -> Result<GradCheckReport> {
    let stack = build_rtp_transformer(config, n)?;
    let params = stack.init_params::<f64>(seed);
    let mut rng = SeededRng::new(seed ^ 0x9e37_79b9_7f4a_7c15);
    let rows = samples_per_worker * config.sequence_length;

    // First unit of each distinct kind, re-indexed as a standalone unit 0.
    let mut picked: Vec<(UnitSpec, UnitParams<f64>)> = Vec::new();
    for (spec, p) in stack.units.iter().zip(&params.units) {
        let label = kind_label(&spec.kind, 0, p.tensors.len());
        if picked
            .iter()
            .all(|(s, q)| kind_label(&s.kind, 0, q.tensors.len()) != label)
        {
            picked.push((
                UnitSpec {
                    id: 0,
                    ..spec.clone()
                },
                p.clone(),
            ));
        }
    }
    let mut cases = Vec::with_capacity(picked.len());
    for (spec, p) in picked {
        let inputs: Vec<LayerInput<f64>> = (0..n)
            .map(|_| match spec.kind {
                UnitKind::Embedding { vocab, .. } => LayerInput::Ids(rng.token_ids(rows, vocab)),
                _ => LayerInput::Dense(rng.tensor(&[rows, spec.input_width()], -1.0, 1.0)),
            })
            .collect();
        let coeffs: Vec<Tensor<f64>> = (0..n)
            .map(|_| rng.tensor(&[rows, spec.output_width()], -1.0, 1.0))
            .collect();
        let (_, grads) = functional(&spec, &p, &inputs, &coeffs, mode, true)?;
        cases.push((spec, p, inputs, coeffs, grads.expect("requested")));
    }

    let mut groups: BTreeMap<&'static str, Vec<(usize, usize, usize)>> = BTreeMap::new();
    for (c, (spec, p, ..)) in cases.iter().enumerate() {
        for (t, tensor) in p.iter().enumerate() {
            groups
                .entry(kind_label(&spec.kind, t, p.tensors.len()))
                .or_default()
                .push((c, t, tensor.len()));
        }
    }
    let kinds: Vec<&'static str> = groups.keys().copied().collect();
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let kind = kinds[i % kinds.len()];
        let cands = &groups[kind];
        let (c, tensor, len) = cands[rng.below(cands.len())];
        let (spec, p, inputs, coeffs, grads) = &cases[c];
        let at = ParamIndex {
            unit: c,
            tensor,
            index: rng.below(len),
        };
        let local = ParamIndex { unit: 0, ..at };
        let mut q = vec![p.clone()];
        let x0 = *scalar_mut(&mut q, local);
        *scalar_mut(&mut q, local) = x0 + FD_STEP;
        let (up, _) = functional(spec, &q[0], inputs, coeffs, mode, false)?;
        *scalar_mut(&mut q, local) = x0 - FD_STEP;
        let (down, _) = functional(spec, &q[0], inputs, coeffs, mode, false)?;
        samples.push(FdSample {
            kind,
            unit: spec.name.clone(),
            at,
            analytic: *scalar_mut(&mut [grads.clone()], local),
            numeric: (up - down) / (2.0 * FD_STEP),
        });
    }
    let mut per_kind = BTreeMap::new();
    for &kind in &kinds {
        let (diff, scale) =
            samples
                .iter()
                .filter(|s| s.kind == kind)
                .fold((0.0f64, 0.0f64), |(d, m), s| {
                    (
                        d.max((s.analytic - s.numeric).abs()),
                        m.max(s.analytic.abs()),
                    )
                });
        per_kind.insert(kind, if scale > 0.0 { diff / scale } else { diff });
    }
    let max_rel = per_kind.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        samples,
        per_kind,
        max_rel,
    })
}
