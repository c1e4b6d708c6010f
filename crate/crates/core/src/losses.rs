//! Training objective `ℓ_train = ℓ_LM + α · ℓ_local` and the two local
//! gate-supervision losses.

use serde::{Deserialize, Serialize};

use crate::backbone::AdapterTrace;
use crate::error::{Error, Result};
use crate::extension::{ExtensionConfig, GateKind};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Clamp applied to sigmoid gate values inside the cross-entropy.
pub const GATE_CE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Original,
    New,
}

/// Domain flag per sequence of a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DomainMask(pub Vec<Domain>);

impl DomainMask {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn count(&self, domain: Domain) -> usize {
        self.0.iter().filter(|&&d| d == domain).count()
    }

    /// One flag per token row, repeating each sequence flag `seq` times.
    pub fn token_flags(&self, seq: usize) -> impl Iterator<Item = Domain> + '_ {
        self.0.iter().flat_map(move |&d| std::iter::repeat_n(d, seq))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lm: f64,
    pub local_l1: f64,
    pub local_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `total = lm + alpha · (local_l1 + local_ce)`.
    pub fn new(lm: f64, local_l1: f64, local_ce: f64, alpha: f64) -> Self {
        LossBreakdown {
            lm,
            local_l1,
            local_ce,
            total: lm + alpha * (local_l1 + local_ce),
        }
    }
}

fn check_rows<S: Scalar>(tape: &Tape<S>, v: Var, rows: usize, what: &'static str) -> Result<()> {
    let shape = tape.value(v).shape();
    if tape.value(v).rows() != rows {
        return Err(Error::shape(what, shape, &[rows]));
    }
    Ok(())
}

/// Mean over layers and original-domain tokens of `‖y‖₁ / d`. Zero (and
/// gradient-free) when the batch holds no original-domain sequence.
pub fn l1_local_loss<S: Scalar>(
    tape: &mut Tape<S>,
    outputs: &[Var],
    mask: &DomainMask,
    seq: usize,
    d: usize,
) -> Result<Var> {
    if d == 0 {
        return Err(Error::Contract("l1_local_loss needs d > 0".into()));
    }
    let weights: Vec<f64> = mask
        .token_flags(seq)
        .map(|f| if f == Domain::Original { 1.0 } else { 0.0 })
        .collect();
    let n_original = weights.iter().filter(|&&w| w > 0.0).count();
    if n_original == 0 || outputs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }
    let mut sum: Option<Var> = None;
    for &y in outputs {
        check_rows(tape, y, weights.len(), "l1_local_loss")?;
        let part = tape.weighted_row_l1(y, &weights)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    let denom = (d * outputs.len() * n_original) as f64;
    Ok(tape.scale(sum.expect("non-empty outputs"), S::of(1.0 / denom)))
}

/// Binary cross-entropy of sigmoid gates against the domain (original → 0,
/// new → 1), averaged over all layers and tokens.
pub fn gate_ce_loss<S: Scalar>(
    tape: &mut Tape<S>,
    gates: &[Var],
    mask: &DomainMask,
    seq: usize,
    kind: GateKind,
) -> Result<Var> {
    if kind != GateKind::Sigmoid {
        return Err(Error::config(format!(
            "gate cross-entropy needs a sigmoid gate, got {kind}"
        )));
    }
    let targets: Vec<f64> = mask
        .token_flags(seq)
        .map(|f| if f == Domain::New { 1.0 } else { 0.0 })
        .collect();
    if gates.is_empty() {
        return Ok(tape.constant(Tensor::scalar(S::zero())));
    }
    let mut sum: Option<Var> = None;
    for &g in gates {
        check_rows(tape, g, targets.len(), "gate_ce_loss")?;
        let part = tape.binary_cross_entropy(g, &targets, GATE_CE_EPS)?;
        sum = Some(match sum {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    let denom = (gates.len() * targets.len()) as f64;
    Ok(tape.scale(sum.expect("non-empty gates"), S::of(1.0 / denom)))
}

/// `lm + alpha · (l1 + ce)` on the tape, with the matching breakdown.
pub fn combine<S: Scalar>(
    tape: &mut Tape<S>,
    lm: Var,
    local_l1: Option<Var>,
    local_ce: Option<Var>,
    alpha: f64,
) -> Result<(Var, LossBreakdown)> {
    if !(alpha >= 0.0) {
        return Err(Error::config(format!("alpha must be >= 0, got {alpha}")));
    }
    let value = |v: Option<Var>, tape: &Tape<S>| v.map_or(0.0, |v| tape.value(v).item().f64());
    let breakdown = LossBreakdown::new(
        tape.value(lm).item().f64(),
        value(local_l1, tape),
        value(local_ce, tape),
        alpha,
    );
    let mut total = lm;
    for term in [local_l1, local_ce].into_iter().flatten() {
        let weighted = tape.scale(term, S::of(alpha));
        total = tape.add(total, weighted)?;
    }
    Ok((total, breakdown))
}

/// The full training objective for one forward pass.
pub fn training_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    adapters: &[AdapterTrace],
    targets: &[usize],
    mask: &DomainMask,
    seq: usize,
    d: usize,
    ext: Option<&ExtensionConfig>,
) -> Result<(Var, LossBreakdown)> {
    let lm = tape.softmax_cross_entropy(logits, targets)?;
    let Some(ext) = ext else {
        return combine(tape, lm, None, None, 0.0);
    };
    let l1 = if ext.use_l1_loss {
        let ys: Vec<Var> = adapters.iter().map(|a| a.output).collect();
        Some(l1_local_loss(tape, &ys, mask, seq, d)?)
    } else {
        None
    };
    let ce = if ext.use_ce_loss {
        let gs: Vec<Var> = adapters.iter().filter_map(|a| a.gate).collect();
        Some(gate_ce_loss(tape, &gs, mask, seq, ext.gate)?)
    } else {
        None
    };
    combine(tape, lm, l1, ce, ext.alpha)
}
