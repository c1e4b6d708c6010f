//! Finite-difference gradient checking shared by the test targets.
#![allow(dead_code)]

use neutral_residues::backbone::{BackboneModel, LanguageModel, ModelConfig, TokenBatch};
use neutral_residues::extension::{attach, ExtendedModel, ExtensionConfig, GateKind, InitScheme, Method};
use neutral_residues::losses::{gate_ce_loss, l1_local_loss, training_loss, Domain, DomainMask};
use neutral_residues::params::Bound;
use neutral_residues::tensor::{Activation, Tape, Tensor, Var};
use neutral_residues::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-3;
pub const SEQ: usize = 5;

pub fn tiny_config(activation: Activation) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        model_dim: 8,
        n_heads: 2,
        ffn_latent: 12,
        vocab_size: 11,
        activation,
        max_seq_len: 8,
        norm_eps: 1e-6,
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Objective {
    Lm,
    L1,
    GateCe,
    Train,
}

pub struct Case {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
    pub mask: DomainMask,
}

pub fn case(vocab: usize, rng: &mut impl Rng) -> Case {
    let batch = 3;
    let tokens = (0..batch * SEQ).map(|_| rng.gen_range(0..vocab)).collect();
    Case {
        inputs: TokenBatch::new(tokens, batch, SEQ).unwrap(),
        targets: (0..batch * SEQ).map(|_| rng.gen_range(0..vocab)).collect(),
        mask: DomainMask(vec![Domain::Original, Domain::New, Domain::Original]),
    }
}

/// Overwrites every parameter with N(0, 0.5²) noise so that no path is
/// silenced by a zero initialization, and marks everything trainable.
pub fn scramble<M: LanguageModel<f64>>(model: &mut M, rng: &mut impl Rng) {
    let store = model.params_mut();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        store.set_trainable(id, true);
        for x in store.get_mut(id).data_mut() {
            *x = 0.5 * rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
    }
}

pub fn objective_var(
    model: &ExtendedModel<f64>,
    tape: &mut Tape<f64>,
    vars: &Bound,
    case: &Case,
    objective: Objective,
) -> Result<Var> {
    let out = model.forward(tape, vars, &case.inputs)?;
    let d = model.config.model_dim;
    match objective {
        Objective::Lm => tape.softmax_cross_entropy(out.logits, &case.targets),
        Objective::L1 => {
            let ys: Vec<Var> = out.adapters.iter().map(|a| a.output).collect();
            l1_local_loss(tape, &ys, &case.mask, SEQ, d)
        }
        Objective::GateCe => {
            let gs: Vec<Var> = out.adapters.iter().filter_map(|a| a.gate).collect();
            gate_ce_loss(tape, &gs, &case.mask, SEQ, model.extension.gate)
        }
        Objective::Train => {
            let ext = model.extension.clone();
            let (loss, _) = training_loss(
                tape,
                out.logits,
                &out.adapters,
                &case.targets,
                &case.mask,
                SEQ,
                d,
                Some(&ext),
            )?;
            Ok(loss)
        }
    }
}

pub fn loss_value(model: &ExtendedModel<f64>, case: &Case, objective: Objective) -> f64 {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape, true);
    let v = objective_var(model, &mut tape, &vars, case, objective).unwrap();
    tape.value(v).item()
}

/// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1e-6)` over
/// every parameter entry.
pub fn max_relative_error(model: &mut ExtendedModel<f64>, case: &Case, objective: Objective) -> f64 {
    let mut tape = Tape::new();
    let vars = model.params().bind(&mut tape, true);
    let root = objective_var(model, &mut tape, &vars, case, objective).unwrap();
    let mut grads = tape.backward(root).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .take(vars[id])
                .unwrap_or_else(|| Tensor::zeros(model.params.get(id).shape()))
        })
        .collect();
    let mut worst: f64 = 0.0;
    for (k, &id) in ids.iter().enumerate() {
        for j in 0..model.params.get(id).numel() {
            let orig = model.params.get(id).data()[j];
            model.params.get_mut(id).data_mut()[j] = orig + H;
            let plus = loss_value(model, case, objective);
            model.params.get_mut(id).data_mut()[j] = orig - H;
            let minus = loss_value(model, case, objective);
            model.params.get_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * H);
            let a = analytic[k].data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}

pub fn extended(gate: GateKind, l1: bool, ce: bool, seed: u64) -> (ExtendedModel<f64>, Case) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone = BackboneModel::<f64>::init(tiny_config(Activation::Silu), seed).unwrap();
    let ext = ExtensionConfig {
        method: Method::Adapter,
        gate,
        use_l1_loss: l1,
        use_ce_loss: ce,
        alpha: 0.5,
        budget_fraction: 0.2,
        init_scheme: InitScheme::LowVariance,
    };
    let mut model = attach(&backbone, &ext, seed).unwrap();
    scramble(&mut model, &mut rng);
    let case = case(model.config.vocab_size, &mut rng);
    (model, case)
}

/// Worst relative error for `objective` on a scrambled adapter model with
/// the given gate. The CE loss is switched on only for the sigmoid gate.
pub fn gate_error(gate: GateKind, objective: Objective) -> f64 {
    let ce = gate == GateKind::Sigmoid;
    let (mut model, case) = extended(gate, true, ce, 7);
    max_relative_error(&mut model, &case, objective)
}

pub fn check(gate: GateKind, objective: Objective) {
    let err = gate_error(gate, objective);
    assert!(err <= TOLERANCE, "{gate} {objective:?}: max relative error {err:e}");
}
