//! Central finite differences against the tape on a 2-layer, width-8 model
//! in double precision.

mod common;

use common::*;
use neutral_residues::backbone::BackboneModel;
use neutral_residues::extension::{attach, ExtensionConfig, GateKind};
use neutral_residues::tensor::Activation;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn lm_loss_matches_finite_differences_for_every_gate() {
    for gate in [GateKind::None, GateKind::Sigmoid, GateKind::Relu] {
        check(gate, Objective::Lm);
    }
}

#[test]
fn l1_loss_matches_finite_differences_for_every_gate() {
    for gate in [GateKind::None, GateKind::Sigmoid, GateKind::Relu] {
        check(gate, Objective::L1);
    }
}

#[test]
fn gate_cross_entropy_matches_finite_differences() {
    check(GateKind::Sigmoid, Objective::GateCe);
}

#[test]
fn combined_objective_matches_finite_differences_for_every_gate() {
    for gate in [GateKind::None, GateKind::Sigmoid, GateKind::Relu] {
        check(gate, Objective::Train);
    }
}

#[test]
fn gelu_backbone_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let backbone = BackboneModel::<f64>::init(tiny_config(Activation::Gelu), 3).unwrap();
    let mut model = attach(&backbone, &ExtensionConfig::finetune(), 3).unwrap();
    scramble(&mut model, &mut rng);
    let case = case(model.config.vocab_size, &mut rng);
    let err = max_relative_error(&mut model, &case, Objective::Lm);
    assert!(err <= TOLERANCE, "max relative error {err:e}");
}

#[test]
fn lora_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let backbone = BackboneModel::<f64>::init(tiny_config(Activation::Silu), 5).unwrap();
    let mut model = attach(&backbone, &ExtensionConfig::lora(), 5).unwrap();
    scramble(&mut model, &mut rng);
    let case = case(model.config.vocab_size, &mut rng);
    let err = max_relative_error(&mut model, &case, Objective::Train);
    assert!(err <= TOLERANCE, "max relative error {err:e}");
}
