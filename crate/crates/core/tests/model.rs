use nalgebra::DMatrix;
use neutral_residues::backbone::{glu_ffn, he_init, mha, LanguageModel, ModelConfig, TokenBatch};
use neutral_residues::extension::{
    adapter_forward, adapter_latent, attach, attach_adapters, attach_lora, lora_rank, low_variance_init, GateKind,
    LayerExtension, RankPolicy,
};
use neutral_residues::params::ParamStore;
use neutral_residues::tensor::{Activation, Tape, Tensor};
use neutral_residues::{BackboneModel, Error, ExtendedModel, ExtensionConfig, Method};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        model_dim: 8,
        n_heads: 2,
        ffn_latent: 16,
        vocab_size: 32,
        activation: Activation::Silu,
        max_seq_len: 12,
        norm_eps: 1e-6,
    }
}

fn scalar_ffn(wi: f64, wg: f64, wo: f64, x: f64) -> f64 {
    let mut tape = Tape::<f64>::new();
    let c = |t: &mut Tape<f64>, v: f64| t.constant(Tensor::from_f64(&[1, 1], &[v]).unwrap());
    let (x, wi, wg, wo) = (c(&mut tape, x), c(&mut tape, wi), c(&mut tape, wg), c(&mut tape, wo));
    let y = glu_ffn(&mut tape, x, wi, wg, wo, Activation::Silu).unwrap();
    tape.value(y).item()
}

#[test]
fn glu_ffn_examples() {
    assert_eq!(scalar_ffn(0.0, 10.0, 1.0, 1.0), 0.0);
    assert_eq!(scalar_ffn(2.0, 10.0, 0.0, 1.0), 0.0);
    let sigma10 = 1.0 / (1.0 + (-10.0f64).exp());
    let oracle = 2.0 * (10.0 * sigma10);
    let got = scalar_ffn(2.0, 10.0, 1.0, 1.0);
    assert!((got - oracle).abs() < 1e-12);
    assert!((got - 19.999092).abs() < 1e-6);
}

#[test]
fn glu_ffn_shape_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[3, 4]));
    let wi = tape.constant(Tensor::zeros(&[5, 6]));
    let wg = tape.constant(Tensor::zeros(&[4, 6]));
    let wo = tape.constant(Tensor::zeros(&[6, 4]));
    assert!(matches!(
        glu_ffn(&mut tape, x, wi, wg, wo, Activation::Silu),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn mha_single_token_is_the_value_path() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::<f64>::new();
    let mut rand = |t: &mut Tape<f64>, shape: &[usize]| t.constant(he_init(shape, 4, &mut rng).unwrap());
    let (x, wq, wk, wv, wo) = (
        rand(&mut tape, &[1, 4]),
        rand(&mut tape, &[4, 4]),
        rand(&mut tape, &[4, 4]),
        rand(&mut tape, &[4, 4]),
        rand(&mut tape, &[4, 4]),
    );
    let out = mha(&mut tape, x, wq, wk, wv, wo, 1, 1, 2).unwrap();
    let xv = tape.matmul(x, wv).unwrap();
    let expected = tape.matmul(xv, wo).unwrap();
    assert!(tape.value(out).max_abs_diff(tape.value(expected)) < 1e-12);
}

#[test]
fn mha_two_token_hand_case() {
    let x = [[1.0, 2.0], [-1.0, 0.5]];
    let wq = [[1.0, 0.0], [0.0, 1.0]];
    let wk = [[0.5, 0.0], [0.0, -1.0]];
    let wv = [[2.0, 1.0], [0.0, 1.0]];
    let wo = [[1.0, 0.0], [1.0, 1.0]];
    // Row-vector projections by hand.
    let proj = |v: [f64; 2], w: [[f64; 2]; 2]| [v[0] * w[0][0] + v[1] * w[1][0], v[0] * w[0][1] + v[1] * w[1][1]];
    let q: Vec<[f64; 2]> = x.iter().map(|&r| proj(r, wq)).collect();
    let k: Vec<[f64; 2]> = x.iter().map(|&r| proj(r, wk)).collect();
    let v: Vec<[f64; 2]> = x.iter().map(|&r| proj(r, wv)).collect();
    let dot = |a: [f64; 2], b: [f64; 2]| (a[0] * b[0] + a[1] * b[1]) / 2f64.sqrt();
    let (s0, s1) = (dot(q[1], k[0]), dot(q[1], k[1]));
    let (p0, p1) = (s0.exp() / (s0.exp() + s1.exp()), s1.exp() / (s0.exp() + s1.exp()));
    let a1 = [p0 * v[0][0] + p1 * v[1][0], p0 * v[0][1] + p1 * v[1][1]];
    let expected = [proj(v[0], wo), proj(a1, wo)];

    let mut tape = Tape::<f64>::new();
    let m = |t: &mut Tape<f64>, r: usize, w: &[[f64; 2]]| {
        t.constant(Tensor::from_f64(&[r, 2], &w.iter().flatten().copied().collect::<Vec<_>>()).unwrap())
    };
    let (xv, qv, kv, vv, ov) = (
        m(&mut tape, 2, &x),
        m(&mut tape, 2, &wq),
        m(&mut tape, 2, &wk),
        m(&mut tape, 2, &wv),
        m(&mut tape, 2, &wo),
    );
    let out = mha(&mut tape, xv, qv, kv, vv, ov, 1, 2, 1).unwrap();
    let got = tape.value(out).data();
    for (g, e) in got.iter().zip(expected.iter().flatten()) {
        assert!((g - e).abs() < 1e-12, "{got:?} vs {expected:?}");
    }
}

fn logits(model: &impl LanguageModel<f32>, tokens: &[usize]) -> Tensor<f32> {
    model.eval_logits(&TokenBatch::single(tokens).unwrap()).unwrap()
}

#[test]
fn forward_is_causal() {
    let model = BackboneModel::init(tiny(), 1).unwrap();
    let a = [3, 1, 4, 1, 5, 9, 2, 6];
    let mut b = a;
    b[5] = 30;
    b[7] = 0;
    let (la, lb) = (logits(&model, &a), logits(&model, &b));
    let v = tiny().vocab_size;
    assert!(la.data()[..5 * v] == lb.data()[..5 * v]);
    assert!(la.data()[5 * v..] != lb.data()[5 * v..]);
}

#[test]
fn forward_errors() {
    let model = BackboneModel::init(tiny(), 1).unwrap();
    let too_long = TokenBatch::single(&[0; 13]).unwrap();
    assert!(matches!(model.eval_logits(&too_long), Err(Error::Config(_))));
    let bad = TokenBatch::single(&[0, 32]).unwrap();
    assert!(matches!(model.eval_logits(&bad), Err(Error::Index { index: 32, .. })));
}

#[test]
fn head_only_model_gives_position_constant_logits() {
    let mut model = BackboneModel::init(tiny(), 1).unwrap();
    let ids: Vec<_> = model.params.ids().collect();
    let head = model.layout.head;
    let norms = [model.layout.final_norm];
    for id in ids {
        if id != head && !norms.contains(&id) {
            model.params.get_mut(id).data_mut().fill(0.0);
        }
    }
    let l = logits(&model, &[1, 2, 3, 4]);
    let v = tiny().vocab_size;
    for row in l.data().chunks(v) {
        assert_eq!(row, &l.data()[..v]);
    }
}

#[test]
fn he_init_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1_000_000;
    let t: Tensor<f64> = he_init(&[n], 2048, &mut rng).unwrap();
    let var = 2.0 / 2048.0;
    assert_eq!(var, 9.765625e-4);
    let mean = t.data().iter().sum::<f64>() / n as f64;
    let sigma_mean = (var / n as f64).sqrt();
    assert!(mean.abs() < 4.0 * sigma_mean, "mean {mean}");
    let sample_var = t.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    // Var of the sample variance is 2σ⁴/(n−1).
    let sigma_var = (2.0 * var * var / (n - 1) as f64).sqrt();
    assert!((sample_var - var).abs() < 4.0 * sigma_var, "variance {sample_var}");

    let again: Tensor<f64> = he_init(&[n], 2048, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    assert!(t.bitwise_eq(&again));
    assert!(he_init::<f32>(&[2], 0, &mut rng).is_err());
}

#[test]
fn count_params_examples() {
    let mut store = ParamStore::<f32>::new();
    store.insert("embed", Tensor::zeros(&[4, 2]));
    assert_eq!(store.count(false), 8);
    store.freeze_all();
    assert_eq!(store.count(true), 0);

    let cfg = tiny();
    let (v, d, l, f, t) = (32, 8, 2, 16, 12);
    let by_hand = v * d + t * d + l * (4 * d * d + 3 * d * f + 2 * d) + d + d * v;
    let model = BackboneModel::init(cfg.clone(), 0).unwrap();
    assert_eq!(model.count_params(false), by_hand);
    assert_eq!(cfg.param_count(), by_hand);
    assert_eq!(ModelConfig::default().param_count(), 141_632);
}

#[test]
fn config_validation() {
    let bad_heads = ModelConfig { n_heads: 3, ..tiny() };
    assert!(matches!(bad_heads.validate(), Err(Error::Config(_))));
    let bad_vocab = ModelConfig {
        vocab_size: 1,
        ..tiny()
    };
    assert!(bad_vocab.validate().is_err());
    let bad_act = ModelConfig {
        activation: Activation::Relu,
        ..tiny()
    };
    assert!(bad_act.validate().is_err());
}

#[test]
fn attach_is_neutral_at_step_zero() {
    let backbone = BackboneModel::init(tiny(), 5).unwrap();
    let prompt = [7, 3, 3, 9, 31, 0];
    let base = logits(&backbone, &prompt);
    for cfg in [
        ExtensionConfig::neutral_residues(),
        ExtensionConfig::vanilla_adapter(),
        ExtensionConfig::lora(),
        ExtensionConfig::finetune(),
    ] {
        let ext: ExtendedModel = attach(&backbone, &cfg, 9).unwrap();
        assert!(logits(&ext, &prompt).bitwise_eq(&base), "{}", cfg.label());
    }
}

#[test]
fn low_variance_examples() {
    assert_eq!(low_variance_init(2048, 16).unwrap().variance, 1.0 / 32768.0);
    assert!((low_variance_init(2048, 16).unwrap().variance - 3.0517578e-5).abs() < 1e-12);
    assert_eq!(low_variance_init(64, 2).unwrap().variance, 7.8125e-3);
    assert!(low_variance_init(0, 2).is_err());

    let backbone = BackboneModel::init(ModelConfig::default(), 0).unwrap();
    let ext: ExtendedModel = attach_adapters(&backbone, &ExtensionConfig::neutral_residues(), 0).unwrap();
    for (_, a) in ext.adapters() {
        assert!(ext.params.get(a.a_o).data().iter().all(|&x| x == 0.0));
        let (_, b) = a.gate.unwrap();
        assert_eq!(ext.params.get(b).data(), &[0.0]);
        let ai = ext.params.get(a.a_i).data();
        let var = ai.iter().map(|&x| (x as f64).powi(2)).sum::<f64>() / ai.len() as f64;
        assert!((var - 7.8125e-3).abs() < 0.1 * 7.8125e-3, "{var}");
    }
}

#[test]
fn desk_budget_sizing() {
    let cfg = ModelConfig::default();
    let p = cfg.param_count();
    let h = adapter_latent(0.2, p, &cfg).unwrap();
    let per = |h: usize| 2 * (3 * 64 * h + 64 + 1);
    assert!(per(h) as f64 <= 0.2 * p as f64 && per(h + 1) as f64 > 0.2 * p as f64);
    let backbone = BackboneModel::init(cfg.clone(), 0).unwrap();
    let ext: ExtendedModel = attach_adapters(&backbone, &ExtensionConfig::neutral_residues(), 0).unwrap();
    assert_eq!(ext.count_params(true), per(h));
    assert_eq!(ext.extra_dim, h);

    let r = lora_rank(0.2, p, &cfg).unwrap();
    let per_rank = 2 * ((64 + 176) * 3);
    assert!(r * per_rank <= (0.2 * p as f64) as usize && (r + 1) * per_rank > (0.2 * p as f64) as usize);
    let lora: ExtendedModel = attach_lora(&backbone, &ExtensionConfig::lora(), RankPolicy::Budget, 0).unwrap();
    assert_eq!(lora.count_params(true), r * per_rank);

    assert!(matches!(adapter_latent(1e-4, p, &cfg), Err(Error::Config(_))));
    assert!(matches!(lora_rank(1e-5, p, &cfg), Err(Error::Config(_))));
}

#[test]
fn trainable_parameter_lists() {
    let backbone = BackboneModel::init(tiny(), 0).unwrap();
    let ft: ExtendedModel = attach(&backbone, &ExtensionConfig::finetune(), 0).unwrap();
    assert_eq!(ft.trainable_parameters().len(), ft.params.len());
    let nr: ExtendedModel = attach(&backbone, &ExtensionConfig::neutral_residues(), 0).unwrap();
    let names: Vec<&str> = nr
        .trainable_parameters()
        .into_iter()
        .map(|id| nr.params.name(id))
        .collect();
    assert_eq!(
        names,
        [
            "adapters.0.a_i",
            "adapters.0.a_g",
            "adapters.0.a_o",
            "adapters.0.gate_u",
            "adapters.0.gate_b",
            "adapters.1.a_i",
            "adapters.1.a_g",
            "adapters.1.a_o",
            "adapters.1.gate_u",
            "adapters.1.gate_b",
        ]
    );
    let again: ExtendedModel = attach(&backbone, &ExtensionConfig::neutral_residues(), 0).unwrap();
    assert_eq!(nr.trainable_parameters(), again.trainable_parameters());
}

fn gate_run(kind: GateKind, u: f32, b: f32) -> (Tensor<f32>, Tensor<f32>, Tensor<f32>) {
    let backbone = BackboneModel::init(tiny(), 0).unwrap();
    let cfg = ExtensionConfig {
        gate: kind,
        use_l1_loss: false,
        ..ExtensionConfig::neutral_residues()
    };
    let mut ext: ExtendedModel = attach(&backbone, &cfg, 0).unwrap();
    let adapter = ext.adapters().next().unwrap().1.clone();
    let (uid, bid) = adapter.gate.unwrap();
    ext.params.get_mut(uid).data_mut().fill(u);
    ext.params.get_mut(bid).data_mut().fill(b);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    ext.params
        .get_mut(adapter.a_o)
        .data_mut()
        .iter_mut()
        .for_each(|x| *x = rng.gen_range(-1.0..1.0));
    let mut tape = Tape::new();
    let vars = ext.params.bind(&mut tape, true);
    let x = tape
        .constant(Tensor::from_f64(&[3, 8], &(0..24).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>()).unwrap());
    let trace = adapter_forward(&mut tape, &vars, &adapter, x, Activation::Silu).unwrap();
    let ungated = neutral_residues::backbone::glu_ffn(
        &mut tape,
        x,
        vars[adapter.a_i],
        vars[adapter.a_g],
        vars[adapter.a_o],
        Activation::Silu,
    )
    .unwrap();
    let g = tape.value(trace.gate.unwrap()).clone();
    let y = tape.value(trace.output).clone();
    let core = tape.value(ungated).clone();
    (g, y, core)
}

#[test]
fn adapter_gate_examples() {
    let (g, y, _) = gate_run(GateKind::Relu, 0.0, 0.0);
    assert!(g.data().iter().all(|&v| v == 0.0));
    assert!(y.data().iter().all(|&v| v == 0.0));

    let (g, y, core) = gate_run(GateKind::Sigmoid, 0.0, 0.0);
    assert!(g.data().iter().all(|&v| v == 0.5));
    for (a, c) in y.data().iter().zip(core.data()) {
        assert_eq!(*a, 0.5 * c);
    }

    let (g, y, core) = gate_run(GateKind::Relu, 0.0, -3.0);
    assert!(g.data().iter().all(|&v| v == 0.0));
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(core.data().iter().any(|&v| v != 0.0));
}

#[test]
fn relu_gate_scales_with_its_parameters() {
    let (g1, _, _) = gate_run(GateKind::Relu, 0.3, -0.1);
    let (g2, _, _) = gate_run(GateKind::Relu, 0.6, -0.2);
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert_eq!(*a == 0.0, *b == 0.0);
        assert!((2.0 * a - b).abs() < 1e-6);
    }
}

#[test]
fn ungated_adapter_has_no_gate() {
    let backbone = BackboneModel::init(tiny(), 0).unwrap();
    let ext: ExtendedModel = attach(&backbone, &ExtensionConfig::vanilla_adapter(), 0).unwrap();
    assert!(ext
        .adapters()
        .all(|(_, a)| a.gate.is_none() && a.kind == GateKind::None));
}

#[test]
fn extension_config_invariants() {
    let ok = [
        (GateKind::None, true, false),
        (GateKind::Sigmoid, false, true),
        (GateKind::Sigmoid, true, true),
        (GateKind::Relu, false, false),
        (GateKind::Relu, true, false),
    ];
    for (gate, l1, ce) in ok {
        let cfg = ExtensionConfig {
            gate,
            use_l1_loss: l1,
            use_ce_loss: ce,
            ..ExtensionConfig::neutral_residues()
        };
        cfg.validate().unwrap();
    }
    let bad = [
        ExtensionConfig {
            use_ce_loss: true,
            ..ExtensionConfig::neutral_residues()
        },
        ExtensionConfig {
            alpha: -1.0,
            ..ExtensionConfig::neutral_residues()
        },
        ExtensionConfig {
            budget_fraction: 0.0,
            ..ExtensionConfig::neutral_residues()
        },
        ExtensionConfig {
            budget_fraction: 1.5,
            ..ExtensionConfig::neutral_residues()
        },
        ExtensionConfig {
            gate: GateKind::Relu,
            ..ExtensionConfig::finetune()
        },
        ExtensionConfig {
            method: Method::Lora,
            ..ExtensionConfig::neutral_residues()
        },
    ];
    for cfg in bad {
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

/// With rank equal to the matrix size, the low-rank pair can express any
/// dense update: solve `down · up = target − W` by least squares and check
/// the effective weight hits the target.
#[test]
fn full_rank_lora_fits_a_dense_target() {
    let cfg = ModelConfig {
        n_layers: 1,
        model_dim: 2,
        n_heads: 1,
        ffn_latent: 2,
        vocab_size: 4,
        activation: Activation::Silu,
        max_seq_len: 4,
        norm_eps: 1e-6,
    };
    let backbone = neutral_residues::backbone::BackboneModel::<f64>::init(cfg, 3).unwrap();
    let mut ext = attach_lora(&backbone, &ExtensionConfig::lora(), RankPolicy::Fixed(2), 3).unwrap();
    let LayerExtension::Lora(lora) = ext.layers[0].clone() else {
        panic!("expected LoRA layer");
    };
    let w_g = ext.backbone.blocks[0].w_g;
    let (down, up) = lora.pairs[1];
    let target = DMatrix::from_row_slice(2, 2, &[0.7, -1.2, 2.5, 0.1]);
    let w = DMatrix::from_row_slice(2, 2, ext.params.get(w_g).data());
    let a = DMatrix::from_row_slice(2, 2, ext.params.get(down).data());
    let solution = a.svd(true, true).solve(&(&target - &w), 1e-12).unwrap();
    let row_major: Vec<f64> = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| solution[(i, j)])
        .collect();
    ext.params.get_mut(up).data_mut().copy_from_slice(&row_major);

    let mut tape = Tape::new();
    let vars = ext.params.bind(&mut tape, false);
    let base = (
        vars[ext.backbone.blocks[0].w_i],
        vars[w_g],
        vars[ext.backbone.blocks[0].w_o],
    );
    use neutral_residues::backbone::LayerHooks;
    let (_, effective, _) = ext.ffn_weights(&mut tape, &vars, 0, base).unwrap();
    let got = tape.value(effective).data();
    for (g, t) in got.iter().zip(target.transpose().iter()) {
        assert!((g - t).abs() < 1e-10, "{got:?} vs {target}");
    }
}

#[test]
fn golden_logits() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/tiny_logits.txt");
    let model = BackboneModel::init(tiny(), 2024).unwrap();
    let l = logits(&model, &[5, 17, 0, 31, 8, 8, 2]);
    let encoded: String = l.data().iter().map(|x| format!("{:08x}\n", x.to_bits())).collect();
    if std::env::var_os("NRES_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, &encoded).unwrap();
    }
    let stored = std::fs::read_to_string(&path).expect("golden file present; regenerate with NRES_BLESS=1");
    assert!(stored == encoded, "logits differ from the stored golden values");
}
