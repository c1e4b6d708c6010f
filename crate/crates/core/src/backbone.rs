//! Decoder-only GLU transformer used as the frozen pretrained model.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Activation, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_latent: usize,
    pub vocab_size: usize,
    pub activation: Activation,
    pub max_seq_len: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale default: latent 176 keeps the 11/4 latent-to-width ratio
    /// of a 2048/5632 model.
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            model_dim: 64,
            n_heads: 4,
            ffn_latent: 176,
            vocab_size: 256,
            activation: Activation::Silu,
            max_seq_len: 128,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("model_dim", self.model_dim),
            ("n_heads", self.n_heads),
            ("ffn_latent", self.ffn_latent),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{key} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "model.model_dim {} is not divisible by model.n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.vocab_size < 2 {
            return Err(Error::config("model.vocab_size must be at least 2"));
        }
        if !matches!(self.activation, Activation::Silu | Activation::Gelu) {
            return Err(Error::config("model.activation must be silu or gelu"));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::config("model.norm_eps must be positive"));
        }
        Ok(())
    }

    /// Closed-form parameter count of a backbone with this configuration.
    pub fn param_count(&self) -> usize {
        let (d, l, v) = (self.model_dim, self.n_layers, self.vocab_size);
        let block = 4 * d * d + 3 * d * self.ffn_latent + 2 * d;
        v * d + self.max_seq_len * d + l * block + d + d * v
    }
}

/// Samples `N(0, 2 / fan_in)`.
pub fn he_init<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Result<Tensor<S>> {
    if fan_in == 0 {
        return Err(Error::Contract("he_init needs fan_in > 0".into()));
    }
    normal_init(shape, 2.0 / fan_in as f64, rng)
}

/// Samples `N(0, variance)`.
pub fn normal_init<S: Scalar>(shape: &[usize], variance: f64, rng: &mut impl Rng) -> Result<Tensor<S>> {
    let normal =
        Normal::new(0.0, variance.sqrt()).map_err(|e| Error::config(format!("bad init variance {variance}: {e}")))?;
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| S::of(normal.sample(rng))).collect())
}

/// Parameter handles of one transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub attn_norm: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ffn_norm: ParamId,
    pub w_i: ParamId,
    pub w_g: ParamId,
    pub w_o: ParamId,
}

#[derive(Clone, Debug)]
pub struct BackboneLayout {
    pub embed: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub final_norm: ParamId,
    pub head: ParamId,
}

impl BackboneLayout {
    fn block_names(l: usize) -> [String; 9] {
        [
            "attn_norm",
            "attn.wq",
            "attn.wk",
            "attn.wv",
            "attn.wo",
            "ffn_norm",
            "ffn.w_i",
            "ffn.w_g",
            "ffn.w_o",
        ]
        .map(|s| format!("layers.{l}.{s}"))
    }

    /// Resolves the layout from parameter names, checking shapes.
    pub fn resolve<S: Scalar>(config: &ModelConfig, store: &ParamStore<S>) -> Result<Self> {
        let (d, v, f) = (config.model_dim, config.vocab_size, config.ffn_latent);
        let find = |name: &str, shape: &[usize]| -> Result<ParamId> {
            let id = store
                .find(name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if store.get(id).shape() != shape {
                return Err(Error::shape("parameter layout", store.get(id).shape(), shape));
            }
            Ok(id)
        };
        let blocks = (0..config.n_layers)
            .map(|l| {
                let n = Self::block_names(l);
                Ok(BlockParams {
                    attn_norm: find(&n[0], &[d])?,
                    wq: find(&n[1], &[d, d])?,
                    wk: find(&n[2], &[d, d])?,
                    wv: find(&n[3], &[d, d])?,
                    wo: find(&n[4], &[d, d])?,
                    ffn_norm: find(&n[5], &[d])?,
                    w_i: find(&n[6], &[d, f])?,
                    w_g: find(&n[7], &[d, f])?,
                    w_o: find(&n[8], &[f, d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BackboneLayout {
            embed: find("embed", &[v, d])?,
            pos: find("pos", &[config.max_seq_len, d])?,
            blocks,
            final_norm: find("final_norm", &[d])?,
            head: find("head", &[d, v])?,
        })
    }
}

/// Token ids for `batch` sequences of `seq` tokens, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(Error::shape("token batch", &[tokens.len()], &[batch, seq]));
        }
        Ok(TokenBatch { tokens, batch, seq })
    }

    pub fn single(tokens: &[usize]) -> Result<Self> {
        Self::new(tokens.to_vec(), 1, tokens.len())
    }

    pub fn rows(&self) -> usize {
        self.batch * self.seq
    }
}

/// Per-layer values produced by a parallel adapter, kept for local losses.
#[derive(Clone, Debug)]
pub struct AdapterTrace {
    /// Post-gate output added to the residual stream, `rows × d`.
    pub output: Var,
    /// Gate value per token (`rows × 1`), absent for ungated adapters.
    pub gate: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Var,
    pub adapters: Vec<AdapterTrace>,
}

/// Per-layer customization points of the forward pass.
pub trait LayerHooks<S: Scalar> {
    /// Effective `(w_i, w_g, w_o)` for a layer's FFN.
    fn ffn_weights(
        &self,
        _tape: &mut Tape<S>,
        _vars: &Bound,
        _layer: usize,
        base: (Var, Var, Var),
    ) -> Result<(Var, Var, Var)> {
        Ok(base)
    }

    /// A block evaluated in parallel with the FFN on the same normalized input.
    fn parallel_block(
        &self,
        _tape: &mut Tape<S>,
        _vars: &Bound,
        _layer: usize,
        _x_norm: Var,
    ) -> Result<Option<AdapterTrace>> {
        Ok(None)
    }
}

pub struct NoHooks;

impl<S: Scalar> LayerHooks<S> for NoHooks {}

/// `W_o (act(x W_g) ⊙ x W_i)` applied per row.
pub fn glu_ffn<S: Scalar>(tape: &mut Tape<S>, x: Var, w_i: Var, w_g: Var, w_o: Var, act: Activation) -> Result<Var> {
    let gate_pre = tape.matmul(x, w_g)?;
    let gate = tape.activation(act, gate_pre);
    let up = tape.matmul(x, w_i)?;
    let h = tape.mul(gate, up)?;
    tape.matmul(h, w_o)
}

/// Causal multi-head self-attention with input and output projections.
#[allow(clippy::too_many_arguments)]
pub fn mha<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    batch: usize,
    seq: usize,
    heads: usize,
) -> Result<Var> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let a = tape.causal_attention(q, k, v, batch, seq, heads)?;
    tape.matmul(a, wo)
}

#[derive(Clone, Debug)]
pub struct BackboneModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub layout: BackboneLayout,
}

impl<S: Scalar> BackboneModel<S> {
    /// Random initialization: He-initialized projections (residual outputs
    /// scaled by `1/sqrt(2L)`), unit-normal embeddings, unit norm weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, f) = (config.model_dim, config.vocab_size, config.ffn_latent);
        let residual_scale = S::of(1.0 / (2.0 * config.n_layers as f64).sqrt());
        let mut store = ParamStore::new();
        store.insert("embed", normal_init(&[v, d], 1.0, &mut rng)?);
        store.insert("pos", normal_init(&[config.max_seq_len, d], 0.1, &mut rng)?);
        for l in 0..config.n_layers {
            let n = BackboneLayout::block_names(l);
            store.insert(&n[0], Tensor::ones(&[d]));
            store.insert(&n[1], he_init(&[d, d], d, &mut rng)?);
            store.insert(&n[2], he_init(&[d, d], d, &mut rng)?);
            store.insert(&n[3], he_init(&[d, d], d, &mut rng)?);
            store.insert(&n[4], he_init::<S>(&[d, d], d, &mut rng)?.map(|x| x * residual_scale));
            store.insert(&n[5], Tensor::ones(&[d]));
            store.insert(&n[6], he_init(&[d, f], d, &mut rng)?);
            store.insert(&n[7], he_init(&[d, f], d, &mut rng)?);
            store.insert(&n[8], he_init::<S>(&[f, d], f, &mut rng)?.map(|x| x * residual_scale));
        }
        store.insert("final_norm", Tensor::ones(&[d]));
        store.insert("head", he_init(&[d, v], d, &mut rng)?);
        let layout = BackboneLayout::resolve(&config, &store)?;
        Ok(BackboneModel {
            config,
            params: store,
            layout,
        })
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_params(config: ModelConfig, params: ParamStore<S>) -> Result<Self> {
        config.validate()?;
        let layout = BackboneLayout::resolve(&config, &params)?;
        Ok(BackboneModel { config, params, layout })
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.params.count(trainable_only)
    }
}

/// The pre-norm residual stack: `x += MHA(norm(x)); x += FFN(norm(x))`
/// per block, then a final norm and the output head.
pub fn forward<S: Scalar>(
    config: &ModelConfig,
    layout: &BackboneLayout,
    tape: &mut Tape<S>,
    vars: &Bound,
    batch: &TokenBatch,
    hooks: &dyn LayerHooks<S>,
) -> Result<ForwardOutput> {
    if batch.seq > config.max_seq_len {
        return Err(Error::config(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.seq, config.max_seq_len
        )));
    }
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::Index {
            what: "token",
            index: bad,
            bound: config.vocab_size,
        });
    }
    let positions: Vec<usize> = (0..batch.rows()).map(|i| i % batch.seq).collect();
    let tok = tape.gather(vars[layout.embed], &batch.tokens)?;
    let pos = tape.gather(vars[layout.pos], &positions)?;
    let mut x = tape.add(tok, pos)?;
    let mut adapters = Vec::new();
    for (l, block) in layout.blocks.iter().enumerate() {
        let h = tape.rms_norm(x, vars[block.attn_norm], config.norm_eps)?;
        let a = mha(
            tape,
            h,
            vars[block.wq],
            vars[block.wk],
            vars[block.wv],
            vars[block.wo],
            batch.batch,
            batch.seq,
            config.n_heads,
        )?;
        x = tape.add(x, a)?;
        let h = tape.rms_norm(x, vars[block.ffn_norm], config.norm_eps)?;
        let (w_i, w_g, w_o) = hooks.ffn_weights(tape, vars, l, (vars[block.w_i], vars[block.w_g], vars[block.w_o]))?;
        let f = glu_ffn(tape, h, w_i, w_g, w_o, config.activation)?;
        x = tape.add(x, f)?;
        if let Some(trace) = hooks.parallel_block(tape, vars, l, h)? {
            x = tape.add(x, trace.output)?;
            adapters.push(trace);
        }
    }
    let h = tape.rms_norm(x, vars[layout.final_norm], config.norm_eps)?;
    let logits = tape.matmul(h, vars[layout.head])?;
    Ok(ForwardOutput { logits, adapters })
}

/// Anything that maps a token batch to logits through a tape.
pub trait LanguageModel<S: Scalar> {
    fn model_config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore<S>;
    fn params_mut(&mut self) -> &mut ParamStore<S>;
    fn forward(&self, tape: &mut Tape<S>, vars: &Bound, batch: &TokenBatch) -> Result<ForwardOutput>;

    /// Logits without recording gradients.
    fn eval_logits(&self, batch: &TokenBatch) -> Result<Tensor<S>> {
        let mut tape = Tape::new();
        let vars = self.params().bind(&mut tape, false);
        let out = self.forward(&mut tape, &vars, batch)?;
        Ok(tape.value(out.logits).clone())
    }
}

impl<S: Scalar> LanguageModel<S> for BackboneModel<S> {
    fn model_config(&self) -> &ModelConfig {
        &self.config
    }

    fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn forward(&self, tape: &mut Tape<S>, vars: &Bound, batch: &TokenBatch) -> Result<ForwardOutput> {
        forward(&self.config, &self.layout, tape, vars, batch, &NoHooks)
    }
}
