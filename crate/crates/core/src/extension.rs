//! Model-extension strategies: gated parallel adapters, vanilla adapters,
//! LoRA on the FFN matrices, and full finetuning.

use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    forward, glu_ffn, he_init, normal_init, AdapterTrace, BackboneLayout, BackboneModel, ForwardOutput, LanguageModel,
    LayerHooks, ModelConfig, TokenBatch,
};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Activation, Tape, Tensor, Var};

macro_rules! string_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    other => Err(Error::config(format!(
                        concat!("unknown ", stringify!($name), " `{}`"),
                        other
                    ))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self {
                    $($name::$variant => $text,)+
                })
            }
        }
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Finetune,
    Lora,
    Adapter,
}

string_enum!(Method { Finetune => "finetune", Lora => "lora", Adapter => "adapter" });

/// Activation of the per-token block gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateKind {
    None,
    Sigmoid,
    Relu,
}

string_enum!(GateKind { None => "none", Sigmoid => "sigmoid", Relu => "relu" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    He,
    LowVariance,
}

string_enum!(InitScheme { He => "he", LowVariance => "low_variance" });

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtensionConfig {
    pub method: Method,
    pub gate: GateKind,
    pub use_l1_loss: bool,
    pub use_ce_loss: bool,
    pub alpha: f64,
    pub budget_fraction: f64,
    pub init_scheme: InitScheme,
}

impl Default for ExtensionConfig {
    fn default() -> Self {
        Self::neutral_residues()
    }
}

impl ExtensionConfig {
    /// ReLU block gate, ℓ1 local loss on original-domain data, low-variance
    /// init, α = 0.01, 20% extra weights.
    pub fn neutral_residues() -> Self {
        ExtensionConfig {
            method: Method::Adapter,
            gate: GateKind::Relu,
            use_l1_loss: true,
            use_ce_loss: false,
            alpha: 0.01,
            budget_fraction: 0.2,
            init_scheme: InitScheme::LowVariance,
        }
    }

    /// Ungated parallel adapter with zero output matrix and He init.
    pub fn vanilla_adapter() -> Self {
        ExtensionConfig {
            method: Method::Adapter,
            gate: GateKind::None,
            use_l1_loss: false,
            use_ce_loss: false,
            alpha: 0.0,
            budget_fraction: 0.2,
            init_scheme: InitScheme::He,
        }
    }

    pub fn lora() -> Self {
        ExtensionConfig {
            method: Method::Lora,
            ..Self::vanilla_adapter()
        }
    }

    pub fn finetune() -> Self {
        ExtensionConfig {
            method: Method::Finetune,
            ..Self::vanilla_adapter()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.use_ce_loss && self.gate != GateKind::Sigmoid {
            return Err(Error::config("the gate cross-entropy loss requires a sigmoid gate"));
        }
        match self.method {
            Method::Finetune | Method::Lora => {
                if self.gate != GateKind::None || self.use_l1_loss || self.use_ce_loss {
                    return Err(Error::config(format!(
                        "{} has no adapters: gate must be none and local losses off",
                        self.method
                    )));
                }
            }
            Method::Adapter => {}
        }
        if self.method != Method::Finetune && !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::config(format!(
                "budget_fraction must lie in (0, 1], got {}",
                self.budget_fraction
            )));
        }
        Ok(())
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self.method {
            Method::Finetune => "finetune".into(),
            Method::Lora => "lora".into(),
            Method::Adapter => {
                let mut s = format!("adapter-{}", self.gate);
                if self.use_l1_loss {
                    s.push_str("+l1");
                }
                if self.use_ce_loss {
                    s.push_str("+ce");
                }
                s
            }
        }
    }
}

/// Weight distributions for freshly attached adapter matrices.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitSpec {
    /// Variance of the input, gating and gate-projection weights.
    pub variance: f64,
    /// Output matrix starts at exactly zero.
    pub zero_output: bool,
}

/// `N(0, 1/(d·L))` for the input and gating weights, zero output matrix.
pub fn low_variance_init(d: usize, n_layers: usize) -> Result<InitSpec> {
    if d == 0 || n_layers == 0 {
        return Err(Error::Contract("low_variance_init needs d, L >= 1".into()));
    }
    Ok(InitSpec {
        variance: 1.0 / (d as f64 * n_layers as f64),
        zero_output: true,
    })
}

/// He variance `2/d` for input and gating weights, zero output matrix.
pub fn he_adapter_init(d: usize) -> Result<InitSpec> {
    if d == 0 {
        return Err(Error::Contract("he init needs d >= 1".into()));
    }
    Ok(InitSpec {
        variance: 2.0 / d as f64,
        zero_output: true,
    })
}

/// Largest adapter latent `h` with `L (3 d h + d + 1) <= budget · P`.
pub fn adapter_latent(budget: f64, backbone_params: usize, config: &ModelConfig) -> Result<usize> {
    let (d, l) = (config.model_dim as f64, config.n_layers as f64);
    let h = ((budget * backbone_params as f64 / l - d - 1.0) / (3.0 * d)).floor();
    if !(h >= 1.0) {
        return Err(Error::config(format!(
            "budget {budget} is too small for an adapter latent of at least 1"
        )));
    }
    Ok(h as usize)
}

/// The three FFN matrices LoRA attaches to, with `(fan_in, fan_out)`.
fn lora_targets(config: &ModelConfig) -> [(&'static str, usize, usize); 3] {
    let (d, f) = (config.model_dim, config.ffn_latent);
    [("w_i", d, f), ("w_g", d, f), ("w_o", f, d)]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankPolicy {
    /// Largest rank whose added parameters fit the budget.
    Budget,
    Fixed(usize),
}

/// Largest rank `r` with `L · r · Σ(fan_in + fan_out) <= budget · P`.
pub fn lora_rank(budget: f64, backbone_params: usize, config: &ModelConfig) -> Result<usize> {
    let per_rank: usize = lora_targets(config).iter().map(|(_, i, o)| i + o).sum::<usize>() * config.n_layers;
    let r = (budget * backbone_params as f64 / per_rank as f64).floor();
    if !(r >= 1.0) {
        return Err(Error::config(format!(
            "budget {budget} is too small for LoRA rank >= 1"
        )));
    }
    Ok(r as usize)
}

/// Parameter handles of one layer's gated GLU adapter.
#[derive(Clone, Debug)]
pub struct GatedAdapter {
    pub a_i: ParamId,
    pub a_g: ParamId,
    pub a_o: ParamId,
    /// Gate projection `u` (`d × 1`) and bias `b` (`[1]`), when gated.
    pub gate: Option<(ParamId, ParamId)>,
    pub kind: GateKind,
}

/// `(down, up)` pair per FFN matrix; the delta is `down · up`.
#[derive(Clone, Debug)]
pub struct LoraLayer {
    pub pairs: [(ParamId, ParamId); 3],
}

#[derive(Clone, Debug)]
pub enum LayerExtension {
    None,
    Adapter(GatedAdapter),
    Lora(LoraLayer),
}

/// Adapter output for a normalized input: `core = A_o(act(A_g x) ⊙ A_i x)`,
/// `g = gate(u·x + b)` per token (1 when ungated), `y = g · core`.
pub fn adapter_forward<S: Scalar>(
    tape: &mut Tape<S>,
    vars: &Bound,
    adapter: &GatedAdapter,
    x_norm: Var,
    act: Activation,
) -> Result<AdapterTrace> {
    let core = glu_ffn(
        tape,
        x_norm,
        vars[adapter.a_i],
        vars[adapter.a_g],
        vars[adapter.a_o],
        act,
    )?;
    let Some((u, b)) = adapter.gate else {
        return Ok(AdapterTrace {
            output: core,
            gate: None,
        });
    };
    let pre = tape.matmul(x_norm, vars[u])?;
    let pre = tape.add_bias(pre, vars[b])?;
    let g = match adapter.kind {
        GateKind::Relu => tape.activation(Activation::Relu, pre),
        GateKind::Sigmoid => tape.activation(Activation::Sigmoid, pre),
        GateKind::None => unreachable!("ungated adapters carry no gate parameters"),
    };
    let output = tape.scale_rows(core, g)?;
    Ok(AdapterTrace { output, gate: Some(g) })
}

/// A backbone plus one extension per layer and a freeze mask.
#[derive(Clone, Debug)]
pub struct ExtendedModel<S> {
    pub config: ModelConfig,
    pub extension: ExtensionConfig,
    pub params: ParamStore<S>,
    pub backbone: BackboneLayout,
    pub layers: Vec<LayerExtension>,
    /// Adapter latent or LoRA rank; 0 for finetuning.
    pub extra_dim: usize,
    n_backbone: usize,
}

/// Attaches the extension described by `cfg`. `seed` drives the random
/// initialization of the added weights.
pub fn attach<S: Scalar>(backbone: &BackboneModel<S>, cfg: &ExtensionConfig, seed: u64) -> Result<ExtendedModel<S>> {
    match cfg.method {
        Method::Adapter => attach_adapters(backbone, cfg, seed),
        Method::Lora => attach_lora(backbone, cfg, RankPolicy::Budget, seed),
        Method::Finetune => finetune(backbone, cfg),
    }
}

/// Full finetuning: every backbone parameter is trainable.
pub fn finetune<S: Scalar>(backbone: &BackboneModel<S>, cfg: &ExtensionConfig) -> Result<ExtendedModel<S>> {
    cfg.validate()?;
    if cfg.method != Method::Finetune {
        return Err(Error::config("finetune() needs method = finetune"));
    }
    let mut params = backbone.params.clone();
    params
        .ids()
        .collect::<Vec<_>>()
        .into_iter()
        .for_each(|id| params.set_trainable(id, true));
    Ok(ExtendedModel {
        config: backbone.config.clone(),
        extension: cfg.clone(),
        n_backbone: params.len(),
        params,
        backbone: backbone.layout.clone(),
        layers: vec![LayerExtension::None; backbone.config.n_layers],
        extra_dim: 0,
    })
}

fn frozen_copy<S: Scalar>(backbone: &BackboneModel<S>) -> ParamStore<S> {
    let mut params = backbone.params.clone();
    params.freeze_all();
    params
}

/// Adds a GLU adapter in parallel to every FFN; the layer output becomes
/// `x + FFN(norm(x)) + Adapter(norm(x))`. Backbone weights are frozen.
pub fn attach_adapters<S: Scalar>(
    backbone: &BackboneModel<S>,
    cfg: &ExtensionConfig,
    seed: u64,
) -> Result<ExtendedModel<S>> {
    cfg.validate()?;
    if cfg.method != Method::Adapter {
        return Err(Error::config("attach_adapters needs method = adapter"));
    }
    let h = adapter_latent(cfg.budget_fraction, backbone.count_params(false), &backbone.config)?;
    attach_adapters_with_latent(backbone, cfg, h, seed)
}

/// [`attach_adapters`] with an explicit adapter latent.
pub fn attach_adapters_with_latent<S: Scalar>(
    backbone: &BackboneModel<S>,
    cfg: &ExtensionConfig,
    latent: usize,
    seed: u64,
) -> Result<ExtendedModel<S>> {
    cfg.validate()?;
    if latent == 0 {
        return Err(Error::config("adapter latent must be at least 1"));
    }
    let config = &backbone.config;
    let (d, n_layers) = (config.model_dim, config.n_layers);
    let init = match cfg.init_scheme {
        InitScheme::LowVariance => low_variance_init(d, n_layers)?,
        InitScheme::He => he_adapter_init(d)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = frozen_copy(backbone);
    let n_backbone = params.len();
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let prefix = format!("adapters.{l}");
        let a_i = params.insert(
            format!("{prefix}.a_i"),
            normal_init(&[d, latent], init.variance, &mut rng)?,
        );
        let a_g = params.insert(
            format!("{prefix}.a_g"),
            normal_init(&[d, latent], init.variance, &mut rng)?,
        );
        let a_o_value = if init.zero_output {
            Tensor::zeros(&[latent, d])
        } else {
            he_init(&[latent, d], latent, &mut rng)?
        };
        let a_o = params.insert(format!("{prefix}.a_o"), a_o_value);
        let gate = match cfg.gate {
            GateKind::None => None,
            GateKind::Relu | GateKind::Sigmoid => {
                let u = params.insert(
                    format!("{prefix}.gate_u"),
                    normal_init(&[d, 1], init.variance, &mut rng)?,
                );
                let b = params.insert(format!("{prefix}.gate_b"), Tensor::zeros(&[1]));
                Some((u, b))
            }
        };
        layers.push(LayerExtension::Adapter(GatedAdapter {
            a_i,
            a_g,
            a_o,
            gate,
            kind: cfg.gate,
        }));
    }
    Ok(ExtendedModel {
        config: config.clone(),
        extension: cfg.clone(),
        params,
        backbone: backbone.layout.clone(),
        layers,
        extra_dim: latent,
        n_backbone,
    })
}

/// Adds a low-rank delta `down · up` to each of `W_i`, `W_g`, `W_o` in every
/// layer (`down` He-initialized, `up` zero). Backbone weights are frozen.
pub fn attach_lora<S: Scalar>(
    backbone: &BackboneModel<S>,
    cfg: &ExtensionConfig,
    policy: RankPolicy,
    seed: u64,
) -> Result<ExtendedModel<S>> {
    cfg.validate()?;
    if cfg.method != Method::Lora {
        return Err(Error::config("attach_lora needs method = lora"));
    }
    let config = &backbone.config;
    let rank = match policy {
        RankPolicy::Budget => lora_rank(cfg.budget_fraction, backbone.count_params(false), config)?,
        RankPolicy::Fixed(r) if r >= 1 => r,
        RankPolicy::Fixed(_) => return Err(Error::config("LoRA rank must be at least 1")),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = frozen_copy(backbone);
    let n_backbone = params.len();
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let mut pairs = Vec::with_capacity(3);
        for (name, fan_in, fan_out) in lora_targets(config) {
            let down = params.insert(
                format!("lora.{l}.{name}.down"),
                he_init(&[fan_in, rank], fan_in, &mut rng)?,
            );
            let up = params.insert(format!("lora.{l}.{name}.up"), Tensor::zeros(&[rank, fan_out]));
            pairs.push((down, up));
        }
        layers.push(LayerExtension::Lora(LoraLayer {
            pairs: [pairs[0], pairs[1], pairs[2]],
        }));
    }
    Ok(ExtendedModel {
        config: config.clone(),
        extension: cfg.clone(),
        params,
        backbone: backbone.layout.clone(),
        layers,
        extra_dim: rank,
        n_backbone,
    })
}

impl<S: Scalar> ExtendedModel<S> {
    /// Rebuilds an extended model from stored parameters (e.g. a checkpoint).
    pub fn from_params(
        config: ModelConfig,
        extension: ExtensionConfig,
        extra_dim: usize,
        mut params: ParamStore<S>,
    ) -> Result<Self> {
        config.validate()?;
        extension.validate()?;
        let backbone = BackboneLayout::resolve(&config, &params)?;
        let n_backbone = match extension.method {
            Method::Finetune => params.len(),
            _ => params
                .ids()
                .position(|id| {
                    let n = params.name(id);
                    n.starts_with("adapters.") || n.starts_with("lora.")
                })
                .unwrap_or(params.len()),
        };
        let (d, f) = (config.model_dim, config.ffn_latent);
        let find = |params: &ParamStore<S>, name: String, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .find(&name)
                .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))?;
            if params.get(id).shape() != shape {
                return Err(Error::shape("parameter layout", params.get(id).shape(), shape));
            }
            Ok(id)
        };
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let layer = match extension.method {
                Method::Finetune => LayerExtension::None,
                Method::Adapter => {
                    let h = extra_dim;
                    let p = format!("adapters.{l}");
                    let gate = match extension.gate {
                        GateKind::None => None,
                        _ => Some((
                            find(&params, format!("{p}.gate_u"), &[d, 1])?,
                            find(&params, format!("{p}.gate_b"), &[1])?,
                        )),
                    };
                    LayerExtension::Adapter(GatedAdapter {
                        a_i: find(&params, format!("{p}.a_i"), &[d, h])?,
                        a_g: find(&params, format!("{p}.a_g"), &[d, h])?,
                        a_o: find(&params, format!("{p}.a_o"), &[h, d])?,
                        gate,
                        kind: extension.gate,
                    })
                }
                Method::Lora => {
                    let r = extra_dim;
                    let mut pairs = Vec::with_capacity(3);
                    for (name, fan_in, fan_out) in [("w_i", d, f), ("w_g", d, f), ("w_o", f, d)] {
                        pairs.push((
                            find(&params, format!("lora.{l}.{name}.down"), &[fan_in, r])?,
                            find(&params, format!("lora.{l}.{name}.up"), &[r, fan_out])?,
                        ));
                    }
                    LayerExtension::Lora(LoraLayer {
                        pairs: [pairs[0], pairs[1], pairs[2]],
                    })
                }
            };
            layers.push(layer);
        }
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            params.set_trainable(id, extension.method == Method::Finetune || id.index() >= n_backbone);
        }
        Ok(ExtendedModel {
            config,
            extension,
            params,
            backbone,
            layers,
            extra_dim,
            n_backbone,
        })
    }

    /// Parameters not covered by the freeze mask, in a stable order.
    pub fn trainable_parameters(&self) -> Vec<ParamId> {
        self.params.trainable_ids()
    }

    pub fn count_params(&self, trainable_only: bool) -> usize {
        self.params.count(trainable_only)
    }

    /// Number of parameters that belong to the backbone.
    pub fn backbone_param_count(&self) -> usize {
        self.params
            .ids()
            .take(self.n_backbone)
            .map(|id| self.params.get(id).numel())
            .sum()
    }

    pub fn is_backbone_param(&self, id: ParamId) -> bool {
        id.index() < self.n_backbone
    }

    /// The current backbone weights as a standalone model.
    pub fn backbone_model(&self) -> Result<BackboneModel<S>> {
        let mut store = ParamStore::new();
        for id in self.params.ids().take(self.n_backbone) {
            store.insert(self.params.name(id), self.params.get(id).clone());
        }
        BackboneModel::from_params(self.config.clone(), store)
    }

    pub fn adapters(&self) -> impl Iterator<Item = (usize, &GatedAdapter)> {
        self.layers.iter().enumerate().filter_map(|(l, e)| match e {
            LayerExtension::Adapter(a) => Some((l, a)),
            _ => None,
        })
    }
}

impl<S: Scalar> LayerHooks<S> for ExtendedModel<S> {
    fn ffn_weights(
        &self,
        tape: &mut Tape<S>,
        vars: &Bound,
        layer: usize,
        base: (Var, Var, Var),
    ) -> Result<(Var, Var, Var)> {
        let LayerExtension::Lora(lora) = &self.layers[layer] else {
            return Ok(base);
        };
        let mut out = [base.0, base.1, base.2];
        for (w, &(down, up)) in out.iter_mut().zip(&lora.pairs) {
            let delta = tape.matmul(vars[down], vars[up])?;
            *w = tape.add(*w, delta)?;
        }
        Ok((out[0], out[1], out[2]))
    }

    fn parallel_block(
        &self,
        tape: &mut Tape<S>,
        vars: &Bound,
        layer: usize,
        x_norm: Var,
    ) -> Result<Option<AdapterTrace>> {
        match &self.layers[layer] {
            LayerExtension::Adapter(a) => adapter_forward(tape, vars, a, x_norm, self.config.activation).map(Some),
            _ => Ok(None),
        }
    }
}

impl<S: Scalar> LanguageModel<S> for ExtendedModel<S> {
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
        forward(&self.config, &self.backbone, tape, vars, batch, self)
    }
}
