//! Pretraining and extension training loops.

pub mod checkpoint;
pub mod optim;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, LanguageModel};
use crate::data::{sample_batch, Corpus};
use crate::error::{Error, Result};
use crate::eval::{perplexity, EvalReport};
use crate::extension::{ExtendedModel, ExtensionConfig, Method};
use crate::losses::{training_loss, LossBreakdown};
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor};

pub use optim::{adamw_step, clip_grad_norm, lr_schedule, AdamWParams, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Probability that a training sequence comes from the original domain.
    pub p: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_interval: usize,
    /// Cap on held-out windows per domain and evaluation; `None` reads all.
    pub eval_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 2e-4,
            warmup_steps: 100,
            total_steps: 2000,
            batch_size: 16,
            seq_len: 128,
            p: 0.1,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            eval_interval: 500,
            eval_windows: Some(256),
        }
    }
}

impl TrainConfig {
    /// Backbone pretraining defaults.
    pub fn pretrain() -> Self {
        TrainConfig {
            lr: 3e-3,
            warmup_steps: 200,
            total_steps: 4000,
            p: 1.0,
            weight_decay: 0.01,
            eval_interval: 1000,
            ..Self::default()
        }
    }

    /// Extension defaults with the per-method peak learning rate: 5e-5 for
    /// finetuning and LoRA, 2e-4 for adapters.
    pub fn extension(method: Method) -> Self {
        TrainConfig {
            lr: default_lr(method),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps > self.total_steps {
            return Err(Error::config("train.warmup_steps exceeds train.total_steps"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr must be positive"));
        }
        if self.batch_size == 0 || self.seq_len == 0 {
            return Err(Error::config("train.batch_size and train.seq_len must be positive"));
        }
        if self.eval_interval == 0 {
            return Err(Error::config("train.eval_interval must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("train.p must lie in [0, 1]"));
        }
        if !(self.weight_decay >= 0.0) || !(self.grad_clip > 0.0) {
            return Err(Error::config("train.weight_decay must be >= 0 and train.grad_clip > 0"));
        }
        Ok(())
    }
}

pub fn default_lr(method: Method) -> f64 {
    match method {
        Method::Finetune | Method::Lora => 5e-5,
        Method::Adapter => 2e-4,
    }
}

/// Corpora used by a run: the training sources for both domains and the
/// held-out sources for evaluation. The original-domain training source may
/// be only a proxy of the evaluation language.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub original: Corpus,
    pub new: Corpus,
    pub eval_old: Corpus,
    pub eval_new: Corpus,
}

/// Evaluates both held-out sets.
pub fn evaluate<S: Scalar, M: LanguageModel<S> + ?Sized>(
    model: &M,
    data: &TrainingData,
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let old = perplexity(model, &data.eval_old.heldout, cfg.seq_len, cfg.eval_windows)?;
    let new = perplexity(model, &data.eval_new.heldout, cfg.seq_len, cfg.eval_windows)?;
    Ok((old.nll, new.nll))
}

/// Runs `cfg.total_steps` optimizer steps on the trainable parameters of
/// `model`, calling `on_eval` for every evaluation record.
pub fn train<S: Scalar, M: LanguageModel<S>>(
    model: &mut M,
    ext: Option<&ExtensionConfig>,
    data: &TrainingData,
    cfg: &TrainConfig,
    on_eval: &mut dyn FnMut(&EvalReport) -> Result<()>,
) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let ids: Vec<ParamId> = model.params().trainable_ids();
    let mut state = OptimState::new(model.params(), &ids);
    let hp = AdamWParams {
        weight_decay: cfg.weight_decay,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = model.model_config().model_dim;
    let mut reports = Vec::new();
    let mut acc = LossBreakdown::default();
    let mut acc_steps = 0usize;
    for step in 0..cfg.total_steps {
        let lr = lr_schedule(step + 1, cfg.lr, cfg.warmup_steps, cfg.total_steps);
        let batch = sample_batch(&data.original, &data.new, cfg.p, cfg.batch_size, cfg.seq_len, &mut rng)?;
        let mut tape = Tape::<S>::new();
        let vars = model.params().bind(&mut tape, true);
        let out = model.forward(&mut tape, &vars, &batch.inputs)?;
        let (loss, breakdown) = training_loss(
            &mut tape,
            out.logits,
            &out.adapters,
            &batch.targets,
            &batch.mask,
            cfg.seq_len,
            d,
            ext,
        )?;
        if !breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}: {breakdown:?}", step + 1)));
        }
        let mut grads = tape.backward(loss)?;
        let mut grad_list: Vec<Tensor<S>> = ids
            .iter()
            .map(|&id| {
                grads
                    .take(vars[id])
                    .unwrap_or_else(|| Tensor::zeros(model.params().get(id).shape()))
            })
            .collect();
        drop(tape);
        clip_grad_norm(&mut grad_list, cfg.grad_clip);
        adamw_step(model.params_mut(), &grad_list, &mut state, lr, &hp)?;

        acc.lm += breakdown.lm;
        acc.local_l1 += breakdown.local_l1;
        acc.local_ce += breakdown.local_ce;
        acc_steps += 1;
        let done = step + 1;
        if done % cfg.eval_interval == 0 || done == cfg.total_steps {
            let (nll_old, nll_new) = evaluate(model, data, cfg)?;
            let n = acc_steps as f64;
            let report = EvalReport {
                step: done,
                lr,
                nll_old,
                nll_new,
                ppl_old: nll_old.exp(),
                ppl_new: nll_new.exp(),
                lm_loss: acc.lm / n,
                local_l1: acc.local_l1 / n,
                local_ce: acc.local_ce / n,
            };
            on_eval(&report)?;
            reports.push(report);
            acc = LossBreakdown::default();
            acc_steps = 0;
        }
    }
    Ok(reports)
}

/// Trains every backbone parameter on the original-domain stream.
pub fn pretrain_backbone<S: Scalar>(
    model: &mut BackboneModel<S>,
    data: &TrainingData,
    cfg: &TrainConfig,
    on_eval: &mut dyn FnMut(&EvalReport) -> Result<()>,
) -> Result<Vec<EvalReport>> {
    train(model, None, data, cfg, on_eval)
}

/// Trains an extended model with mixed data and its local losses. The
/// optimizer state starts fresh.
pub fn train_extension<S: Scalar>(
    model: &mut ExtendedModel<S>,
    data: &TrainingData,
    cfg: &TrainConfig,
    on_eval: &mut dyn FnMut(&EvalReport) -> Result<()>,
) -> Result<Vec<EvalReport>> {
    let ext = model.extension.clone();
    train(model, Some(&ext), data, cfg, on_eval)
}
