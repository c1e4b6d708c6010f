//! Config-driven pipeline shared by the command line and the acceptance
//! suite: corpora, backbone pretraining and extension runs.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneModel, ModelConfig};
use crate::data::{generate_synthetic_corpus, Corpus, Permutation, SyntheticLanguageSpec};
use crate::error::{Error, Result};
use crate::eval::EvalReport;
use crate::extension::{attach, ExtendedModel, ExtensionConfig};
use crate::losses::Domain;
use crate::scalar::Scalar;
use crate::training::{pretrain_backbone, train_extension, TrainConfig, TrainingData};

/// Where the two languages come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Language the backbone is pretrained on.
    pub original: SyntheticLanguageSpec,
    /// Language the extension should learn.
    pub new: SyntheticLanguageSpec,
    /// The original-domain data seen during extension is generated from
    /// `original` with its temperature scaled by this factor, so it is
    /// related to, but not identical with, the pretraining distribution.
    pub proxy_temperature_scale: f64,
    pub tokens_per_language: usize,
    pub heldout_fraction: f64,
    /// Text files replacing the synthetic languages.
    pub original_path: Option<PathBuf>,
    pub new_path: Option<PathBuf>,
}

/// Symbols of the default original language.
pub const ORIGINAL_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ ";
/// Symbols of the default new language: a strict subset of the original
/// ones, so every new-domain token was seen during pretraining while the
/// lowercase letters only ever occur in the original domain.
pub const NEW_ALPHABET: &str = "ABCDEFGHIJKLMNOPQRSTUVWXYZ ";

impl Default for DataConfig {
    fn default() -> Self {
        let chain = |seed, alphabet: &str| SyntheticLanguageSpec::Markov2 {
            seed,
            temperature: 0.5,
            alphabet: alphabet.into(),
        };
        DataConfig {
            original: chain(11, ORIGINAL_ALPHABET),
            new: SyntheticLanguageSpec::cipher(chain(23, NEW_ALPHABET), Permutation::Alphabet { seed: 5 }),
            proxy_temperature_scale: 1.25,
            tokens_per_language: 2_000_000,
            heldout_fraction: 0.05,
            original_path: None,
            new_path: None,
        }
    }
}

impl DataConfig {
    /// Builds the training and evaluation corpora for windows of `seq`.
    pub fn build(&self, seq: usize) -> Result<TrainingData> {
        if !(self.proxy_temperature_scale > 0.0) {
            return Err(Error::config("data.proxy_temperature_scale must be positive"));
        }
        let make = |path: &Option<PathBuf>, spec: &SyntheticLanguageSpec, domain| match path {
            Some(p) => Corpus::from_file(p, domain, self.heldout_fraction),
            None => generate_synthetic_corpus(spec, domain, self.tokens_per_language, seq, self.heldout_fraction),
        };
        let eval_old = make(&self.original_path, &self.original, Domain::Original)?;
        let new = make(&self.new_path, &self.new, Domain::New)?;
        let original = match self.original_path {
            Some(_) => eval_old.clone(),
            None => {
                let proxy = self.original.with_temperature_scaled(self.proxy_temperature_scale);
                generate_synthetic_corpus(
                    &proxy,
                    Domain::Original,
                    self.tokens_per_language,
                    seq,
                    self.heldout_fraction,
                )?
            }
        };
        Ok(TrainingData {
            original,
            eval_new: new.clone(),
            new,
            eval_old,
        })
    }
}

/// Everything needed to pretrain a backbone and extend it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub extension: ExtensionConfig,
    pub pretrain: TrainConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let extension = ExtensionConfig::default();
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::extension(extension.method),
            extension,
            pretrain: TrainConfig::pretrain(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON, rejecting unknown keys. When `train.lr` is absent the
    /// extension learning rate defaults per method.
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_path_to_error::Error<serde_json::Error>> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de)?;
        let has_lr = serde_json::from_str::<serde_json::Value>(text)
            .ok()
            .and_then(|v| v.pointer("/train/lr").cloned())
            .is_some();
        if !has_lr {
            cfg.train.lr = crate::training::default_lr(cfg.extension.method);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.extension.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        for (name, t) in [("pretrain", &self.pretrain), ("train", &self.train)] {
            if t.seq_len > self.model.max_seq_len {
                return Err(Error::config(format!(
                    "{name}.seq_len {} exceeds model.max_seq_len {}",
                    t.seq_len, self.model.max_seq_len
                )));
            }
        }
        Ok(())
    }
}

/// Pretrains a fresh backbone on the original language (not the proxy).
pub fn pretrain<S: Scalar>(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    data: &TrainingData,
    on_eval: &mut dyn FnMut(&EvalReport) -> Result<()>,
) -> Result<(BackboneModel<S>, Vec<EvalReport>)> {
    let mut model = BackboneModel::init(model_cfg.clone(), cfg.seed)?;
    let pretrain_data = TrainingData {
        original: data.eval_old.clone(),
        ..data.clone()
    };
    let cfg = TrainConfig { p: 1.0, ..cfg.clone() };
    let reports = pretrain_backbone(&mut model, &pretrain_data, &cfg, on_eval)?;
    Ok((model, reports))
}

/// Attaches `ext` to a copy of `backbone` and trains it.
pub fn extend<S: Scalar>(
    backbone: &BackboneModel<S>,
    ext: &ExtensionConfig,
    cfg: &TrainConfig,
    data: &TrainingData,
    on_eval: &mut dyn FnMut(&EvalReport) -> Result<()>,
) -> Result<(ExtendedModel<S>, Vec<EvalReport>)> {
    let mut model = attach(backbone, ext, cfg.seed)?;
    let reports = train_extension(&mut model, data, cfg, on_eval)?;
    Ok((model, reports))
}
