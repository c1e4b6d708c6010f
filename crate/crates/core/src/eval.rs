//! Held-out perplexity on both domains.

use serde::{Deserialize, Serialize};

use crate::backbone::{LanguageModel, TokenBatch};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels;

/// One evaluation record of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub step: usize,
    pub lr: f64,
    pub nll_old: f64,
    pub nll_new: f64,
    pub ppl_old: f64,
    pub ppl_new: f64,
    /// Loss breakdown averaged over the steps since the previous record.
    pub lm_loss: f64,
    pub local_l1: f64,
    pub local_ce: f64,
}

/// Mean NLL and its exponential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub nll: f64,
    pub ppl: f64,
}

impl Perplexity {
    pub fn from_nll(nll: f64) -> Self {
        Perplexity { nll, ppl: nll.exp() }
    }
}

/// Windows evaluated per forward pass.
const EVAL_BATCH: usize = 16;

/// Mean NLL over every predicted position of non-overlapping windows of
/// `seq` tokens (the last, shorter window counts when it has two tokens or
/// more). `max_windows` caps the number of windows read from the front.
pub fn perplexity<S: Scalar, M: LanguageModel<S> + ?Sized>(
    model: &M,
    heldout: &[u8],
    seq: usize,
    max_windows: Option<usize>,
) -> Result<Perplexity> {
    if heldout.len() < 2 {
        return Err(Error::Contract("held-out text needs at least two tokens".into()));
    }
    if seq < 2 {
        return Err(Error::config("evaluation windows need at least two tokens"));
    }
    let mut windows: Vec<&[u8]> = heldout.chunks(seq).filter(|w| w.len() >= 2).collect();
    if let Some(cap) = max_windows {
        windows.truncate(cap.max(1));
    }
    let vocab = model.model_config().vocab_size;
    let mut total = 0.0;
    let mut count = 0usize;
    let (full, partial): (Vec<&[u8]>, Vec<&[u8]>) = windows.into_iter().partition(|w| w.len() == seq);
    let groups = full.chunks(EVAL_BATCH).chain(partial.chunks(1));
    for group in groups {
        let len = group[0].len();
        let mut inputs = Vec::with_capacity(group.len() * (len - 1));
        let mut targets = Vec::with_capacity(group.len() * (len - 1));
        for w in group {
            inputs.extend(w[..len - 1].iter().map(|&b| b as usize));
            targets.extend(w[1..].iter().map(|&b| b as usize));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::Index {
                what: "target token",
                index: bad,
                bound: vocab,
            });
        }
        let batch = TokenBatch::new(inputs, group.len(), len - 1)?;
        let logits = model.eval_logits(&batch)?;
        total += kernels::row_nll(logits.data(), vocab, &targets).iter().sum::<f64>();
        count += targets.len();
    }
    Ok(Perplexity::from_nll(total / count as f64))
}
