//! Byte-level tokenization, synthetic two-language corpora and the
//! mixed-domain batch sampler.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::backbone::TokenBatch;
use crate::error::{Error, Result};
use crate::losses::{Domain, DomainMask};

pub const BYTE_VOCAB: usize = 256;

pub fn tokenize(text: &[u8]) -> Vec<usize> {
    text.iter().map(|&b| b as usize).collect()
}

pub fn detokenize(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::Index {
                what: "byte token",
                index: id,
                bound: BYTE_VOCAB,
            })
        })
        .collect()
}

/// A token stream from one domain, split into disjoint train and held-out
/// parts (the held-out part is the tail).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub domain: Domain,
    pub train: Vec<u8>,
    pub heldout: Vec<u8>,
}

impl Corpus {
    pub fn new(domain: Domain, stream: Vec<u8>, heldout_fraction: f64) -> Result<Self> {
        if stream.is_empty() {
            return Err(Error::config("corpus is empty"));
        }
        if !(0.0..1.0).contains(&heldout_fraction) {
            return Err(Error::config(format!(
                "held-out fraction must lie in [0, 1), got {heldout_fraction}"
            )));
        }
        let n_heldout = (stream.len() as f64 * heldout_fraction).round() as usize;
        let mut train = stream;
        let heldout = train.split_off(train.len() - n_heldout);
        if train.is_empty() {
            return Err(Error::config("corpus has no training tokens after the split"));
        }
        Ok(Corpus { domain, train, heldout })
    }

    /// Reads a whole text file as bytes.
    pub fn from_file(path: &Path, domain: Domain, heldout_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::new(domain, bytes, heldout_fraction)
    }
}

/// Permutation applied by a cipher language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Permutation {
    Identity,
    /// Seeded shuffle of all 256 byte values.
    Bytes {
        seed: u64,
    },
    /// Seeded shuffle restricted to the base language's alphabet; other
    /// bytes map to themselves.
    Alphabet {
        seed: u64,
    },
}

/// Recipe for a deterministic synthetic language.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SyntheticLanguageSpec {
    /// Order-2 character chain: every context pair gets a seeded softmax
    /// distribution with logits `z / temperature`, `z ~ N(0, 1)`.
    Markov2 {
        seed: u64,
        temperature: f64,
        alphabet: String,
    },
    /// A base language with every byte passed through a permutation.
    Cipher {
        base: Box<SyntheticLanguageSpec>,
        permutation: Permutation,
    },
}

pub const DEFAULT_ALPHABET: &str = "abcdefghijklmnopqrstuvwxyz ";

impl SyntheticLanguageSpec {
    pub fn markov2(seed: u64, temperature: f64) -> Self {
        SyntheticLanguageSpec::Markov2 {
            seed,
            temperature,
            alphabet: DEFAULT_ALPHABET.into(),
        }
    }

    pub fn cipher(base: SyntheticLanguageSpec, permutation: Permutation) -> Self {
        SyntheticLanguageSpec::Cipher {
            base: Box::new(base),
            permutation,
        }
    }

    pub fn alphabet(&self) -> Vec<u8> {
        match self {
            SyntheticLanguageSpec::Markov2 { alphabet, .. } => alphabet.bytes().collect(),
            SyntheticLanguageSpec::Cipher { base, permutation } => {
                let table = permutation_table(permutation, &base.alphabet());
                base.alphabet().iter().map(|&b| table[b as usize]).collect()
            }
        }
    }

    /// Same language with its chain temperature multiplied by `factor`.
    pub fn with_temperature_scaled(&self, factor: f64) -> Self {
        match self {
            SyntheticLanguageSpec::Markov2 {
                seed,
                temperature,
                alphabet,
            } => SyntheticLanguageSpec::Markov2 {
                seed: *seed,
                temperature: temperature * factor,
                alphabet: alphabet.clone(),
            },
            SyntheticLanguageSpec::Cipher { base, permutation } => SyntheticLanguageSpec::Cipher {
                base: Box::new(base.with_temperature_scaled(factor)),
                permutation: permutation.clone(),
            },
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            SyntheticLanguageSpec::Markov2 {
                temperature, alphabet, ..
            } => {
                if !(*temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::config("markov2 temperature must be positive"));
                }
                let mut bytes: Vec<u8> = alphabet.bytes().collect();
                bytes.sort_unstable();
                bytes.dedup();
                if bytes.len() < 2 || bytes.len() != alphabet.len() {
                    return Err(Error::config("markov2 alphabet needs >= 2 distinct bytes"));
                }
                Ok(())
            }
            SyntheticLanguageSpec::Cipher { base, .. } => base.validate(),
        }
    }
}

fn permutation_table(permutation: &Permutation, alphabet: &[u8]) -> [u8; 256] {
    let mut table = [0u8; 256];
    for (i, t) in table.iter_mut().enumerate() {
        *t = i as u8;
    }
    match permutation {
        Permutation::Identity => {}
        Permutation::Bytes { seed } => {
            table.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
        }
        Permutation::Alphabet { seed } => {
            let mut image = alphabet.to_vec();
            image.shuffle(&mut ChaCha8Rng::seed_from_u64(*seed));
            for (&from, &to) in alphabet.iter().zip(&image) {
                table[from as usize] = to;
            }
        }
    }
    table
}

fn markov2_stream(seed: u64, temperature: f64, alphabet: &[u8], n_tokens: usize) -> Vec<u8> {
    let k = alphabet.len();
    let mut table_rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts: Vec<WeightedIndex<f64>> = (0..k * k)
        .map(|_| {
            let z: Vec<f64> = (0..k)
                .map(|_| StandardNormal.sample(&mut table_rng))
                .collect::<Vec<f64>>();
            let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
            WeightedIndex::new(w).expect("softmax weights are positive")
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let (mut a, mut b) = (rng.gen_range(0..k), rng.gen_range(0..k));
    let mut out = Vec::with_capacity(n_tokens);
    for _ in 0..n_tokens {
        let c = contexts[a * k + b].sample(&mut rng);
        out.push(alphabet[c]);
        (a, b) = (b, c);
    }
    out
}

/// Raw token stream of a synthetic language. Needs `n_tokens >= 10 · seq`.
pub fn generate_tokens(spec: &SyntheticLanguageSpec, n_tokens: usize, seq: usize) -> Result<Vec<u8>> {
    spec.validate()?;
    if n_tokens < 10 * seq.max(1) {
        return Err(Error::config(format!(
            "synthetic corpus of {n_tokens} tokens is shorter than 10 windows of {seq}"
        )));
    }
    Ok(match spec {
        SyntheticLanguageSpec::Markov2 {
            seed,
            temperature,
            alphabet,
        } => markov2_stream(*seed, *temperature, alphabet.as_bytes(), n_tokens),
        SyntheticLanguageSpec::Cipher { base, permutation } => {
            let table = permutation_table(permutation, &base.alphabet());
            generate_tokens(base, n_tokens, seq)?
                .into_iter()
                .map(|b| table[b as usize])
                .collect()
        }
    })
}

pub fn generate_synthetic_corpus(
    spec: &SyntheticLanguageSpec,
    domain: Domain,
    n_tokens: usize,
    seq: usize,
    heldout_fraction: f64,
) -> Result<Corpus> {
    Corpus::new(domain, generate_tokens(spec, n_tokens, seq)?, heldout_fraction)
}

/// Inputs, next-token targets and per-sequence domain flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    pub inputs: TokenBatch,
    pub targets: Vec<usize>,
    pub mask: DomainMask,
}

/// Draws `batch` windows; each comes whole from `original` with probability
/// `p`, else from `new`, at a uniformly random offset of the training split.
pub fn sample_batch(
    original: &Corpus,
    new: &Corpus,
    p: f64,
    batch: usize,
    seq: usize,
    rng: &mut impl Rng,
) -> Result<MixedBatch> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("mixing rate p must lie in [0, 1], got {p}")));
    }
    if batch == 0 || seq == 0 {
        return Err(Error::config("batch size and sequence length must be positive"));
    }
    for c in [original, new] {
        if c.train.len() <= seq {
            return Err(Error::config(format!(
                "{:?} corpus has {} training tokens, need more than {seq}",
                c.domain,
                c.train.len()
            )));
        }
    }
    let mut inputs = Vec::with_capacity(batch * seq);
    let mut targets = Vec::with_capacity(batch * seq);
    let mut flags = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (domain, corpus) = if rng.gen::<f64>() < p {
            (Domain::Original, original)
        } else {
            (Domain::New, new)
        };
        let start = rng.gen_range(0..corpus.train.len() - seq);
        let window = &corpus.train[start..start + seq + 1];
        inputs.extend(window[..seq].iter().map(|&b| b as usize));
        targets.extend(window[1..].iter().map(|&b| b as usize));
        flags.push(domain);
    }
    Ok(MixedBatch {
        inputs: TokenBatch::new(inputs, batch, seq)?,
        targets,
        mask: DomainMask(flags),
    })
}
