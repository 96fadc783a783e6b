//! Interpolated trigram language model over target token ids.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::text::{BOS, EOS};

/// Interpolation weights for unigram, bigram and trigram estimates.
pub const DEFAULT_LAMBDAS: [f64; 3] = [0.1, 0.3, 0.6];

#[derive(Clone, Debug, PartialEq)]
pub struct TrigramModel {
    vocab_size: usize,
    lambdas: [f64; 3],
    unigrams: BTreeMap<u32, u64>,
    bigrams: BTreeMap<(u32, u32), u64>,
    trigrams: BTreeMap<(u32, u32, u32), u64>,
    bigram_contexts: BTreeMap<u32, u64>,
    trigram_contexts: BTreeMap<(u32, u32), u64>,
    total: u64,
}

impl TrigramModel {
    /// Builds a model from raw counts; context totals are derived.
    pub fn from_counts(
        vocab_size: usize,
        lambdas: [f64; 3],
        unigrams: BTreeMap<u32, u64>,
        bigrams: BTreeMap<(u32, u32), u64>,
        trigrams: BTreeMap<(u32, u32, u32), u64>,
    ) -> Result<Self> {
        if lambdas.iter().any(|&l| !(l > 0.0)) || libm::fabs(lambdas.iter().sum::<f64>() - 1.0) > 1e-9 {
            return Err(Error::InvalidConfig(
                "interpolation weights must be positive and sum to 1".into(),
            ));
        }
        if vocab_size == 0 {
            return Err(Error::InvalidConfig("vocabulary size must be positive".into()));
        }
        let total = unigrams.values().sum();
        if total == 0 {
            return Err(Error::EmptySequence);
        }
        let mut bigram_contexts = BTreeMap::new();
        for (&(v, _), &c) in &bigrams {
            *bigram_contexts.entry(v).or_insert(0) += c;
        }
        let mut trigram_contexts = BTreeMap::new();
        for (&(u, v, _), &c) in &trigrams {
            *trigram_contexts.entry((u, v)).or_insert(0) += c;
        }
        Ok(Self {
            vocab_size,
            lambdas,
            unigrams,
            bigrams,
            trigrams,
            bigram_contexts,
            trigram_contexts,
            total,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn lambdas(&self) -> [f64; 3] {
        self.lambdas
    }

    pub fn unigrams(&self) -> &BTreeMap<u32, u64> {
        &self.unigrams
    }

    pub fn bigrams(&self) -> &BTreeMap<(u32, u32), u64> {
        &self.bigrams
    }

    pub fn trigrams(&self) -> &BTreeMap<(u32, u32, u32), u64> {
        &self.trigrams
    }

    /// Tokens that occur as predicted events (words and EOS).
    pub fn events(&self) -> impl Iterator<Item = u32> + '_ {
        self.unigrams.keys().copied()
    }

    /// Two-token histories seen in training.
    pub fn contexts(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.trigram_contexts.keys().copied()
    }

    /// Maximum-likelihood unigram estimate, floored at `1/(V·total)` for unseen tokens.
    pub fn unigram_prob(&self, w: u32) -> f64 {
        match self.unigrams.get(&w) {
            Some(&c) => c as f64 / self.total as f64,
            None => 1.0 / (self.vocab_size as f64 * self.total as f64),
        }
    }

    pub fn bigram_prob(&self, v: u32, w: u32) -> f64 {
        match (self.bigram_contexts.get(&v), self.bigrams.get(&(v, w))) {
            (Some(&ctx), Some(&c)) => c as f64 / ctx as f64,
            _ => 0.0,
        }
    }

    pub fn trigram_prob(&self, u: u32, v: u32, w: u32) -> f64 {
        match (self.trigram_contexts.get(&(u, v)), self.trigrams.get(&(u, v, w))) {
            (Some(&ctx), Some(&c)) => c as f64 / ctx as f64,
            _ => 0.0,
        }
    }

    /// `p(w | u, v) = λ₃p̂(w|u,v) + λ₂p̂(w|v) + λ₁p̂(w)`.
    pub fn prob(&self, u: u32, v: u32, w: u32) -> f64 {
        let [l1, l2, l3] = self.lambdas;
        l3 * self.trigram_prob(u, v, w) + l2 * self.bigram_prob(v, w) + l1 * self.unigram_prob(w)
    }

    pub fn log_prob(&self, u: u32, v: u32, w: u32) -> f64 {
        libm::log(self.prob(u, v, w))
    }

    /// Log-probabilities of every id below the vocabulary size after `(u, v)`.
    pub fn log_probs(&self, u: u32, v: u32) -> Vec<f64> {
        (0..self.vocab_size as u32)
            .map(|w| self.log_prob(u, v, w))
            .collect()
    }

    /// Log-probability of `tokens` followed by EOS, starting from `BOS BOS`.
    pub fn sequence_log_prob(&self, tokens: &[u32]) -> f64 {
        let (mut u, mut v) = (BOS, BOS);
        let mut total = 0.0;
        for &w in tokens.iter().chain(core::iter::once(&EOS)) {
            total += self.log_prob(u, v, w);
            (u, v) = (v, w);
        }
        total
    }
}

/// Counts n-grams over sentences padded as `BOS BOS w₁ … wₙ EOS`.
pub fn train_trigram(corpus: &[Vec<u32>], vocab_size: usize) -> Result<TrigramModel> {
    train_trigram_with(corpus, vocab_size, DEFAULT_LAMBDAS)
}

pub fn train_trigram_with(corpus: &[Vec<u32>], vocab_size: usize, lambdas: [f64; 3]) -> Result<TrigramModel> {
    if corpus.is_empty() {
        return Err(Error::EmptySequence);
    }
    let mut unigrams = BTreeMap::new();
    let mut bigrams = BTreeMap::new();
    let mut trigrams = BTreeMap::new();
    for sentence in corpus {
        let (mut u, mut v) = (BOS, BOS);
        for &w in sentence.iter().chain(core::iter::once(&EOS)) {
            *unigrams.entry(w).or_insert(0) += 1;
            *bigrams.entry((v, w)).or_insert(0) += 1;
            *trigrams.entry((u, v, w)).or_insert(0) += 1;
            (u, v) = (v, w);
        }
    }
    TrigramModel::from_counts(vocab_size, lambdas, unigrams, bigrams, trigrams)
}

/// Log-probability of `tokens` (EOS appended) under `model`.
pub fn lm_logprob(model: &TrigramModel, tokens: &[u32]) -> f64 {
    model.sequence_log_prob(tokens)
}
