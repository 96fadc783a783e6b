//! Parallel corpora and padded mini-batches.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::audio::FeatureSequence;
use crate::error::{Error, Result};
use crate::text::{BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq)]
pub enum Source {
    Tokens(Vec<u32>),
    Features(FeatureSequence),
}

impl Source {
    pub fn len(&self) -> usize {
        match self {
            Source::Tokens(t) => t.len(),
            Source::Features(f) => f.frame_count(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub source: Source,
    pub target: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParallelCorpus {
    examples: Vec<Example>,
    references: Option<Vec<Vec<Vec<String>>>>,
}

impl ParallelCorpus {
    pub fn new(sources: Vec<Source>, targets: Vec<Vec<u32>>) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(Error::CountMismatch {
                what: "sources and targets",
                left: sources.len(),
                right: targets.len(),
            });
        }
        Ok(Self {
            examples: sources
                .into_iter()
                .zip(targets)
                .map(|(source, target)| Example { source, target })
                .collect(),
            references: None,
        })
    }

    pub fn from_examples(examples: Vec<Example>) -> Self {
        Self {
            examples,
            references: None,
        }
    }

    /// Attaches one nonempty reference set (tokenized sentences) per example.
    pub fn with_references(mut self, references: Vec<Vec<Vec<String>>>) -> Result<Self> {
        if references.len() != self.examples.len() {
            return Err(Error::CountMismatch {
                what: "examples and reference sets",
                left: self.examples.len(),
                right: references.len(),
            });
        }
        if let Some(i) = references.iter().position(Vec::is_empty) {
            return Err(Error::EmptyReferenceSet(i));
        }
        self.references = Some(references);
        Ok(self)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn references(&self) -> Option<&[Vec<Vec<String>>]> {
        self.references.as_deref()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SourceBlock {
    /// `[batch × max_len]` token ids, PAD-filled.
    Tokens(Vec<u32>),
    /// `[batch × max_len × dim]` features, zero-filled.
    Features { dim: usize, data: Vec<f64> },
}

/// Pads sources into one block; returns the block, per-row lengths and the padded length.
pub fn pad_sources(sources: &[&Source]) -> Result<(SourceBlock, Vec<usize>, usize)> {
    if sources.is_empty() {
        return Err(Error::EmptySequence);
    }
    let size = sources.len();
    let source_lengths: Vec<usize> = sources.iter().map(|s| s.len()).collect();
    let source_len = source_lengths.iter().copied().max().unwrap_or(0);
    let source = match sources[0] {
        Source::Tokens(_) => {
            let mut ids = vec![PAD; size * source_len];
            for (b, s) in sources.iter().enumerate() {
                let Source::Tokens(t) = s else {
                    return Err(Error::InvalidArgument {
                        op: "pad_sources",
                        reason: "mixed token and feature sources".into(),
                    });
                };
                ids[b * source_len..b * source_len + t.len()].copy_from_slice(t);
            }
            SourceBlock::Tokens(ids)
        }
        Source::Features(first) => {
            let dim = first.dim();
            let mut data = vec![0.0; size * source_len * dim];
            for (b, s) in sources.iter().enumerate() {
                let Source::Features(f) = s else {
                    return Err(Error::InvalidArgument {
                        op: "pad_sources",
                        reason: "mixed token and feature sources".into(),
                    });
                };
                if f.dim() != dim {
                    return Err(Error::CountMismatch {
                        what: "feature dimensions",
                        left: dim,
                        right: f.dim(),
                    });
                }
                let start = b * source_len * dim;
                data[start..start + f.data().len()].copy_from_slice(f.data());
            }
            SourceBlock::Features { dim, data }
        }
    };
    Ok((source, source_lengths, source_len))
}

/// A padded mini-batch. Target blocks are `[size × target_len]`: `target_in`
/// is BOS-prefixed, `target_out` is EOS-suffixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub source: SourceBlock,
    pub source_lengths: Vec<usize>,
    pub source_len: usize,
    pub target_in: Vec<u32>,
    pub target_out: Vec<u32>,
    pub target_mask: Vec<bool>,
    pub target_len: usize,
    /// Corpus positions of the rows.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[&Example], indices: Vec<usize>) -> Result<Self> {
        let size = examples.len();
        if size == 0 {
            return Err(Error::EmptySequence);
        }
        let sources: Vec<&Source> = examples.iter().map(|e| &e.source).collect();
        let (source, source_lengths, source_len) = pad_sources(&sources)?;
        let target_len = examples.iter().map(|e| e.target.len() + 1).max().unwrap_or(1);
        let mut target_in = vec![PAD; size * target_len];
        let mut target_out = vec![PAD; size * target_len];
        let mut target_mask = vec![false; size * target_len];
        for (b, e) in examples.iter().enumerate() {
            let row = b * target_len;
            target_in[row] = BOS;
            target_in[row + 1..row + 1 + e.target.len()].copy_from_slice(&e.target);
            target_out[row..row + e.target.len()].copy_from_slice(&e.target);
            target_out[row + e.target.len()] = EOS;
            target_mask[row..row + e.target.len() + 1].fill(true);
        }
        Ok(Self {
            size,
            source,
            source_lengths,
            source_len,
            target_in,
            target_out,
            target_mask,
            target_len,
            indices,
        })
    }

    pub fn target_tokens(&self) -> usize {
        self.target_mask.iter().filter(|&&m| m).count()
    }
}

/// Deterministically shuffles the corpus with `seed` and cuts it into batches,
/// each padded to its own longest source and target. The last batch may be short.
pub fn make_batches(corpus: &ParallelCorpus, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if corpus.is_empty() {
        return Err(Error::EmptySequence);
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument {
            op: "make_batches",
            reason: "batch size must be positive".into(),
        });
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let examples: Vec<&Example> = chunk.iter().map(|&i| &corpus.examples[i]).collect();
            Batch::from_examples(&examples, chunk.to_vec())
        })
        .collect()
}
