//! Decoding files with one or more checkpoints, and attention export.

use std::thread;

use anyhow::{bail, Context, Result};
use s2t_core::batch::{Batch, Example, Source};
use s2t_core::lm::TrigramModel;
use s2t_core::model::Model;
use s2t_core::search::{beam_search, default_max_len, greedy_decode, FusionWeights, SearchConfig};
use s2t_core::text::{Vocabulary, EOS, RESERVED};

use crate::checkpoint::Checkpoint;
use crate::data::SourceFile;

#[derive(Clone, Debug)]
pub struct DecodeOptions {
    pub beam_size: usize,
    pub lm: Option<TrigramModel>,
    pub lm_weight: f64,
    /// Overrides the per-source default length limit.
    pub max_len: Option<usize>,
    pub length_normalize: bool,
    pub rescore_only: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam_size: 1,
            lm: None,
            lm_weight: 0.0,
            max_len: None,
            length_normalize: false,
            rescore_only: false,
        }
    }
}

/// Checkpoints that decode together: same task, same inputs, same outputs.
pub struct Ensemble {
    pub models: Vec<Model>,
    pub first: Checkpoint,
}

impl Ensemble {
    pub fn new(checkpoints: Vec<Checkpoint>) -> Result<Self> {
        let Some(first) = checkpoints.first().cloned() else {
            bail!("at least one checkpoint is needed");
        };
        for (i, c) in checkpoints.iter().enumerate().skip(1) {
            if c.target_vocab != first.target_vocab {
                bail!("checkpoint {} has a different target vocabulary", i + 1);
            }
            if c.config.task != first.config.task {
                bail!("checkpoint {} is for a different task", i + 1);
            }
            if c.source_vocab != first.source_vocab || c.stats != first.stats {
                bail!("checkpoint {} reads its input differently", i + 1);
            }
        }
        let models = checkpoints
            .iter()
            .map(Checkpoint::model)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { models, first })
    }

    pub fn target_vocab(&self) -> &Vocabulary {
        &self.first.target_vocab
    }

    pub fn sources(&self, input: &SourceFile) -> Result<Vec<Source>> {
        self.first.expect_task(input.task())?;
        input.sources(self.first.source_vocab.as_ref(), self.first.stats.as_ref())
    }

    /// Decodes one source; empty sources give empty outputs.
    pub fn decode(&self, source: &Source, opts: &DecodeOptions) -> Result<Vec<u32>> {
        if source.is_empty() {
            return Ok(Vec::new());
        }
        let max_len = opts
            .max_len
            .unwrap_or_else(|| default_max_len(&self.models[0], source));
        let mut search = SearchConfig::new(opts.beam_size, max_len);
        search.length_normalize = opts.length_normalize;
        search.rescore_only = opts.rescore_only;
        let weights = FusionWeights::uniform(
            self.models.len(),
            if opts.lm.is_some() { opts.lm_weight } else { 0.0 },
        );
        Ok(beam_search(&self.models, source, opts.lm.as_ref(), &weights, &search)?.tokens)
    }

    /// Decodes every source, spreading contiguous chunks over the available cores.
    pub fn decode_all(&self, sources: &[Source], opts: &DecodeOptions) -> Result<Vec<String>> {
        if let Some(lm) = &opts.lm {
            if lm.vocab_size() != self.target_vocab().len() {
                bail!(
                    "language model covers {} ids, the target vocabulary has {}",
                    lm.vocab_size(),
                    self.target_vocab().len()
                );
            }
        }
        let workers = thread::available_parallelism()
            .map_or(1, |n| n.get())
            .min(sources.len())
            .max(1);
        let chunk = sources.len().div_ceil(workers).max(1);
        let results: Vec<Result<Vec<String>>> = thread::scope(|s| {
            let handles: Vec<_> = sources
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    s.spawn(move || {
                        part.iter()
                            .enumerate()
                            .map(|(i, src)| {
                                let ids = self
                                    .decode(src, opts)
                                    .with_context(|| format!("input {}", c * chunk + i + 1))?;
                                Ok(self.target_vocab().decode(&ids).join(" "))
                            })
                            .collect()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("decoder thread panicked"))
                .collect()
        });
        let mut out = Vec::with_capacity(sources.len());
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }
}

/// Attention weights of one item: row labels (output tokens, `</s>` last when
/// emitted), column labels and one row per output step.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub weights: Vec<Vec<f64>>,
}

impl AttentionDump {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("token");
        for c in &self.columns {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (label, row) in self.rows.iter().zip(&self.weights) {
            out.push_str(label);
            for w in row {
                out.push('\t');
                out.push_str(&w.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Teacher-forced on `reference` when given, greedy otherwise.
pub fn dump_attention(
    ckpt: &Checkpoint,
    input: &SourceFile,
    index: usize,
    reference: Option<&[String]>,
) -> Result<AttentionDump> {
    ckpt.expect_task(input.task())?;
    if index >= input.len() {
        bail!("item {index} is out of range: input has {} items", input.len());
    }
    let model = ckpt.model()?;
    let source = input
        .sources(ckpt.source_vocab.as_ref(), ckpt.stats.as_ref())?
        .swap_remove(index);
    if source.is_empty() {
        bail!("{} is empty", input.item_label(index));
    }
    let vocab = &ckpt.target_vocab;
    let eos = RESERVED[EOS as usize].to_string();
    let (rows, weights) = match reference {
        Some(tokens) => {
            let target = vocab.encode(tokens);
            let example = Example {
                source: source.clone(),
                target,
            };
            let batch = Batch::from_examples(&[&example], vec![0])?;
            let matrix = model.forced_attention(&batch)?.swap_remove(0);
            let weights: Vec<Vec<f64>> = (0..matrix.shape()[0]).map(|t| matrix.row(t).to_vec()).collect();
            let mut rows = tokens.to_vec();
            rows.push(eos);
            (rows, weights)
        }
        None => {
            let decoded = greedy_decode(&model, &source, default_max_len(&model, &source))?;
            let mut rows = vocab.decode(&decoded.tokens);
            if decoded.finished {
                rows.push(eos);
            }
            (rows, decoded.attention)
        }
    };
    let positions = weights.first().map_or(0, Vec::len);
    let columns = match input {
        SourceFile::Text(lines) => lines[index].clone(),
        SourceFile::Features(_) => {
            let stride = 1usize << model.config.encoder.subsample_layers.len();
            (0..positions).map(|j| (j * stride).to_string()).collect()
        }
    };
    Ok(AttentionDump {
        rows,
        columns,
        weights,
    })
}
