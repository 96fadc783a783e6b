//! The training loop: batches per epoch, per-step dropout seeds, periodic dev
//! evaluation and checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use s2t_core::batch::{make_batches, Batch, ParallelCorpus, Source};
use s2t_core::bleu::bleu_multi_reference;
use s2t_core::model::{step_seed, Model};
use s2t_core::search::{default_max_len, greedy_batch};
use s2t_core::text::Vocabulary;

use crate::checkpoint::{Checkpoint, Precision};
use crate::config::RunConfig;
use crate::data::{load_training_data, TrainingData};

const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;

#[derive(Clone, Debug, PartialEq)]
pub struct DevScores {
    pub loss: f64,
    pub bleu: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOutcome {
    /// Training loss of every step run, in order.
    pub losses: Vec<(u64, f64)>,
    pub last_step: u64,
    pub best_dev_bleu: Option<f64>,
    pub reached_target: bool,
}

pub struct Trainer {
    pub config: RunConfig,
    pub data: TrainingData,
    pub model: Model,
    pub best_dev_bleu: Option<f64>,
    pub precision: Precision,
    epoch: Option<(u64, Vec<Batch>)>,
}

impl Trainer {
    /// Reads the corpora named in `config` and initializes a fresh model.
    pub fn new(config: RunConfig) -> Result<Self> {
        let data = load_training_data(&config, None)?;
        let model_config = config.model_config(data.source_dim(), data.target_vocab.len());
        let model = Model::init(model_config, config.seed).context("initializing the model")?;
        Ok(Self::assemble(config, data, model, None))
    }

    /// Continues from `ckpt`, reading corpora with its vocabularies. Only
    /// non-architectural settings of `config` may differ from the checkpoint's.
    pub fn resume(ckpt: Checkpoint, config: RunConfig) -> Result<Self> {
        let known = (
            ckpt.source_vocab.clone(),
            ckpt.target_vocab.clone(),
            ckpt.stats.clone(),
        );
        let data = load_training_data(&config, Some(known))?;
        let model_config = config.model_config(data.source_dim(), data.target_vocab.len());
        model_config
            .check_parameters(&ckpt.params)
            .context("configuration does not match the checkpoint")?;
        let model = Model::new(model_config, ckpt.params)?;
        let mut t = Self::assemble(config, data, model, ckpt.best_dev_bleu);
        t.precision = ckpt.precision;
        Ok(t)
    }

    fn assemble(config: RunConfig, data: TrainingData, model: Model, best: Option<f64>) -> Self {
        Self {
            config,
            data,
            model,
            best_dev_bleu: best,
            precision: Precision::default(),
            epoch: None,
        }
    }

    pub fn step(&self) -> u64 {
        self.model.params.step()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            source_vocab: self.data.source_vocab.clone(),
            target_vocab: self.data.target_vocab.clone(),
            stats: self.data.stats.clone(),
            params: self.model.params.clone(),
            best_dev_bleu: self.best_dev_bleu,
            precision: self.precision,
        }
    }

    /// Runs the next training step and returns its loss. Step `s` (1-based)
    /// uses batch `(s-1) mod n` of epoch `(s-1) div n`, so resumed runs see
    /// the same batches and dropout masks.
    pub fn train_step(&mut self) -> Result<f64> {
        let step = self.step() + 1;
        let per_epoch = self.data.train.len().div_ceil(self.config.batch_size) as u64;
        let epoch = (step - 1) / per_epoch;
        if self.epoch.as_ref().map(|e| e.0) != Some(epoch) {
            let seed = step_seed(self.config.seed ^ SHUFFLE_SALT, epoch);
            let batches = make_batches(&self.data.train, self.config.batch_size, seed)?;
            self.epoch = Some((epoch, batches));
        }
        let batch = &self.epoch.as_ref().expect("epoch loaded").1[((step - 1) % per_epoch) as usize];
        let loss = self.model.train_step(
            batch,
            self.config.learning_rate,
            step_seed(self.config.seed, step),
        )?;
        Ok(loss)
    }

    pub fn evaluate_dev(&self) -> Result<Option<DevScores>> {
        let Some(dev) = &self.data.dev else {
            return Ok(None);
        };
        Ok(Some(DevScores {
            loss: corpus_loss(&self.model, dev, self.config.batch_size)?,
            bleu: greedy_bleu(&self.model, dev, &self.data.target_vocab, self.config.batch_size)?,
        }))
    }

    fn save(&self, dir: &Path, name: &str) -> Result<PathBuf> {
        let path = dir.join(name);
        self.checkpoint()
            .save(&path)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Trains up to the configured step count, logging
    /// `step<TAB>trainLoss<TAB>devLoss<TAB>devBLEU` per step (`-` when no dev
    /// evaluation ran). Checkpoints go to `step-N.ckpt`, `last.ckpt` and
    /// `best.ckpt` in the output directory.
    pub fn run(&mut self, log: &mut dyn Write) -> Result<TrainOutcome> {
        let dir = self.config.output_dir.clone();
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut outcome = TrainOutcome {
            best_dev_bleu: self.best_dev_bleu,
            last_step: self.step(),
            ..Default::default()
        };
        while self.step() < self.config.steps {
            let loss = self.train_step()?;
            let step = self.step();
            outcome.losses.push((step, loss));
            outcome.last_step = step;
            let checkpoint_due = step % self.config.save_every == 0 || step == self.config.steps;
            if !checkpoint_due {
                writeln!(log, "{step}\t{loss}\t-\t-")?;
                continue;
            }
            let dev = self.evaluate_dev()?;
            let improved = match &dev {
                Some(d) => {
                    writeln!(log, "{step}\t{loss}\t{}\t{:.2}", d.loss, d.bleu)?;
                    let better = self.best_dev_bleu.is_none_or(|b| d.bleu > b);
                    if better {
                        self.best_dev_bleu = Some(d.bleu);
                    }
                    better
                }
                None => {
                    writeln!(log, "{step}\t{loss}\t-\t-")?;
                    false
                }
            };
            self.save(&dir, &format!("step-{step}.ckpt"))?;
            self.save(&dir, "last.ckpt")?;
            if improved {
                self.save(&dir, "best.ckpt")?;
            }
            outcome.best_dev_bleu = self.best_dev_bleu;
            if let (Some(target), Some(d)) = (self.config.target_dev_bleu, &dev) {
                if d.bleu >= target {
                    outcome.reached_target = true;
                    break;
                }
            }
        }
        log.flush()?;
        Ok(outcome)
    }
}

/// Token-weighted mean loss over `corpus` without dropout.
pub fn corpus_loss(model: &Model, corpus: &ParallelCorpus, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for batch in make_batches(corpus, batch_size, 0)? {
        let n = batch.target_tokens();
        total += model.loss(&batch)? * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        bail!("corpus has no target tokens");
    }
    Ok(total / tokens as f64)
}

/// Greedy decodes of every source, in corpus order.
pub fn greedy_outputs(model: &Model, sources: &[&Source], batch_size: usize) -> Result<Vec<Vec<u32>>> {
    let mut out = Vec::with_capacity(sources.len());
    for chunk in sources.chunks(batch_size.max(1)) {
        let limits: Vec<usize> = chunk.iter().map(|s| default_max_len(model, s)).collect();
        out.extend(greedy_batch(model, chunk, &limits)?);
    }
    Ok(out)
}

/// Corpus BLEU of greedy outputs against the corpus references (or targets).
pub fn greedy_bleu(
    model: &Model,
    corpus: &ParallelCorpus,
    vocab: &Vocabulary,
    batch_size: usize,
) -> Result<f64> {
    let sources: Vec<&Source> = corpus.examples().iter().map(|e| &e.source).collect();
    let hyps: Vec<Vec<String>> = greedy_outputs(model, &sources, batch_size)?
        .iter()
        .map(|ids| vocab.decode(ids))
        .collect();
    let refs: Vec<Vec<Vec<String>>> = match corpus.references() {
        Some(r) => r.to_vec(),
        None => corpus
            .examples()
            .iter()
            .map(|e| vec![vocab.decode(&e.target)])
            .collect(),
    };
    Ok(bleu_multi_reference(&hyps, &refs, 4)?.score)
}
