//! Loading corpora, feature archives and vocabularies for training and decoding.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use s2t_core::audio::{normalize_features, FeatureSequence, FeatureStats};
use s2t_core::batch::{ParallelCorpus, Source};
use s2t_core::text::{tokenize, Vocabulary};

use crate::config::{RunConfig, Task};
use crate::features::{decode_archive, is_archive};

/// One sentence per line; a trailing newline does not add an empty line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

pub fn read_tokenized(path: &Path) -> Result<Vec<Vec<String>>> {
    Ok(read_lines(path)?.iter().map(|l| tokenize(l)).collect())
}

/// Decoder input: tokenized sentences or a feature archive, told apart by the archive magic.
#[derive(Clone, Debug)]
pub enum SourceFile {
    Text(Vec<Vec<String>>),
    Features(Vec<(String, FeatureSequence)>),
}

impl SourceFile {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        if is_archive(&bytes) {
            let (_, records) =
                decode_archive(&bytes).with_context(|| format!("reading {}", path.display()))?;
            return Ok(SourceFile::Features(records));
        }
        let text = String::from_utf8(bytes)
            .with_context(|| format!("{} is neither text nor a feature archive", path.display()))?;
        Ok(SourceFile::Text(text.lines().map(tokenize).collect()))
    }

    pub fn task(&self) -> Task {
        match self {
            SourceFile::Text(_) => Task::Text,
            SourceFile::Features(_) => Task::Speech,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            SourceFile::Text(t) => t.len(),
            SourceFile::Features(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Column labels for attention dumps of item `index`.
    pub fn item_label(&self, index: usize) -> String {
        match self {
            SourceFile::Text(_) => format!("line {}", index + 1),
            SourceFile::Features(f) => f[index].0.clone(),
        }
    }

    /// Model inputs: ids under `vocab` for text, normalized frames for features.
    pub fn sources(&self, vocab: Option<&Vocabulary>, stats: Option<&FeatureStats>) -> Result<Vec<Source>> {
        match (self, vocab, stats) {
            (SourceFile::Text(lines), Some(v), _) => {
                Ok(lines.iter().map(|l| Source::Tokens(v.encode(l))).collect())
            }
            (SourceFile::Features(records), _, Some(s)) => records
                .iter()
                .map(|(id, f)| {
                    normalize_features(f, s)
                        .map(Source::Features)
                        .with_context(|| format!("record `{id}`"))
                })
                .collect(),
            _ => bail!("input kind does not match the model"),
        }
    }
}

/// Vocabularies or statistics plus the encoded training and dev corpora.
#[derive(Clone, Debug)]
pub struct TrainingData {
    pub source_vocab: Option<Vocabulary>,
    pub target_vocab: Vocabulary,
    pub stats: Option<FeatureStats>,
    pub train: ParallelCorpus,
    /// Dev corpus with its tokenized targets as references.
    pub dev: Option<ParallelCorpus>,
}

impl TrainingData {
    pub fn source_dim(&self) -> usize {
        match (&self.source_vocab, &self.stats) {
            (Some(v), _) => v.len(),
            (None, Some(s)) => s.dim(),
            (None, None) => 0,
        }
    }
}

fn required<'a>(path: &'a Option<std::path::PathBuf>, key: &str) -> Result<&'a Path> {
    path.as_deref()
        .with_context(|| format!("configuration key `{key}` is not set"))
}

fn read_source_file(path: &Path, task: Task) -> Result<SourceFile> {
    let file = SourceFile::read(path)?;
    if file.task() != task {
        bail!("{} does not hold {} input", path.display(), task.name());
    }
    Ok(file)
}

fn corpus(
    sources: Vec<Source>,
    targets: &[Vec<String>],
    vocab: &Vocabulary,
    what: &str,
) -> Result<ParallelCorpus> {
    let ids = targets.iter().map(|t| vocab.encode(t)).collect();
    ParallelCorpus::new(sources, ids).with_context(|| format!("{what} source and target counts differ"))
}

/// Builds vocabularies (or statistics) from the training files unless given.
pub fn load_training_data(
    cfg: &RunConfig,
    known: Option<(Option<Vocabulary>, Vocabulary, Option<FeatureStats>)>,
) -> Result<TrainingData> {
    let train_src = read_source_file(required(&cfg.train_source, "train_source")?, cfg.task)?;
    let train_tgt = read_tokenized(required(&cfg.train_target, "train_target")?)?;
    if train_src.is_empty() {
        bail!("training corpus is empty");
    }
    let (source_vocab, target_vocab, stats) = match known {
        Some(k) => k,
        None => {
            let target_vocab = Vocabulary::build(&train_tgt, cfg.max_target_vocab);
            match &train_src {
                SourceFile::Text(lines) => (
                    Some(Vocabulary::build(lines, cfg.max_source_vocab)),
                    target_vocab,
                    None,
                ),
                SourceFile::Features(records) => {
                    let stats = FeatureStats::compute(records.iter().map(|(_, f)| f))
                        .context("feature statistics")?;
                    (None, target_vocab, Some(stats))
                }
            }
        }
    };
    let train = corpus(
        train_src.sources(source_vocab.as_ref(), stats.as_ref())?,
        &train_tgt,
        &target_vocab,
        "training",
    )?;
    let dev = match (&cfg.dev_source, &cfg.dev_target) {
        (Some(s), Some(t)) => {
            let src = read_source_file(s, cfg.task)?;
            let tgt = read_tokenized(t)?;
            let dev = corpus(
                src.sources(source_vocab.as_ref(), stats.as_ref())?,
                &tgt,
                &target_vocab,
                "dev",
            )?;
            Some(dev.with_references(tgt.into_iter().map(|t| vec![t]).collect())?)
        }
        (None, None) => None,
        _ => bail!("dev_source and dev_target must be set together"),
    };
    Ok(TrainingData {
        source_vocab,
        target_vocab,
        stats,
        train,
        dev: dev.filter(|d| !d.is_empty()),
    })
}
