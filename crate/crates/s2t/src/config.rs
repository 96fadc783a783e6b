//! Run configuration as flat `key = value` text.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use s2t_core::attention::AttentionKind;
use s2t_core::encoder::{EncoderConfig, EncoderKind};
use s2t_core::model::ModelConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Text,
    Speech,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Text => "text",
            Task::Speech => "speech",
        }
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Task::Text),
            "speech" => Ok(Task::Speech),
            _ => Err(format!("unknown task `{s}` (expected text or speech)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionChoice {
    Additive,
    Convolutional,
}

impl AttentionChoice {
    pub fn name(self) -> &'static str {
        match self {
            AttentionChoice::Additive => "additive",
            AttentionChoice::Convolutional => "convolutional",
        }
    }
}

impl FromStr for AttentionChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "additive" => Ok(AttentionChoice::Additive),
            "convolutional" => Ok(AttentionChoice::Convolutional),
            _ => Err(format!(
                "unknown attention `{s}` (expected additive or convolutional)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub units: usize,
    pub embed_dim: usize,
    pub encoder_layers: usize,
    pub subsample_layers: Vec<usize>,
    pub prenet: Vec<usize>,
    pub decoder_layers: usize,
    pub attention: AttentionChoice,
    pub filter_len: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub steps: u64,
    pub save_every: u64,
    pub seed: u64,
    pub max_source_vocab: Option<usize>,
    pub max_target_vocab: Option<usize>,
    /// Stop once greedy dev BLEU reaches this value.
    pub target_dev_bleu: Option<f64>,
    pub train_source: Option<PathBuf>,
    pub train_target: Option<PathBuf>,
    pub dev_source: Option<PathBuf>,
    pub dev_target: Option<PathBuf>,
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn for_task(task: Task) -> Self {
        let speech = task == Task::Speech;
        Self {
            task,
            units: 256,
            embed_dim: 256,
            encoder_layers: if speech { 3 } else { 2 },
            subsample_layers: if speech { vec![1, 2] } else { Vec::new() },
            prenet: if speech { vec![256, 256] } else { Vec::new() },
            decoder_layers: 2,
            attention: if speech {
                AttentionChoice::Convolutional
            } else {
                AttentionChoice::Additive
            },
            filter_len: 25,
            learning_rate: 0.001,
            batch_size: 64,
            dropout: 0.5,
            steps: 20000,
            save_every: 1000,
            seed: 1,
            max_source_vocab: None,
            max_target_vocab: None,
            target_dev_bleu: None,
            train_source: None,
            train_target: None,
            dev_source: None,
            dev_target: None,
            output_dir: PathBuf::from("run"),
        }
    }

    /// Applies `pairs` in order on top of the defaults of the last `task` given.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, String> {
        let task = match pairs.iter().rev().find(|(k, _)| k == "task") {
            Some((_, v)) => v.parse()?,
            None => Task::Text,
        };
        let mut cfg = Self::for_task(task);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |e: &dyn std::fmt::Display| format!("{key}: {e}");
        match key {
            "task" => {
                let task: Task = value.parse()?;
                if task != self.task {
                    return Err("task must be set before other keys".into());
                }
            }
            "units" => self.units = num(value).map_err(|e| bad(&e))?,
            "embed_dim" => self.embed_dim = num(value).map_err(|e| bad(&e))?,
            "encoder_layers" => self.encoder_layers = num(value).map_err(|e| bad(&e))?,
            "subsample_layers" => self.subsample_layers = list(value).map_err(|e| bad(&e))?,
            "prenet" => self.prenet = list(value).map_err(|e| bad(&e))?,
            "decoder_layers" => self.decoder_layers = num(value).map_err(|e| bad(&e))?,
            "attention" => self.attention = value.parse()?,
            "filter_len" => self.filter_len = num(value).map_err(|e| bad(&e))?,
            "learning_rate" => self.learning_rate = num(value).map_err(|e| bad(&e))?,
            "batch_size" => self.batch_size = num(value).map_err(|e| bad(&e))?,
            "dropout" => self.dropout = num(value).map_err(|e| bad(&e))?,
            "steps" => self.steps = num(value).map_err(|e| bad(&e))?,
            "save_every" => self.save_every = num(value).map_err(|e| bad(&e))?,
            "seed" => self.seed = num(value).map_err(|e| bad(&e))?,
            "max_source_vocab" => self.max_source_vocab = optional(value).map_err(|e| bad(&e))?,
            "max_target_vocab" => self.max_target_vocab = optional(value).map_err(|e| bad(&e))?,
            "target_dev_bleu" => self.target_dev_bleu = optional(value).map_err(|e| bad(&e))?,
            "train_source" => self.train_source = path(value),
            "train_target" => self.train_target = path(value),
            "dev_source" => self.dev_source = path(value),
            "dev_target" => self.dev_target = path(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => return Err(format!("unknown configuration key `{key}`")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        let sizes = [
            ("units", self.units),
            ("embed_dim", self.embed_dim),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("batch_size", self.batch_size),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{name} must be positive"));
        }
        if self.prenet.contains(&0) {
            return Err("prenet sizes must be positive".into());
        }
        if self.subsample_layers.iter().any(|&l| l >= self.encoder_layers) {
            return Err("subsample_layers must index encoder layers".into());
        }
        if self.attention == AttentionChoice::Convolutional && self.filter_len % 2 == 0 {
            return Err("filter_len must be odd".into());
        }
        if !(self.learning_rate > 0.0) {
            return Err("learning_rate must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must be in [0, 1)".into());
        }
        if self.save_every == 0 {
            return Err("save_every must be positive".into());
        }
        Ok(())
    }

    pub fn attention_kind(&self) -> AttentionKind {
        match self.attention {
            AttentionChoice::Additive => AttentionKind::Additive,
            AttentionChoice::Convolutional => AttentionKind::Convolutional {
                filter_len: self.filter_len,
            },
        }
    }

    /// `source_dim` is the source vocabulary size for text and the feature dimension for speech.
    pub fn model_config(&self, source_dim: usize, target_vocab: usize) -> ModelConfig {
        let (kind, input_dim, source_vocab) = match self.task {
            Task::Text => (EncoderKind::Text, self.embed_dim, source_dim),
            Task::Speech => (EncoderKind::Speech, source_dim, 0),
        };
        ModelConfig {
            encoder: EncoderConfig {
                kind,
                layer_count: self.encoder_layers,
                units: self.units,
                subsample_layers: self.subsample_layers.clone(),
                prenet_sizes: self.prenet.clone(),
                input_dim,
            },
            attention: self.attention_kind(),
            source_vocab,
            target_vocab,
            embed_dim: self.embed_dim,
            units: self.units,
            decoder_layers: self.decoder_layers,
            dropout: self.dropout,
        }
    }

    /// Every key, one per line; unset optional keys are omitted.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        let join = |v: &[usize]| {
            if v.is_empty() {
                "none".to_string()
            } else {
                v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
            }
        };
        line("task", self.task.name().into());
        line("units", self.units.to_string());
        line("embed_dim", self.embed_dim.to_string());
        line("encoder_layers", self.encoder_layers.to_string());
        line("subsample_layers", join(&self.subsample_layers));
        line("prenet", join(&self.prenet));
        line("decoder_layers", self.decoder_layers.to_string());
        line("attention", self.attention.name().into());
        line("filter_len", self.filter_len.to_string());
        line("learning_rate", self.learning_rate.to_string());
        line("batch_size", self.batch_size.to_string());
        line("dropout", self.dropout.to_string());
        line("steps", self.steps.to_string());
        line("save_every", self.save_every.to_string());
        line("seed", self.seed.to_string());
        if let Some(v) = self.max_source_vocab {
            line("max_source_vocab", v.to_string());
        }
        if let Some(v) = self.max_target_vocab {
            line("max_target_vocab", v.to_string());
        }
        if let Some(v) = self.target_dev_bleu {
            line("target_dev_bleu", v.to_string());
        }
        for (k, p) in [
            ("train_source", &self.train_source),
            ("train_target", &self.train_target),
            ("dev_source", &self.dev_source),
            ("dev_target", &self.dev_target),
        ] {
            if let Some(p) = p {
                line(k, p.display().to_string());
            }
        }
        line("output_dir", self.output_dir.display().to_string());
        out
    }
}

/// Splits `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses a `key=value` override as given on the command line.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("`{s}` is not key=value"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn num<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| format!("`{v}`: {e}"))
}

fn list(v: &str) -> Result<Vec<usize>, String> {
    if v.is_empty() || v == "none" {
        return Ok(Vec::new());
    }
    v.split(',').map(|x| num(x.trim())).collect()
}

fn optional<T: FromStr>(v: &str) -> Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if v.is_empty() || v == "none" {
        Ok(None)
    } else {
        num(v).map(Some)
    }
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}
