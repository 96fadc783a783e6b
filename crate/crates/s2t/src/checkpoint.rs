//! Checkpoint files: `S2TCKPT1`, version, value width, the run configuration as
//! `key = value` text, vocabularies or feature statistics, training counters,
//! then named parameter records with their Adam moments.

use std::fs;
use std::path::Path;

use s2t_core::audio::FeatureStats;
use s2t_core::model::{Model, ModelConfig};
use s2t_core::optim::{AdamConfig, ParamSlot, ParameterStore};
use s2t_core::text::Vocabulary;
use s2t_core::Tensor;

use crate::binio::{Reader, Writer};
use crate::config::{RunConfig, Task};
use crate::error::FormatError;

pub const MAGIC: &[u8; 8] = b"S2TCKPT1";
pub const VERSION: u32 = 1;

/// Width of stored parameter values. 64-bit keeps resumed training bit-exact.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl Precision {
    fn code(self) -> u8 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Result<Self, FormatError> {
        match code {
            4 => Ok(Precision::F32),
            8 => Ok(Precision::F64),
            _ => Err(FormatError::UnsupportedEncoding(format!("value width {code}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Present for the text task.
    pub source_vocab: Option<Vocabulary>,
    pub target_vocab: Vocabulary,
    /// Present for the speech task.
    pub stats: Option<FeatureStats>,
    /// Parameters, moments, Adam constants and the step counter.
    pub params: ParameterStore,
    pub best_dev_bleu: Option<f64>,
    pub precision: Precision,
}

impl Checkpoint {
    pub fn step(&self) -> u64 {
        self.params.step()
    }

    pub fn model_config(&self) -> Result<ModelConfig, FormatError> {
        let source_dim = match (self.config.task, &self.source_vocab, &self.stats) {
            (Task::Text, Some(v), None) => v.len(),
            (Task::Speech, None, Some(s)) => s.dim(),
            _ => {
                return Err(FormatError::ArchitectureMismatch(format!(
                    "{} checkpoint has the wrong source description",
                    self.config.task.name()
                )))
            }
        };
        Ok(self.config.model_config(source_dim, self.target_vocab.len()))
    }

    pub fn model(&self) -> Result<Model, FormatError> {
        Ok(Model::new(self.model_config()?, self.params.clone())?)
    }

    /// Errors unless the checkpoint was trained for `task`.
    pub fn expect_task(&self, task: Task) -> Result<(), FormatError> {
        if self.config.task != task {
            return Err(FormatError::ArchitectureMismatch(format!(
                "checkpoint is for the {} task, input is {}",
                self.config.task.name(),
                task.name()
            )));
        }
        Ok(())
    }

    /// Checks that the parameters are exactly those of the stored configuration.
    pub fn validate(&self) -> Result<(), FormatError> {
        let cfg = self.model_config()?;
        cfg.validate()?;
        cfg.check_parameters(&self.params)
            .map_err(|e| FormatError::ArchitectureMismatch(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u8(self.precision.code());
        w.string(&self.config.to_text());
        write_vocab(&mut w, self.source_vocab.as_ref());
        write_vocab(&mut w, Some(&self.target_vocab));
        match &self.stats {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u32(s.dim() as u32);
                s.mean.iter().chain(&s.std).for_each(|&v| w.f64(v));
            }
        }
        w.u64(self.params.step());
        match self.best_dev_bleu {
            None => w.u8(0),
            Some(b) => {
                w.u8(1);
                w.f64(b);
            }
        }
        let adam = self.params.adam;
        w.f64(adam.beta1);
        w.f64(adam.beta2);
        w.f64(adam.epsilon);
        w.u32(self.params.len() as u32);
        for (name, slot) in self.params.iter() {
            w.string(name);
            w.u32(slot.value.shape().len() as u32);
            slot.value.shape().iter().for_each(|&d| w.u32(d as u32));
            for t in [&slot.value, &slot.first_moment, &slot.second_moment] {
                for &v in t.data() {
                    match self.precision {
                        Precision::F32 => w.f32(v as f32),
                        Precision::F64 => w.f64(v),
                    }
                }
            }
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = Reader::new(bytes);
        if r.bytes(MAGIC.len(), "checkpoint header")? != MAGIC {
            return Err(FormatError::BadMagic { expected: "S2TCKPT1" });
        }
        let version = r.u32("format version")?;
        if version != VERSION {
            return Err(FormatError::UnsupportedVersion(version));
        }
        let precision = Precision::from_code(r.u8("value width")?)?;
        let config = RunConfig::parse(&r.string("configuration")?).map_err(FormatError::Malformed)?;
        let source_vocab = read_vocab(&mut r)?;
        let target_vocab =
            read_vocab(&mut r)?.ok_or_else(|| FormatError::Malformed("missing target vocabulary".into()))?;
        let stats = match r.u8("statistics flag")? {
            0 => None,
            1 => {
                let dim = r.u32("statistics dimension")? as usize;
                let mean = (0..dim).map(|_| r.f64("statistics")).collect::<Result<_, _>>()?;
                let std = (0..dim).map(|_| r.f64("statistics")).collect::<Result<_, _>>()?;
                Some(FeatureStats { mean, std })
            }
            f => return Err(FormatError::Malformed(format!("statistics flag {f}"))),
        };
        let step = r.u64("step counter")?;
        let best_dev_bleu = match r.u8("score flag")? {
            0 => None,
            1 => Some(r.f64("best score")?),
            f => return Err(FormatError::Malformed(format!("score flag {f}"))),
        };
        let mut params = ParameterStore::new();
        params.adam = AdamConfig {
            beta1: r.f64("optimizer constants")?,
            beta2: r.f64("optimizer constants")?,
            epsilon: r.f64("optimizer constants")?,
        };
        params.set_step(step);
        let count = r.u32("parameter count")?;
        for _ in 0..count {
            let name = r.string("parameter name")?;
            let rank = r.u32("parameter rank")? as usize;
            let shape = (0..rank)
                .map(|_| r.u32("parameter shape").map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let len =
                len.ok_or_else(|| FormatError::Malformed(format!("parameter `{name}` is too large")))?;
            let mut tensor = || -> Result<Tensor, FormatError> {
                let data = (0..len)
                    .map(|_| match precision {
                        Precision::F32 => r.f32("parameter values").map(f64::from),
                        Precision::F64 => r.f64("parameter values"),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Tensor::new(&shape, data)?)
            };
            let slot = ParamSlot {
                value: tensor()?,
                first_moment: tensor()?,
                second_moment: tensor()?,
            };
            if params.slot(&name).is_some() {
                return Err(FormatError::Malformed(format!(
                    "parameter `{name}` appears twice"
                )));
            }
            params.insert_slot(&name, slot)?;
        }
        if !r.is_empty() {
            return Err(FormatError::Malformed("trailing bytes after parameters".into()));
        }
        let ckpt = Self {
            config,
            source_vocab,
            target_vocab,
            stats,
            params,
            best_dev_bleu,
            precision,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), FormatError> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, FormatError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn write_vocab(w: &mut Writer, vocab: Option<&Vocabulary>) {
    match vocab {
        None => w.u8(0),
        Some(v) => {
            w.u8(1);
            w.u32(v.entries().len() as u32);
            v.entries().iter().for_each(|t| w.string(t));
        }
    }
}

fn read_vocab(r: &mut Reader) -> Result<Option<Vocabulary>, FormatError> {
    match r.u8("vocabulary flag")? {
        0 => Ok(None),
        1 => {
            let n = r.u32("vocabulary size")?;
            let tokens = (0..n)
                .map(|_| r.string("vocabulary entry"))
                .collect::<Result<Vec<_>, _>>()?;
            let vocab = Vocabulary::from_tokens(&tokens);
            if vocab.entries().len() != tokens.len() {
                return Err(FormatError::Malformed(
                    "vocabulary has duplicate or reserved entries".into(),
                ));
            }
            Ok(Some(vocab))
        }
        f => Err(FormatError::Malformed(format!("vocabulary flag {f}"))),
    }
}
