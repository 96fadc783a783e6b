//! Additive and convolutional (location-aware) attention over encoder outputs.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::encoder::Bound;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Additive,
    /// Scores also see the previous weights convolved with a learned filter.
    Convolutional {
        filter_len: usize,
    },
}

impl AttentionKind {
    pub fn parameter_shapes(&self, units: usize) -> Vec<(String, Vec<usize>)> {
        let m = units;
        let mut shapes = vec![
            ("att.w1".into(), vec![m, m]),
            ("att.w2".into(), vec![m, 2 * m]),
            ("att.b2".into(), vec![m]),
            ("att.v".into(), vec![m]),
        ];
        if let AttentionKind::Convolutional { filter_len } = *self {
            shapes.push(("att.mu".into(), vec![m]));
            shapes.push(("att.filter".into(), vec![filter_len]));
        }
        shapes
    }
}

/// Encoder outputs prepared for repeated attention queries.
#[derive(Clone, Debug)]
pub struct Memory {
    /// `[B, A, m]`
    pub values: NodeId,
    /// `W₁·h`, `[B, A, m]`
    pub keys: NodeId,
    /// `[B·A]`, true on real positions.
    pub mask: Vec<bool>,
    pub batch: usize,
    pub positions: usize,
    pub units: usize,
}

pub fn position_mask(lengths: &[usize], positions: usize) -> Vec<bool> {
    lengths
        .iter()
        .flat_map(|&l| (0..positions).map(move |i| i < l))
        .collect()
}

/// Projects `values` (`[B, A, m]`) through `att.w1`.
pub fn prepare_memory(tape: &mut Tape, params: &Bound, values: NodeId, lengths: &[usize]) -> Result<Memory> {
    let shape = tape.value(values).shape().to_vec();
    if shape.len() != 3 || shape[0] != lengths.len() || shape[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "prepare_memory",
            lhs: shape,
            rhs: vec![lengths.len()],
        });
    }
    let (b, a, m) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(values, &[b * a, m])?;
    let keys = tape.matmul_t(flat, params.get("att.w1")?)?;
    let keys = tape.reshape(keys, &[b, a, m])?;
    Ok(Memory {
        values,
        keys,
        mask: position_mask(lengths, a),
        batch: b,
        positions: a,
        units: m,
    })
}

/// Unnormalized scores `[B, A]` for decoder states `state` (`[B, 2m]`).
/// `previous` holds the last step's weights for the convolutional kind; `None`
/// means the first step, where the location term vanishes.
pub fn scores(
    tape: &mut Tape,
    params: &Bound,
    kind: AttentionKind,
    memory: &Memory,
    state: NodeId,
    previous: Option<NodeId>,
) -> Result<NodeId> {
    let (b, a, m) = (memory.batch, memory.positions, memory.units);
    let q = tape.matmul_t(state, params.get("att.w2")?)?;
    let q = tape.add(q, params.get("att.b2")?)?;
    let q = tape.reshape(q, &[b, 1, m])?;
    let mut z = tape.add(memory.keys, q)?;
    if let (AttentionKind::Convolutional { .. }, Some(prev)) = (kind, previous) {
        let f = tape.conv_same(prev, params.get("att.filter")?)?;
        let f = tape.reshape(f, &[b * a, 1])?;
        let mu = tape.reshape(params.get("att.mu")?, &[1, m])?;
        let loc = tape.matmul(f, mu)?;
        let loc = tape.reshape(loc, &[b, a, m])?;
        z = tape.add(z, loc)?;
    }
    let z = tape.tanh(z)?;
    let z = tape.reshape(z, &[b * a, m])?;
    let v = tape.reshape(params.get("att.v")?, &[1, m])?;
    let u = tape.matmul_t(z, v)?;
    tape.reshape(u, &[b, a])
}

/// Masked softmax over positions and the resulting context vectors:
/// returns `(weights [B, A], context [B, m])`.
pub fn attend(tape: &mut Tape, scores: NodeId, memory: &Memory) -> Result<(NodeId, NodeId)> {
    let weights = tape.masked_softmax(scores, memory.mask.clone())?;
    let context = tape.weighted_sum(weights, memory.values)?;
    Ok((weights, context))
}

/// Concrete attention weights for single-sequence evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub w1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub v: Tensor,
    /// Location projection and filter; present only for the convolutional kind.
    pub location: Option<(Tensor, Tensor)>,
}

impl AttentionParams {
    pub fn kind(&self) -> AttentionKind {
        match &self.location {
            None => AttentionKind::Additive,
            Some((_, f)) => AttentionKind::Convolutional { filter_len: f.len() },
        }
    }

    pub fn units(&self) -> usize {
        self.v.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.units();
        for (name, shape) in self.kind().parameter_shapes(m) {
            let t = self.tensor(&name).expect("listed names exist");
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "attention_params",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if let AttentionKind::Convolutional { filter_len } = self.kind() {
            if filter_len % 2 == 0 {
                return Err(Error::InvalidConfig("attention filter length must be odd".into()));
            }
        }
        Ok(())
    }

    fn tensor(&self, name: &str) -> Option<&Tensor> {
        match name {
            "att.w1" => Some(&self.w1),
            "att.w2" => Some(&self.w2),
            "att.b2" => Some(&self.b2),
            "att.v" => Some(&self.v),
            "att.mu" => self.location.as_ref().map(|l| &l.0),
            "att.filter" => self.location.as_ref().map(|l| &l.1),
            _ => None,
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BTreeMap<String, NodeId> {
        self.kind()
            .parameter_shapes(self.units())
            .into_iter()
            .map(|(name, _)| {
                let t = self.tensor(&name).expect("listed names exist").clone();
                let id = tape.parameter(&name, t);
                (name, id)
            })
            .collect()
    }
}

fn single_memory(tape: &mut Tape, params: &Bound, h: &[Vec<f64>]) -> Result<Memory> {
    let m = h.first().ok_or(Error::EmptySequence)?.len();
    let values = Tensor::from_rows(h)?.reshape(&[1, h.len(), m])?;
    let values = tape.constant(values);
    prepare_memory(tape, params, values, &[h.len()])
}

fn single_scores(
    params: &AttentionParams,
    h: &[Vec<f64>],
    s: &[f64],
    previous: Option<&[f64]>,
) -> Result<Vec<f64>> {
    params.validate()?;
    let m = params.units();
    if h.iter().any(|row| row.len() != m) || s.len() != 2 * m {
        return Err(Error::ShapeMismatch {
            op: "attention_scores",
            lhs: vec![m, 2 * m],
            rhs: vec![h.first().map_or(0, Vec::len), s.len()],
        });
    }
    if previous.is_some_and(|p| p.len() != h.len()) {
        return Err(Error::CountMismatch {
            what: "previous weights and positions",
            left: previous.map_or(0, <[f64]>::len),
            right: h.len(),
        });
    }
    let mut tape = Tape::new();
    let bound = Bound::new(params.bind(&mut tape));
    let memory = single_memory(&mut tape, &bound, h)?;
    let state = tape.constant(Tensor::new(&[1, 2 * m], s.to_vec())?);
    let prev = match previous {
        Some(p) => Some(tape.constant(Tensor::new(&[1, p.len()], p.to_vec())?)),
        None => None,
    };
    let u = scores(&mut tape, &bound, params.kind(), &memory, state, prev)?;
    Ok(tape.value(u).data().to_vec())
}

/// `uᵢ = vᵀ tanh(W₁hᵢ + W₂s + b₂)` for every encoder output `hᵢ`.
pub fn additive_scores(params: &AttentionParams, h: &[Vec<f64>], s: &[f64]) -> Result<Vec<f64>> {
    let plain = AttentionParams {
        location: None,
        ..params.clone()
    };
    single_scores(&plain, h, s, None)
}

/// Additive scores plus `fᵢ·μ` inside the tanh, with `f = F ∗ previous`.
pub fn convolutional_scores(
    params: &AttentionParams,
    h: &[Vec<f64>],
    s: &[f64],
    previous: Option<&[f64]>,
) -> Result<Vec<f64>> {
    if params.location.is_none() {
        return Err(Error::InvalidConfig("convolutional scores need a filter".into()));
    }
    single_scores(params, h, s, previous)
}

/// Masked softmax of `scores` and the weighted average of `h`.
pub fn attend_values(scores: &[f64], h: &[Vec<f64>], mask: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != h.len() || mask.len() != h.len() {
        return Err(Error::CountMismatch {
            what: "scores and positions",
            left: scores.len(),
            right: h.len(),
        });
    }
    let m = h.first().ok_or(Error::EmptySequence)?.len();
    let mut tape = Tape::new();
    let u = tape.constant(Tensor::new(&[1, scores.len()], scores.to_vec())?);
    let values = tape.constant(Tensor::from_rows(h)?.reshape(&[1, h.len(), m])?);
    let memory = Memory {
        values,
        keys: values,
        mask: mask.to_vec(),
        batch: 1,
        positions: h.len(),
        units: m,
    };
    let (w, d) = attend(&mut tape, u, &memory)?;
    Ok((tape.value(w).data().to_vec(), tape.value(d).data().to_vec()))
}
