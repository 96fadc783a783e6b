//! The attention decoder, full-model assembly, teacher-forced loss and training step.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionKind, Memory};
use crate::batch::{pad_sources, Batch, Example, Source, SourceBlock};
use crate::encoder::{
    lstm_cell, lstm_param_names, pyramidal_encode, speech_prenet, Bound, Dropout, EncoderConfig, EncoderKind,
    LstmState,
};
use crate::error::{Error, Result};
use crate::optim::ParameterStore;
use crate::tape::{log_sum_exp, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub attention: AttentionKind,
    /// Source vocabulary size (text models only).
    pub source_vocab: usize,
    pub target_vocab: usize,
    pub embed_dim: usize,
    pub units: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn text(source_vocab: usize, target_vocab: usize, units: usize, embed_dim: usize) -> Self {
        Self {
            encoder: EncoderConfig::text(units, embed_dim),
            attention: AttentionKind::Additive,
            source_vocab,
            target_vocab,
            embed_dim,
            units,
            decoder_layers: 2,
            dropout: 0.5,
        }
    }

    pub fn speech(
        feature_dim: usize,
        target_vocab: usize,
        units: usize,
        embed_dim: usize,
        prenet_sizes: Vec<usize>,
        filter_len: usize,
    ) -> Self {
        Self {
            encoder: EncoderConfig::speech(units, feature_dim, prenet_sizes),
            attention: AttentionKind::Convolutional { filter_len },
            source_vocab: 0,
            target_vocab,
            embed_dim,
            units,
            decoder_layers: 2,
            dropout: 0.5,
        }
    }

    pub fn is_speech(&self) -> bool {
        self.encoder.kind == EncoderKind::Speech
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.encoder.units != self.units {
            return Err(Error::InvalidConfig(
                "encoder and decoder unit counts differ".into(),
            ));
        }
        if self.units == 0 || self.embed_dim == 0 || self.decoder_layers == 0 {
            return Err(Error::InvalidConfig("model sizes must be positive".into()));
        }
        if self.target_vocab <= crate::text::UNK as usize {
            return Err(Error::InvalidConfig("target vocabulary too small".into()));
        }
        if self.encoder.kind == EncoderKind::Text {
            if self.source_vocab == 0 {
                return Err(Error::InvalidConfig("source vocabulary is empty".into()));
            }
            if self.encoder.input_dim != self.embed_dim {
                return Err(Error::InvalidConfig(
                    "text encoder input must match embedding size".into(),
                ));
            }
        }
        if let AttentionKind::Convolutional { filter_len } = self.attention {
            if filter_len % 2 == 0 {
                return Err(Error::InvalidConfig("attention filter length must be odd".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    /// Every parameter of the architecture with its shape.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (m, n, v) = (self.units, self.embed_dim, self.target_vocab);
        let mut shapes = Vec::new();
        if self.encoder.kind == EncoderKind::Text {
            shapes.push(("enc.embedding".into(), vec![n, self.source_vocab]));
        }
        shapes.extend(self.encoder.parameter_shapes());
        shapes.push(("dec.embedding".into(), vec![n, v]));
        shapes.push(("dec.w_init".into(), vec![2 * m, 2 * m]));
        for l in 0..self.decoder_layers {
            let input = if l == 0 { n } else { m };
            let [wi, ws, b] = lstm_param_names(&format!("dec.l{l}"));
            shapes.push((wi, vec![4 * m, input]));
            shapes.push((ws, vec![4 * m, m]));
            shapes.push((b, vec![4 * m]));
        }
        shapes.extend(self.attention.parameter_shapes(m));
        shapes.push(("dec.w_proj".into(), vec![m, 2 * m]));
        shapes.push(("dec.b_proj".into(), vec![m]));
        shapes.push(("dec.w_out".into(), vec![v, m]));
        shapes.push(("dec.b_out".into(), vec![v]));
        shapes
    }

    /// Checks that `store` holds exactly this architecture's parameters.
    pub fn check_parameters(&self, store: &ParameterStore) -> Result<()> {
        let shapes = self.parameter_shapes();
        if shapes.len() != store.len() {
            return Err(Error::InvalidConfig(format!(
                "architecture has {} parameters, store has {}",
                shapes.len(),
                store.len()
            )));
        }
        for (name, shape) in shapes {
            let t = store.get(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "check_parameters",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }
}

fn is_bias(name: &str) -> bool {
    name.ends_with("bias") || name.ends_with("b2") || name.ends_with("b_proj") || name.ends_with("b_out")
}

/// Glorot-uniform matrices and vectors, zero biases except a forget-gate bias of 1.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<ParameterStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParameterStore::new();
    for (name, shape) in config.parameter_shapes() {
        let len: usize = shape.iter().product();
        let data = if is_bias(&name) {
            let mut b = vec![0.0; len];
            if name.ends_with(".bias") && !name.starts_with("enc.prenet") {
                let m = len / 4;
                b[m..2 * m].fill(1.0);
            }
            b
        } else {
            let (fan_out, fan_in) = if shape.len() == 2 {
                (shape[0], shape[1])
            } else {
                (len, 1)
            };
            let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            (0..len).map(|_| rng.gen_range(-limit..limit)).collect()
        };
        store.insert(&name, Tensor::new(&shape, data)?);
    }
    Ok(store)
}

/// Binds every stored parameter, as a trainable parameter or as a constant.
pub fn bind_parameters(tape: &mut Tape, store: &ParameterStore, trainable: bool) -> Bound {
    Bound::new(
        store
            .iter()
            .map(|(name, slot)| {
                let id = if trainable {
                    tape.parameter(name, slot.value.clone())
                } else {
                    tape.constant(slot.value.clone())
                };
                (String::from(name), id)
            })
            .collect(),
    )
}

/// Seed of the dropout stream for one training step.
pub fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Encoder result on a tape.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub memory: Memory,
    /// `[B, 2m]`
    pub final_state: NodeId,
    pub lengths: Vec<usize>,
}

pub fn encode(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &Bound,
    source: &SourceBlock,
    lengths: &[usize],
    source_len: usize,
    dropout: Option<&mut Dropout>,
) -> Result<Encoded> {
    let batch = lengths.len();
    if source_len == 0 || lengths.iter().any(|&l| l == 0) {
        return Err(Error::EmptySequence);
    }
    let inputs = match (source, config.encoder.kind) {
        (SourceBlock::Tokens(ids), EncoderKind::Text) => {
            let table = params.get("enc.embedding")?;
            (0..source_len)
                .map(|t| {
                    let col = (0..batch).map(|b| ids[b * source_len + t] as usize).collect();
                    tape.embedding(table, col)
                })
                .collect::<Result<Vec<_>>>()?
        }
        (SourceBlock::Features { dim, data }, EncoderKind::Speech) => {
            if *dim != config.encoder.input_dim {
                return Err(Error::CountMismatch {
                    what: "feature dimension",
                    left: config.encoder.input_dim,
                    right: *dim,
                });
            }
            let layers = config.encoder.prenet_sizes.len();
            (0..source_len)
                .map(|t| {
                    let mut frame = Vec::with_capacity(batch * dim);
                    for b in 0..batch {
                        let start = (b * source_len + t) * dim;
                        frame.extend_from_slice(&data[start..start + dim]);
                    }
                    let x = tape.constant(Tensor::new(&[batch, *dim], frame)?);
                    speech_prenet(tape, params, layers, x)
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => {
            return Err(Error::InvalidArgument {
                op: "encode",
                reason: "source kind does not match the model".into(),
            })
        }
    };
    let out = pyramidal_encode(tape, &config.encoder, params, inputs, lengths, dropout)?;
    let values = tape.stack(&out.outputs)?;
    let memory = attention::prepare_memory(tape, params, values, &out.lengths)?;
    Ok(Encoded {
        memory,
        final_state: out.final_state,
        lengths: out.lengths,
    })
}

/// Decoder recurrent state on a tape.
#[derive(Clone, Debug)]
pub struct StepState {
    pub layers: Vec<LstmState>,
    /// Previous attention weights `[B, A]`, absent before the first step.
    pub attention: Option<NodeId>,
}

/// `s₀ = tanh(W_init s′)` fills the top layer's `(c, h)`; lower layers start at zero.
pub fn initial_state(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &Bound,
    final_state: NodeId,
) -> Result<StepState> {
    let m = config.units;
    let z = tape.matmul_t(final_state, params.get("dec.w_init")?)?;
    let s0 = tape.tanh(z)?;
    let batch = tape.value(s0).shape()[0];
    let mut layers = Vec::with_capacity(config.decoder_layers);
    for _ in 1..config.decoder_layers {
        layers.push(LstmState::zeros(tape, batch, m));
    }
    layers.push(LstmState {
        c: tape.slice(s0, 0, m)?,
        h: tape.slice(s0, m, 2 * m)?,
    });
    Ok(StepState {
        layers,
        attention: None,
    })
}

#[derive(Clone, Debug)]
pub struct StepNodes {
    pub state: StepState,
    /// `[B, V]`
    pub logits: NodeId,
    /// `[B, A]`
    pub weights: NodeId,
}

/// One decoder transition fed with the previous tokens `prev` (one per row).
pub fn decoder_step(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &Bound,
    state: &StepState,
    prev: &[u32],
    memory: &Memory,
    mut dropout: Option<&mut Dropout>,
) -> Result<StepNodes> {
    let ids = prev.iter().map(|&t| t as usize).collect();
    let mut x = tape.embedding(params.get("dec.embedding")?, ids)?;
    let mut layers = Vec::with_capacity(state.layers.len());
    for (l, &s) in state.layers.iter().enumerate() {
        if l > 0 {
            x = Dropout::apply(dropout.as_deref_mut(), tape, x)?;
        }
        let next = lstm_cell(tape, params, &format!("dec.l{l}"), x, s, None)?;
        x = next.h;
        layers.push(next);
    }
    let top = *layers.last().ok_or(Error::EmptySequence)?;
    let s = tape.concat(&[top.c, top.h])?;
    let u = attention::scores(tape, params, config.attention, memory, s, state.attention)?;
    let (weights, context) = attention::attend(tape, u, memory)?;
    let joined = tape.concat(&[top.h, context])?;
    let y = tape.matmul_t(joined, params.get("dec.w_proj")?)?;
    let y = tape.add(y, params.get("dec.b_proj")?)?;
    let logits = tape.matmul_t(y, params.get("dec.w_out")?)?;
    let logits = tape.add(logits, params.get("dec.b_out")?)?;
    Ok(StepNodes {
        state: StepState {
            layers,
            attention: Some(weights),
        },
        logits,
        weights,
    })
}

/// Teacher-forced loss of a batch: summed token cross-entropy divided by the
/// number of real target tokens. Also returns each step's attention weights.
pub fn batch_loss(
    tape: &mut Tape,
    config: &ModelConfig,
    params: &Bound,
    batch: &Batch,
    mut dropout: Option<&mut Dropout>,
) -> Result<(NodeId, Vec<NodeId>)> {
    let enc = encode(
        tape,
        config,
        params,
        &batch.source,
        &batch.source_lengths,
        batch.source_len,
        dropout.as_deref_mut(),
    )?;
    let mut state = initial_state(tape, config, params, enc.final_state)?;
    let tokens = batch.target_tokens() as f64;
    let (b, len) = (batch.size, batch.target_len);
    let mut total: Option<NodeId> = None;
    let mut weights = Vec::with_capacity(len);
    for t in 0..len {
        let prev: Vec<u32> = (0..b).map(|r| batch.target_in[r * len + t]).collect();
        let step = decoder_step(
            tape,
            config,
            params,
            &state,
            &prev,
            &enc.memory,
            dropout.as_deref_mut(),
        )?;
        let targets = (0..b).map(|r| batch.target_out[r * len + t] as usize).collect();
        let w = (0..b)
            .map(|r| {
                if batch.target_mask[r * len + t] {
                    1.0 / tokens
                } else {
                    0.0
                }
            })
            .collect();
        let ce = tape.cross_entropy(step.logits, targets, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
        weights.push(step.weights);
        state = step.state;
    }
    Ok((total.ok_or(Error::EmptySequence)?, weights))
}

/// Model configuration with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterStore,
}

/// Encoder outputs held as plain tensors for step-by-step decoding.
#[derive(Clone, Debug)]
pub struct EncodedSource {
    /// `[B, A, m]`
    pub values: Tensor,
    /// `[B, A, m]`
    pub keys: Tensor,
    pub lengths: Vec<usize>,
    /// `[B, 2m]`
    pub final_state: Tensor,
}

impl EncodedSource {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn positions(&self) -> usize {
        self.values.shape()[1]
    }

    /// Rows `rows` of every block (rows may repeat).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            values: self.values.select_rows(rows)?,
            keys: self.keys.select_rows(rows)?,
            lengths: rows.iter().map(|&r| self.lengths[r]).collect(),
            final_state: self.final_state.select_rows(rows)?,
        })
    }

    fn memory(&self, tape: &mut Tape) -> Memory {
        let s = self.values.shape();
        Memory {
            values: tape.constant(self.values.clone()),
            keys: tape.constant(self.keys.clone()),
            mask: attention::position_mask(&self.lengths, s[1]),
            batch: s[0],
            positions: s[1],
            units: s[2],
        }
    }
}

/// Decoder state as plain tensors, one row per hypothesis.
#[derive(Clone, Debug)]
pub struct DecoderState {
    /// `(c, h)` per layer, bottom first.
    pub layers: Vec<(Tensor, Tensor)>,
    pub attention: Option<Tensor>,
}

impl DecoderState {
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Ok(Self {
            layers: self
                .layers
                .iter()
                .map(|(c, h)| Ok((c.select_rows(rows)?, h.select_rows(rows)?)))
                .collect::<Result<_>>()?,
            attention: self.attention.as_ref().map(|a| a.select_rows(rows)).transpose()?,
        })
    }

    /// The attention-facing state: top layer `(c, h)` of row `row`.
    pub fn attention_state(&self, row: usize) -> Vec<f64> {
        let (c, h) = self.layers.last().expect("at least one layer");
        let mut s = c.row(row).to_vec();
        s.extend_from_slice(h.row(row));
        s
    }

    fn bind(&self, tape: &mut Tape) -> StepState {
        StepState {
            layers: self
                .layers
                .iter()
                .map(|(c, h)| LstmState {
                    c: tape.constant(c.clone()),
                    h: tape.constant(h.clone()),
                })
                .collect(),
            attention: self.attention.as_ref().map(|a| tape.constant(a.clone())),
        }
    }

    fn read(tape: &Tape, state: &StepState) -> Self {
        Self {
            layers: state
                .layers
                .iter()
                .map(|s| (tape.value(s.c).clone(), tape.value(s.h).clone()))
                .collect(),
            attention: state.attention.map(|a| tape.value(a).clone()),
        }
    }
}

/// Output of one decoding step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub state: DecoderState,
    /// Log-probabilities `[B, V]`.
    pub log_probs: Tensor,
    /// Attention weights `[B, A]`.
    pub weights: Tensor,
}

fn log_softmax_rows(logits: &Tensor) -> Tensor {
    let v = logits.last_dim();
    let mut out = Vec::with_capacity(logits.len());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let z = log_sum_exp(row);
        out.extend(row.iter().map(|x| x - z));
    }
    Tensor::from_parts(vec![logits.rows(), v], out)
}

impl Model {
    pub fn new(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        config.check_parameters(&params)?;
        Ok(Self { config, params })
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_parameters(&config, seed)?;
        Ok(Self { config, params })
    }

    /// Encodes a batch of sources (padded together).
    pub fn encode_sources(&self, sources: &[&Source]) -> Result<EncodedSource> {
        let (block, lengths, len) = pad_sources(sources)?;
        let mut tape = Tape::new();
        let params = bind_parameters(&mut tape, &self.params, false);
        let enc = encode(&mut tape, &self.config, &params, &block, &lengths, len, None)?;
        Ok(EncodedSource {
            values: tape.value(enc.memory.values).clone(),
            keys: tape.value(enc.memory.keys).clone(),
            lengths: enc.lengths,
            final_state: tape.value(enc.final_state).clone(),
        })
    }

    pub fn initial_state(&self, encoded: &EncodedSource) -> Result<DecoderState> {
        let mut tape = Tape::new();
        let params = bind_parameters(&mut tape, &self.params, false);
        let fs = tape.constant(encoded.final_state.clone());
        let state = initial_state(&mut tape, &self.config, &params, fs)?;
        Ok(DecoderState::read(&tape, &state))
    }

    /// Advances every row of `state` by one token.
    pub fn step(&self, state: &DecoderState, prev: &[u32], encoded: &EncodedSource) -> Result<StepResult> {
        if prev.len() != encoded.batch() {
            return Err(Error::CountMismatch {
                what: "previous tokens and encoded rows",
                left: prev.len(),
                right: encoded.batch(),
            });
        }
        let mut tape = Tape::new();
        let params = bind_parameters(&mut tape, &self.params, false);
        let memory = encoded.memory(&mut tape);
        let s = state.bind(&mut tape);
        let out = decoder_step(&mut tape, &self.config, &params, &s, prev, &memory, None)?;
        Ok(StepResult {
            state: DecoderState::read(&tape, &out.state),
            log_probs: log_softmax_rows(tape.value(out.logits)),
            weights: tape.value(out.weights).clone(),
        })
    }

    /// Teacher-forced negative log-likelihood per target token.
    pub fn sequence_nll(&self, source: &Source, target: &[u32]) -> Result<f64> {
        if target.is_empty() {
            return Err(Error::EmptySequence);
        }
        let example = Example {
            source: source.clone(),
            target: target.to_vec(),
        };
        let batch = Batch::from_examples(&[&example], vec![0])?;
        self.loss(&batch)
    }

    /// Batch loss without dropout.
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let params = bind_parameters(&mut tape, &self.params, false);
        let (loss, _) = batch_loss(&mut tape, &self.config, &params, batch, None)?;
        Ok(tape.value(loss).item().unwrap_or(f64::NAN))
    }

    /// Teacher-forced attention matrices, one `[T, A]` tensor per batch row.
    pub fn forced_attention(&self, batch: &Batch) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let params = bind_parameters(&mut tape, &self.params, false);
        let (_, weights) = batch_loss(&mut tape, &self.config, &params, batch, None)?;
        let len = batch.target_len;
        (0..batch.size)
            .map(|r| {
                let rows: Vec<Vec<f64>> = weights.iter().map(|&w| tape.value(w).row(r).to_vec()).collect();
                let t = batch.target_mask[r * len..(r + 1) * len]
                    .iter()
                    .filter(|&&m| m)
                    .count();
                Tensor::from_rows(&rows[..t])
            })
            .collect()
    }

    /// Loss, gradients and one Adam update. `seed` drives this step's dropout
    /// masks. Returns the loss before the update. The parameters are left
    /// untouched when the step diverges.
    pub fn train_step(&mut self, batch: &Batch, learning_rate: f64, seed: u64) -> Result<f64> {
        let mut tape = Tape::new();
        let params = bind_parameters(&mut tape, &self.params, true);
        let mut dropout = (self.config.dropout > 0.0).then(|| Dropout::new(self.config.dropout, seed));
        let (loss, _) = batch_loss(&mut tape, &self.config, &params, batch, dropout.as_mut())?;
        let value = tape.value(loss).item().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::Divergence {
                step: self.params.step() + 1,
            });
        }
        let grads = tape.backprop(loss)?;
        if grads.values().any(|g| !g.all_finite()) {
            return Err(Error::Divergence {
                step: self.params.step() + 1,
            });
        }
        let mut next = self.params.clone();
        next.adam_update(&grads, learning_rate)?;
        if next.iter().any(|(_, s)| !s.value.all_finite()) {
            return Err(Error::Divergence { step: next.step() });
        }
        self.params = next;
        Ok(value)
    }

    /// Gradient of the dropout-free batch loss.
    pub fn gradients(&self, batch: &Batch) -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let params = bind_parameters(&mut tape, &self.params, true);
        let (loss, _) = batch_loss(&mut tape, &self.config, &params, batch, None)?;
        let value = tape.value(loss).item().unwrap_or(f64::NAN);
        Ok((value, tape.backprop(loss)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::compare_gradients;
    use crate::text::{BOS, EOS};

    fn tiny_text(seed: u64) -> Model {
        let mut cfg = ModelConfig::text(7, 8, 3, 2);
        cfg.dropout = 0.0;
        Model::init(cfg, seed).unwrap()
    }

    fn tokens(ids: &[u32]) -> Source {
        Source::Tokens(ids.to_vec())
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + libm::exp(-x))
    }

    fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
        let cols = w.shape()[1];
        (0..w.shape()[0])
            .map(|r| (0..cols).map(|c| w.data()[r * cols + c] * x[c]).sum())
            .collect()
    }

    fn cell(store: &ParameterStore, prefix: &str, x: &[f64], c: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let [wi, ws, b] = lstm_param_names(prefix);
        let zi = matvec(store.get(&wi).unwrap(), x);
        let zs = matvec(store.get(&ws).unwrap(), h);
        let b = store.get(&b).unwrap().data();
        let m = h.len();
        let z: Vec<f64> = (0..4 * m).map(|r| zi[r] + zs[r] + b[r]).collect();
        let mut c2 = vec![0.0; m];
        let mut h2 = vec![0.0; m];
        for j in 0..m {
            c2[j] = sigmoid(z[m + j]) * c[j] + sigmoid(z[j]) * libm::tanh(z[2 * m + j]);
            h2[j] = sigmoid(z[3 * m + j]) * libm::tanh(c2[j]);
        }
        (c2, h2)
    }

    /// Scalar evaluation of one decoder step: returns the output distribution,
    /// the attention weights and the new per-layer states.
    #[allow(clippy::type_complexity)]
    fn oracle_step(
        store: &ParameterStore,
        states: &[(Vec<f64>, Vec<f64>)],
        prev: u32,
        h: &[Vec<f64>],
    ) -> (Vec<f64>, Vec<f64>, Vec<(Vec<f64>, Vec<f64>)>) {
        let e = store.get("dec.embedding").unwrap();
        let v = e.shape()[1];
        let mut x: Vec<f64> = (0..e.shape()[0])
            .map(|d| e.data()[d * v + prev as usize])
            .collect();
        let mut next = vec![];
        for (l, (c, hh)) in states.iter().enumerate() {
            let (c2, h2) = cell(store, &format!("dec.l{l}"), &x, c, hh);
            x = h2.clone();
            next.push((c2, h2));
        }
        let (ct, ht) = next.last().unwrap();
        let s: Vec<f64> = ct.iter().chain(ht).copied().collect();
        let q = matvec(store.get("att.w2").unwrap(), &s);
        let b2 = store.get("att.b2").unwrap().data();
        let av = store.get("att.v").unwrap().data();
        let u: Vec<f64> = h
            .iter()
            .map(|hi| {
                let k = matvec(store.get("att.w1").unwrap(), hi);
                (0..k.len())
                    .map(|j| av[j] * libm::tanh(k[j] + q[j] + b2[j]))
                    .sum()
            })
            .collect();
        let mx = u.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = u.iter().map(|x| libm::exp(x - mx)).sum();
        let a: Vec<f64> = u.iter().map(|x| libm::exp(x - mx) / z).collect();
        let m = ht.len();
        let d: Vec<f64> = (0..m)
            .map(|j| (0..h.len()).map(|i| a[i] * h[i][j]).sum())
            .collect();
        let joined: Vec<f64> = ht.iter().chain(&d).copied().collect();
        let bp = store.get("dec.b_proj").unwrap().data();
        let y: Vec<f64> = matvec(store.get("dec.w_proj").unwrap(), &joined)
            .iter()
            .zip(bp)
            .map(|(a, b)| a + b)
            .collect();
        let bo = store.get("dec.b_out").unwrap().data();
        let logits: Vec<f64> = matvec(store.get("dec.w_out").unwrap(), &y)
            .iter()
            .zip(bo)
            .map(|(a, b)| a + b)
            .collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|x| libm::exp(x - mx)).sum();
        (logits.iter().map(|x| libm::exp(x - mx) / z).collect(), a, next)
    }

    fn tiny_with_memory() -> (Model, EncodedSource, Vec<Vec<f64>>) {
        let mut cfg = ModelConfig::text(4, 5, 2, 2);
        cfg.dropout = 0.0;
        let mut model = Model::init(cfg, 3).unwrap();
        // Push biases away from zero so the oracle exercises them.
        for name in ["dec.b_out", "dec.b_proj", "att.b2"] {
            let t = model.params.get_mut(name).unwrap();
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x = 0.1 * i as f64 - 0.15;
            }
        }
        let h = vec![vec![0.3, -0.6], vec![0.9, 0.2], vec![-0.4, 0.7]];
        let values = Tensor::from_rows(&h).unwrap().reshape(&[1, 3, 2]).unwrap();
        let keys_rows: Vec<Vec<f64>> = h
            .iter()
            .map(|r| matvec(model.params.get("att.w1").unwrap(), r))
            .collect();
        let enc = EncodedSource {
            values,
            keys: Tensor::from_rows(&keys_rows)
                .unwrap()
                .reshape(&[1, 3, 2])
                .unwrap(),
            lengths: vec![3],
            final_state: Tensor::new(&[1, 4], vec![0.5, -0.25, 0.75, 0.1]).unwrap(),
        };
        (model, enc, h)
    }

    #[test]
    fn initial_state_matches_tanh_oracle() {
        let (model, enc, _) = tiny_with_memory();
        let st = model.initial_state(&enc).unwrap();
        let want: Vec<f64> = matvec(model.params.get("dec.w_init").unwrap(), enc.final_state.data())
            .into_iter()
            .map(libm::tanh)
            .collect();
        assert_eq!(st.layers[0].0.data(), &[0.0, 0.0]);
        assert_eq!(st.layers[0].1.data(), &[0.0, 0.0]);
        let got = st.attention_state(0);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-15);
        }
        assert!(st.attention.is_none());
    }

    #[test]
    fn zero_init_matrix_gives_zero_state() {
        let (mut model, enc, _) = tiny_with_memory();
        *model.params.get_mut("dec.w_init").unwrap() = Tensor::zeros(&[4, 4]);
        let st = model.initial_state(&enc).unwrap();
        assert!(st.attention_state(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn decoder_steps_match_scalar_oracle() {
        let (model, enc, h) = tiny_with_memory();
        let mut state = model.initial_state(&enc).unwrap();
        let mut oracle: Vec<(Vec<f64>, Vec<f64>)> = state
            .layers
            .iter()
            .map(|(c, hh)| (c.data().to_vec(), hh.data().to_vec()))
            .collect();
        for prev in [BOS, 4, 3] {
            let out = model.step(&state, &[prev], &enc).unwrap();
            let (dist, a, next) = oracle_step(&model.params, &oracle, prev, &h);
            for (lp, p) in out.log_probs.data().iter().zip(&dist) {
                assert!((libm::exp(*lp) - p).abs() < 1e-13);
            }
            for (w, o) in out.weights.data().iter().zip(&a) {
                assert!((w - o).abs() < 1e-13);
            }
            let total: f64 = out.log_probs.data().iter().map(|x| libm::exp(*x)).sum();
            assert!((total - 1.0).abs() < 1e-9);
            state = out.state;
            oracle = next;
        }
    }

    #[test]
    fn zero_parameters_give_uniform_distribution() {
        let (mut model, enc, _) = tiny_with_memory();
        let names: Vec<String> = model.params.names().iter().map(|s| String::from(*s)).collect();
        for n in names {
            let t = model.params.get_mut(&n).unwrap();
            t.data_mut().fill(0.0);
        }
        let st = model.initial_state(&enc).unwrap();
        let out = model.step(&st, &[BOS], &enc).unwrap();
        for lp in out.log_probs.data() {
            assert!((lp + libm::log(5.0)).abs() < 1e-15);
        }
        let loss = model.sequence_nll(&tokens(&[1, 2]), &[3, 4]).unwrap();
        assert!((loss - libm::log(5.0)).abs() < 1e-12);
    }

    #[test]
    fn token_out_of_range() {
        let (model, enc, _) = tiny_with_memory();
        let st = model.initial_state(&enc).unwrap();
        assert_eq!(
            model.step(&st, &[5], &enc).unwrap_err(),
            Error::TokenOutOfRange { id: 5, size: 5 }
        );
    }

    #[test]
    fn sequence_nll_matches_step_chain() {
        let model = tiny_text(8);
        let src = tokens(&[4, 5, 6]);
        let target = [4u32, 5];
        let enc = model.encode_sources(&[&src]).unwrap();
        let mut state = model.initial_state(&enc).unwrap();
        let mut nll = 0.0;
        for (prev, next) in [(BOS, 4u32), (4, 5), (5, EOS)] {
            let out = model.step(&state, &[prev], &enc).unwrap();
            nll -= out.log_probs.data()[next as usize];
            state = out.state;
        }
        let got = model.sequence_nll(&src, &target).unwrap();
        assert!((got - nll / 3.0).abs() < 1e-13);
        assert_eq!(model.sequence_nll(&src, &[]).unwrap_err(), Error::EmptySequence);
    }

    #[test]
    fn loss_ignores_padding() {
        let model = tiny_text(9);
        let a = Example {
            source: tokens(&[4, 5]),
            target: vec![4, 5, 6],
        };
        let b = Example {
            source: tokens(&[6, 4, 5, 6]),
            target: vec![5],
        };
        let long = Example {
            source: tokens(&[4, 4, 4, 4, 4, 4]),
            target: vec![4; 7],
        };
        let both = Batch::from_examples(&[&a, &b], vec![0, 1]).unwrap();
        let l_a = model
            .loss(&Batch::from_examples(&[&a], vec![0]).unwrap())
            .unwrap();
        let l_b = model
            .loss(&Batch::from_examples(&[&b], vec![0]).unwrap())
            .unwrap();
        let l_ab = model.loss(&both).unwrap();
        assert!((l_ab - (4.0 * l_a + 2.0 * l_b) / 6.0).abs() < 1e-12);
        let padded = Batch::from_examples(&[&a, &long], vec![0, 1]).unwrap();
        let enc = model.encode_sources(&[&a.source, &long.source]).unwrap();
        let alone = model.encode_sources(&[&a.source]).unwrap();
        assert!(padded.source_len > 2);
        for i in 0..2 * 3 {
            assert!((enc.values.data()[i] - alone.values.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn teacher_forcing_matches_free_running() {
        let model = tiny_text(10);
        let src = tokens(&[4, 6, 5, 4]);
        let enc = model.encode_sources(&[&src]).unwrap();
        let mut state = model.initial_state(&enc).unwrap();
        let mut prev = BOS;
        let mut produced = vec![];
        for _ in 0..5 {
            let out = model.step(&state, &[prev], &enc).unwrap();
            let row = out.log_probs.data();
            let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b }) as u32;
            produced.push((best, row.to_vec(), out.weights.data().to_vec()));
            state = out.state;
            prev = best;
            if best == EOS {
                break;
            }
        }
        let target: Vec<u32> = produced.iter().map(|p| p.0).take_while(|&t| t != EOS).collect();
        let ex = Example {
            source: src.clone(),
            target: target.clone(),
        };
        let batch = Batch::from_examples(&[&ex], vec![0]).unwrap();
        let forced = model.forced_attention(&batch).unwrap();
        for (t, (_, _, w)) in produced.iter().enumerate().take(target.len() + 1) {
            assert_eq!(forced[0].row(t), w.as_slice(), "step {t}");
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = tiny_text(11);
        let before = model.params.clone();
        let ex = Example {
            source: tokens(&[4, 5]),
            target: vec![6],
        };
        let batch = Batch::from_examples(&[&ex], vec![0]).unwrap();
        model.train_step(&batch, 0.0, 1).unwrap();
        for (name, slot) in before.iter() {
            assert_eq!(&slot.value, model.params.get(name).unwrap());
        }
    }

    #[test]
    fn non_finite_update_is_divergence_and_not_applied() {
        let mut model = tiny_text(11);
        let before = model.params.clone();
        let ex = Example {
            source: tokens(&[4, 5]),
            target: vec![6],
        };
        let batch = Batch::from_examples(&[&ex], vec![0]).unwrap();
        let err = model.train_step(&batch, f64::INFINITY, 1).unwrap_err();
        assert_eq!(err, Error::Divergence { step: 1 });
        assert_eq!(model.params, before);
    }

    #[test]
    fn overfits_one_pair() {
        let mut model = tiny_text(12);
        let ex = Example {
            source: tokens(&[4, 5, 6]),
            target: vec![6, 5, 4],
        };
        let batch = Batch::from_examples(&[&ex], vec![0]).unwrap();
        let mut losses = vec![];
        for step in 0..100 {
            losses.push(model.train_step(&batch, 0.05, step).unwrap());
        }
        let decreasing = losses.windows(2).filter(|w| w[1] < w[0]).count();
        assert!(decreasing >= 95, "{decreasing}");
        assert!(model.loss(&batch).unwrap() < 0.1);
    }

    #[test]
    fn initial_loss_near_uniform() {
        let mut cfg = ModelConfig::text(30, 40, 16, 16);
        cfg.dropout = 0.0;
        let model = Model::init(cfg, 13).unwrap();
        let ex = Example {
            source: tokens(&[4, 9, 12, 20]),
            target: vec![5, 8, 30, 11],
        };
        let loss = model
            .loss(&Batch::from_examples(&[&ex], vec![0]).unwrap())
            .unwrap();
        let uniform = libm::log(40.0);
        assert!((loss - uniform).abs() < 0.05 * uniform, "{loss}");
    }

    #[test]
    fn speech_model_shapes_and_gradients() {
        let mut cfg = ModelConfig::speech(3, 6, 2, 2, vec![3], 3);
        cfg.dropout = 0.0;
        let mut model = Model::init(cfg, 14).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let names: Vec<String> = model.params.names().iter().map(|s| String::from(*s)).collect();
        for n in names {
            for x in model.params.get_mut(&n).unwrap().data_mut() {
                *x = rng.gen_range(-0.8..0.8);
            }
        }
        let frames = |n: usize, off: f64| {
            let data = (0..n * 3).map(|i| libm::sin(i as f64 + off)).collect();
            Source::Features(crate::audio::FeatureSequence::new(3, data).unwrap())
        };
        let a = Example {
            source: frames(5, 0.0),
            target: vec![4, 5],
        };
        let b = Example {
            source: frames(8, 1.0),
            target: vec![5],
        };
        let batch = Batch::from_examples(&[&a, &b], vec![0, 1]).unwrap();
        let enc = model.encode_sources(&[&a.source, &b.source]).unwrap();
        assert_eq!(enc.lengths, vec![2, 2]);
        let short = frames(3, 0.0);
        assert_eq!(
            model.encode_sources(&[&short]).unwrap_err(),
            Error::InputTooShort { len: 3, min: 4 }
        );
        let model = model;
        let (_, grads) = model.gradients(&batch).unwrap();
        let point: BTreeMap<String, Tensor> = model
            .params
            .iter()
            .map(|(n, s)| (String::from(n), s.value.clone()))
            .collect();
        let value = |p: &BTreeMap<String, Tensor>| {
            let mut m = model.clone();
            for (n, t) in p {
                *m.params.get_mut(n)? = t.clone();
            }
            m.loss(&batch)
        };
        let err = compare_gradients(value, &grads, &point, 1e-5).unwrap();
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn architecture_check() {
        let model = tiny_text(15);
        let other = ModelConfig::speech(41, 6, 3, 2, vec![4], 3);
        assert!(other.check_parameters(&model.params).is_err());
        assert!(model.config.check_parameters(&model.params).is_ok());
    }

    #[test]
    fn step_seeds_differ() {
        assert_ne!(step_seed(1, 1), step_seed(1, 2));
        assert_ne!(step_seed(1, 1), step_seed(2, 1));
        assert_eq!(step_seed(7, 9), step_seed(7, 9));
    }
}
