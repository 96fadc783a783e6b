//! LSTM cells, bidirectional layers and the (optionally pyramidal) encoder stack.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Parameter nodes bound on a tape, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn new(ids: BTreeMap<String, NodeId>) -> Self {
        Self { ids }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ids.contains_key(name)
    }
}

/// Inverted dropout with its own deterministic random stream.
#[derive(Clone, Debug)]
pub struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Multiplicative mask: 0 with probability `rate`, else `1/(1-rate)`.
    pub fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        (0..len)
            .map(|_| {
                if self.rng.gen::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }

    pub fn apply(dropout: Option<&mut Dropout>, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match dropout {
            Some(d) if d.rate > 0.0 => {
                let mask = d.mask(tape.value(x).len());
                tape.dropout(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Weights of one LSTM cell. Gate blocks are ordered input, forget,
/// cell candidate, output.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmCellParams {
    /// `[4m, input_dim]`
    pub w_input: Tensor,
    /// `[4m, m]`
    pub w_state: Tensor,
    /// `[4m]`
    pub bias: Tensor,
}

impl LstmCellParams {
    pub fn units(&self) -> usize {
        self.bias.len() / 4
    }

    pub fn input_dim(&self) -> usize {
        self.w_input.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.units();
        let ok = self.bias.len() == 4 * m
            && self.w_input.rank() == 2
            && self.w_input.shape()[0] == 4 * m
            && self.w_state.shape() == [4 * m, m];
        if ok {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op: "lstm_params",
                lhs: self.w_input.shape().to_vec(),
                rhs: self.w_state.shape().to_vec(),
            })
        }
    }

    pub fn bind(&self, tape: &mut Tape, prefix: &str) -> BTreeMap<String, NodeId> {
        let mut ids = BTreeMap::new();
        for (suffix, t) in [
            ("w_input", &self.w_input),
            ("w_state", &self.w_state),
            ("bias", &self.bias),
        ] {
            let name = format!("{prefix}.{suffix}");
            ids.insert(name.clone(), tape.parameter(&name, t.clone()));
        }
        ids
    }
}

pub fn lstm_param_names(prefix: &str) -> [String; 3] {
    [
        format!("{prefix}.w_input"),
        format!("{prefix}.w_state"),
        format!("{prefix}.bias"),
    ]
}

/// Cell and hidden state, each `[batch, m]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LstmState {
    pub c: NodeId,
    pub h: NodeId,
}

impl LstmState {
    pub fn zeros(tape: &mut Tape, batch: usize, units: usize) -> Self {
        let z = tape.constant(Tensor::zeros(&[batch, units]));
        Self { c: z, h: z }
    }
}

/// One LSTM transition on the tape. Rows whose `active` flag is false keep
/// their previous state exactly.
pub fn lstm_cell(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    x: NodeId,
    state: LstmState,
    active: Option<&[bool]>,
) -> Result<LstmState> {
    let [wi, ws, b] = lstm_param_names(prefix);
    let (wi, ws, b) = (params.get(&wi)?, params.get(&ws)?, params.get(&b)?);
    let m = tape.value(ws).shape()[1];
    let xi = tape.matmul_t(x, wi)?;
    let hs = tape.matmul_t(state.h, ws)?;
    let z = tape.add(xi, hs)?;
    let z = tape.add(z, b)?;
    let i = tape.slice(z, 0, m)?;
    let i = tape.sigmoid(i)?;
    let f = tape.slice(z, m, 2 * m)?;
    let f = tape.sigmoid(f)?;
    let g = tape.slice(z, 2 * m, 3 * m)?;
    let g = tape.tanh(g)?;
    let o = tape.slice(z, 3 * m, 4 * m)?;
    let o = tape.sigmoid(o)?;
    let fc = tape.mul(f, state.c)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    match active {
        Some(flags) if flags.iter().any(|&a| !a) => Ok(LstmState {
            c: tape.row_select(c, state.c, flags.to_vec())?,
            h: tape.row_select(h, state.h, flags.to_vec())?,
        }),
        _ => Ok(LstmState { c, h }),
    }
}

/// Single-vector LSTM step: returns `(c′, h′)`.
pub fn lstm_cell_step(
    params: &LstmCellParams,
    x: &[f64],
    c: &[f64],
    h: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    params.validate()?;
    let m = params.units();
    if x.len() != params.input_dim() || c.len() != m || h.len() != m {
        return Err(Error::ShapeMismatch {
            op: "lstm_cell_step",
            lhs: vec![params.input_dim(), m],
            rhs: vec![x.len(), c.len(), h.len()],
        });
    }
    let mut tape = Tape::new();
    let bound = Bound::new(params.bind(&mut tape, "cell"));
    let x = tape.constant(Tensor::new(&[1, x.len()], x.to_vec())?);
    let state = LstmState {
        c: tape.constant(Tensor::new(&[1, m], c.to_vec())?),
        h: tape.constant(Tensor::new(&[1, m], h.to_vec())?),
    };
    let out = lstm_cell(&mut tape, &bound, "cell", x, state, None)?;
    Ok((
        tape.value(out.c).data().to_vec(),
        tape.value(out.h).data().to_vec(),
    ))
}

/// Output of a bidirectional layer: per-position sums of both directions and
/// the forward direction's final `(c, h)` concatenated to `[batch, 2m]`.
#[derive(Clone, Debug)]
pub struct BiOutput {
    pub outputs: Vec<NodeId>,
    pub final_forward: NodeId,
}

fn active_flags(lengths: &[usize], t: usize) -> Vec<bool> {
    lengths.iter().map(|&l| t < l).collect()
}

/// Runs `{prefix}.fwd` left to right and `{prefix}.bwd` right to left over
/// `inputs` (one `[batch, d]` node per position). Row `b` only uses its first
/// `lengths[b]` positions.
pub fn bidirectional_layer(
    tape: &mut Tape,
    params: &Bound,
    prefix: &str,
    inputs: &[NodeId],
    lengths: &[usize],
) -> Result<BiOutput> {
    if inputs.is_empty() {
        return Err(Error::EmptySequence);
    }
    let batch = tape.value(inputs[0]).shape()[0];
    let fwd = format!("{prefix}.fwd");
    let bwd = format!("{prefix}.bwd");
    let units = tape.value(params.get(&format!("{fwd}.w_state"))?).shape()[1];
    let mut state = LstmState::zeros(tape, batch, units);
    let mut forward = Vec::with_capacity(inputs.len());
    for (t, &x) in inputs.iter().enumerate() {
        state = lstm_cell(tape, params, &fwd, x, state, Some(&active_flags(lengths, t)))?;
        forward.push(state.h);
    }
    let final_forward = tape.concat(&[state.c, state.h])?;
    let mut state = LstmState::zeros(tape, batch, units);
    let mut backward = vec![state.h; inputs.len()];
    for t in (0..inputs.len()).rev() {
        state = lstm_cell(
            tape,
            params,
            &bwd,
            inputs[t],
            state,
            Some(&active_flags(lengths, t)),
        )?;
        backward[t] = state.h;
    }
    let outputs = forward
        .iter()
        .zip(&backward)
        .map(|(&f, &b)| tape.add(f, b))
        .collect::<Result<Vec<_>>>()?;
    Ok(BiOutput {
        outputs,
        final_forward,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Text,
    Speech,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub layer_count: usize,
    pub units: usize,
    /// Zero-based indices of layers that read every other output of the layer below.
    pub subsample_layers: Vec<usize>,
    /// Fully connected tanh layers before the first recurrent layer.
    pub prenet_sizes: Vec<usize>,
    /// Size of the vectors fed to the encoder (embedding size or feature dimension).
    pub input_dim: usize,
}

impl EncoderConfig {
    /// Two bidirectional layers, no subsampling.
    pub fn text(units: usize, embed_dim: usize) -> Self {
        Self {
            kind: EncoderKind::Text,
            layer_count: 2,
            units,
            subsample_layers: Vec::new(),
            prenet_sizes: Vec::new(),
            input_dim: embed_dim,
        }
    }

    /// Prenet then three bidirectional layers, the 2nd and 3rd subsampling.
    pub fn speech(units: usize, feature_dim: usize, prenet_sizes: Vec<usize>) -> Self {
        Self {
            kind: EncoderKind::Speech,
            layer_count: 3,
            units,
            subsample_layers: vec![1, 2],
            prenet_sizes,
            input_dim: feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_count == 0 || self.units == 0 || self.input_dim == 0 {
            return Err(Error::InvalidConfig("encoder sizes must be positive".into()));
        }
        if self.subsample_layers.iter().any(|&l| l >= self.layer_count) {
            return Err(Error::InvalidConfig(
                "subsampling layer index out of range".into(),
            ));
        }
        Ok(())
    }

    /// Length of the encoder output for an input of `len` positions.
    pub fn output_length(&self, len: usize) -> usize {
        (0..self.layer_count)
            .filter(|l| self.subsample_layers.contains(l))
            .fold(len, |n, _| n.div_ceil(2))
    }

    pub fn min_input_length(&self) -> usize {
        1 << self.subsample_layers.len()
    }

    /// Width of the vectors entering the first recurrent layer.
    pub fn recurrent_input_dim(&self) -> usize {
        self.prenet_sizes.last().copied().unwrap_or(self.input_dim)
    }

    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut prev = self.input_dim;
        for (i, &size) in self.prenet_sizes.iter().enumerate() {
            shapes.push((format!("enc.prenet.{i}.weight"), vec![size, prev]));
            shapes.push((format!("enc.prenet.{i}.bias"), vec![size]));
            prev = size;
        }
        let m = self.units;
        for l in 0..self.layer_count {
            let input = if l == 0 { prev } else { m };
            for dir in ["fwd", "bwd"] {
                let [wi, ws, b] = lstm_param_names(&format!("enc.l{l}.{dir}"));
                shapes.push((wi, vec![4 * m, input]));
                shapes.push((ws, vec![4 * m, m]));
                shapes.push((b, vec![4 * m]));
            }
        }
        shapes
    }
}

/// `tanh(W₂·tanh(W₁x + b₁) + b₂)` (generalized to any number of layers).
pub fn speech_prenet(tape: &mut Tape, params: &Bound, layers: usize, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for i in 0..layers {
        let w = params.get(&format!("enc.prenet.{i}.weight"))?;
        let b = params.get(&format!("enc.prenet.{i}.bias"))?;
        let z = tape.matmul_t(h, w)?;
        let z = tape.add(z, b)?;
        h = tape.tanh(z)?;
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// One `[batch, m]` node per output position.
    pub outputs: Vec<NodeId>,
    /// Valid output length of each row.
    pub lengths: Vec<usize>,
    /// Top layer forward `(c, h)`, `[batch, 2m]`.
    pub final_state: NodeId,
}

/// Runs the stacked bidirectional layers over already embedded (or prenet
/// transformed) inputs. Dropout, when given, is applied to the inputs of
/// every layer above the first.
pub fn pyramidal_encode(
    tape: &mut Tape,
    config: &EncoderConfig,
    params: &Bound,
    inputs: Vec<NodeId>,
    lengths: &[usize],
    mut dropout: Option<&mut Dropout>,
) -> Result<EncoderOutput> {
    let min = config.min_input_length();
    if let Some(&short) = lengths.iter().find(|&&l| l < min) {
        return Err(Error::InputTooShort { len: short, min });
    }
    let mut seq = inputs;
    let mut lengths = lengths.to_vec();
    let mut final_state = None;
    for l in 0..config.layer_count {
        if config.subsample_layers.contains(&l) {
            seq = seq.into_iter().step_by(2).collect();
            lengths.iter_mut().for_each(|n| *n = n.div_ceil(2));
        }
        if l > 0 {
            seq = seq
                .into_iter()
                .map(|x| Dropout::apply(dropout.as_deref_mut(), tape, x))
                .collect::<Result<Vec<_>>>()?;
        }
        let out = bidirectional_layer(tape, params, &format!("enc.l{l}"), &seq, &lengths)?;
        seq = out.outputs;
        final_state = Some(out.final_forward);
    }
    Ok(EncoderOutput {
        outputs: seq,
        lengths,
        final_state: final_state.ok_or(Error::EmptySequence)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use rand::Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + libm::exp(-x))
    }

    /// Scalar reference implementation of one LSTM step.
    fn oracle_step(p: &LstmCellParams, x: &[f64], c: &[f64], h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let m = p.units();
        let d = x.len();
        let z: Vec<f64> = (0..4 * m)
            .map(|r| {
                let mut s = p.bias.data()[r];
                for k in 0..d {
                    s += p.w_input.data()[r * d + k] * x[k];
                }
                for k in 0..m {
                    s += p.w_state.data()[r * m + k] * h[k];
                }
                s
            })
            .collect();
        let mut c2 = vec![0.0; m];
        let mut h2 = vec![0.0; m];
        for j in 0..m {
            let i = sigmoid(z[j]);
            let f = sigmoid(z[m + j]);
            let g = libm::tanh(z[2 * m + j]);
            let o = sigmoid(z[3 * m + j]);
            c2[j] = f * c[j] + i * g;
            h2[j] = o * libm::tanh(c2[j]);
        }
        (c2, h2)
    }

    fn random_cell(rng: &mut ChaCha8Rng, d: usize, m: usize) -> LstmCellParams {
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-0.8..0.8)).collect() };
        LstmCellParams {
            w_input: Tensor::new(&[4 * m, d], r(4 * m * d)).unwrap(),
            w_state: Tensor::new(&[4 * m, m], r(4 * m * m)).unwrap(),
            bias: Tensor::new(&[4 * m], r(4 * m)).unwrap(),
        }
    }

    #[test]
    fn zero_weights_halve_the_cell() {
        let p = LstmCellParams {
            w_input: Tensor::zeros(&[4, 3]),
            w_state: Tensor::zeros(&[4, 1]),
            bias: Tensor::zeros(&[4]),
        };
        let (c, h) = lstm_cell_step(&p, &[0.3, -2.0, 9.0], &[1.0], &[0.0]).unwrap();
        assert_eq!(c, vec![0.5]);
        assert!((h[0] - 0.5 * libm::tanh(0.5)).abs() < 1e-15);
    }

    #[test]
    fn saturated_gates_hold_memory() {
        let m = 2;
        let mut bias = vec![-10.0; 4 * m];
        bias[m..2 * m].fill(10.0);
        let p = LstmCellParams {
            w_input: Tensor::zeros(&[4 * m, 1]),
            w_state: Tensor::zeros(&[4 * m, m]),
            bias: Tensor::vector(&bias),
        };
        let (c, _) = lstm_cell_step(&p, &[1.0], &[0.7, -0.3], &[0.1, 0.2]).unwrap();
        assert!((c[0] - 0.7).abs() < 1e-4 && (c[1] + 0.3).abs() < 1e-4);
    }

    #[test]
    fn two_steps_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_cell(&mut rng, 2, 2);
        let xs = [[0.5, -1.0], [0.25, 0.75]];
        let (mut c, mut h) = (vec![0.0; 2], vec![0.0; 2]);
        let (mut oc, mut oh) = (vec![0.0; 2], vec![0.0; 2]);
        for x in xs {
            (c, h) = lstm_cell_step(&p, &x, &c, &h).unwrap();
            (oc, oh) = oracle_step(&p, &x, &oc, &oh);
            for j in 0..2 {
                assert!((c[j] - oc[j]).abs() < 1e-14);
                assert!((h[j] - oh[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_cell(&mut rng, 2, 2);
        assert!(lstm_cell_step(&p, &[1.0], &[0.0; 2], &[0.0; 2]).is_err());
    }

    fn bind_bi(tape: &mut Tape, fwd: &LstmCellParams, bwd: &LstmCellParams) -> Bound {
        let mut ids = fwd.bind(tape, "bi.fwd");
        ids.extend(bwd.bind(tape, "bi.bwd"));
        Bound::new(ids)
    }

    fn run_bi(fwd: &LstmCellParams, bwd: &LstmCellParams, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = bind_bi(&mut tape, fwd, bwd);
        let inputs: Vec<NodeId> = xs
            .iter()
            .map(|x| tape.constant(Tensor::new(&[1, x.len()], x.clone()).unwrap()))
            .collect();
        let out = bidirectional_layer(&mut tape, &bound, "bi", &inputs, &[xs.len()]).unwrap();
        out.outputs
            .iter()
            .map(|&o| tape.value(o).data().to_vec())
            .collect()
    }

    #[test]
    fn bidirectional_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let fwd = random_cell(&mut rng, 2, 2);
        let bwd = random_cell(&mut rng, 2, 2);
        let xs = vec![vec![0.1, 0.2], vec![-0.5, 0.9], vec![1.0, -0.3]];
        let got = run_bi(&fwd, &bwd, &xs);
        let mut f_out = vec![];
        let (mut c, mut h) = (vec![0.0; 2], vec![0.0; 2]);
        for x in &xs {
            (c, h) = oracle_step(&fwd, x, &c, &h);
            f_out.push(h.clone());
        }
        let mut b_out = vec![vec![]; 3];
        let (mut c, mut h) = (vec![0.0; 2], vec![0.0; 2]);
        for t in (0..3).rev() {
            (c, h) = oracle_step(&bwd, &xs[t], &c, &h);
            b_out[t] = h.clone();
        }
        for t in 0..3 {
            for j in 0..2 {
                assert!((got[t][j] - (f_out[t][j] + b_out[t][j])).abs() < 1e-14);
            }
        }
        let single = run_bi(&fwd, &bwd, &xs[..1]);
        let (_, hf) = oracle_step(&fwd, &xs[0], &[0.0; 2], &[0.0; 2]);
        let (_, hb) = oracle_step(&bwd, &xs[0], &[0.0; 2], &[0.0; 2]);
        assert!((single[0][0] - (hf[0] + hb[0])).abs() < 1e-14);
    }

    #[test]
    fn palindrome_in_palindrome_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_cell(&mut rng, 3, 4);
        let xs = vec![
            vec![0.1, 0.4, -0.2],
            vec![0.9, -0.1, 0.3],
            vec![-0.7, 0.0, 0.5],
            vec![0.9, -0.1, 0.3],
            vec![0.1, 0.4, -0.2],
        ];
        let out = run_bi(&p, &p, &xs);
        for t in 0..5 {
            for j in 0..4 {
                assert!((out[t][j] - out[4 - t][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn empty_sequence_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_cell(&mut rng, 3, 4);
        let mut tape = Tape::new();
        let bound = bind_bi(&mut tape, &p, &p);
        assert_eq!(
            bidirectional_layer(&mut tape, &bound, "bi", &[], &[]).unwrap_err(),
            Error::EmptySequence
        );
    }

    #[test]
    fn padded_batch_equals_single_sequences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let fwd = random_cell(&mut rng, 2, 3);
        let bwd = random_cell(&mut rng, 2, 3);
        let a: Vec<Vec<f64>> = (0..5).map(|i| vec![0.1 * i as f64, -0.2]).collect();
        let b: Vec<Vec<f64>> = (0..3).map(|i| vec![0.3, 0.05 * i as f64]).collect();
        let mut tape = Tape::new();
        let bound = bind_bi(&mut tape, &fwd, &bwd);
        let inputs: Vec<NodeId> = (0..5)
            .map(|t| {
                let rb = if t < 3 { b[t].clone() } else { vec![0.0, 0.0] };
                let mut data = a[t].clone();
                data.extend(rb);
                tape.constant(Tensor::new(&[2, 2], data).unwrap())
            })
            .collect();
        let out = bidirectional_layer(&mut tape, &bound, "bi", &inputs, &[5, 3]).unwrap();
        let alone_a = run_bi(&fwd, &bwd, &a);
        let alone_b = run_bi(&fwd, &bwd, &b);
        for t in 0..5 {
            let v = tape.value(out.outputs[t]).data();
            for j in 0..3 {
                assert!((v[j] - alone_a[t][j]).abs() < 1e-12);
                if t < 3 {
                    assert!((v[3 + j] - alone_b[t][j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn lstm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let (d, m) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let p = random_cell(&mut rng, d, m);
            let mut point = BTreeMap::new();
            point.insert(String::from("cell.w_input"), p.w_input.clone());
            point.insert(String::from("cell.w_state"), p.w_state.clone());
            point.insert(String::from("cell.bias"), p.bias.clone());
            let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            point.insert(String::from("x"), Tensor::new(&[2, d], r(2 * d)).unwrap());
            point.insert(String::from("c"), Tensor::new(&[2, m], r(2 * m)).unwrap());
            point.insert(String::from("h"), Tensor::new(&[2, m], r(2 * m)).unwrap());
            let weights = Tensor::new(&[2, m], r(2 * m)).unwrap();
            let err = gradient_check(
                |tape, v| {
                    let bound = Bound::new(v.clone());
                    let s = LstmState { c: v["c"], h: v["h"] };
                    let out = lstm_cell(tape, &bound, "cell", v["x"], s, None)?;
                    let w = tape.constant(weights.clone());
                    let both = tape.add(out.c, out.h)?;
                    let weighted = tape.mul(both, w)?;
                    tape.sum(weighted)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "{err}");
        }
    }

    #[test]
    fn pyramid_lengths() {
        let cfg = EncoderConfig::speech(4, 41, vec![8, 8]);
        assert_eq!(cfg.output_length(16), 4);
        assert_eq!(cfg.output_length(13), 4);
        assert_eq!(EncoderConfig::text(4, 4).output_length(9), 9);
        assert_eq!(cfg.min_input_length(), 4);
    }
}
