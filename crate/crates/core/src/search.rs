//! Greedy decoding, beam search, language-model fusion and ensembles.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::batch::Source;
use crate::error::{Error, Result};
use crate::lm::TrigramModel;
use crate::model::{DecoderState, EncodedSource, Model};
use crate::tensor::Tensor;
use crate::text::{BOS, EOS};

/// Default length limit: twice the encoder output length plus ten.
pub fn default_max_len(model: &Model, source: &Source) -> usize {
    2 * model.config.encoder.output_length(source.len()) + 10
}

/// A decoded output.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    /// Output tokens without the final EOS.
    pub tokens: Vec<u32>,
    /// Cumulative fused log score (EOS included when finished).
    pub score: f64,
    /// One row of attention weights per decoding step, EOS step included.
    pub attention: Vec<Vec<f64>>,
    pub finished: bool,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Picks the most probable token at each step (lowest id on ties) until EOS
/// or `max_len` steps.
pub fn greedy_decode(model: &Model, source: &Source, max_len: usize) -> Result<Decoded> {
    let enc = model.encode_sources(&[source])?;
    let mut state = model.initial_state(&enc)?;
    let mut out = Decoded {
        tokens: Vec::new(),
        score: 0.0,
        attention: Vec::new(),
        finished: false,
    };
    let mut prev = BOS;
    for _ in 0..max_len {
        let step = model.step(&state, &[prev], &enc)?;
        let row = step.log_probs.row(0);
        let best = argmax(row);
        out.score += row[best];
        out.attention.push(step.weights.row(0).to_vec());
        if best as u32 == EOS {
            out.finished = true;
            break;
        }
        out.tokens.push(best as u32);
        state = step.state;
        prev = best as u32;
    }
    Ok(out)
}

/// Greedy decoding of several sources at once; finished rows are dropped
/// from the working batch. Returns the tokens of each source.
pub fn greedy_batch(model: &Model, sources: &[&Source], max_lens: &[usize]) -> Result<Vec<Vec<u32>>> {
    if sources.len() != max_lens.len() {
        return Err(Error::CountMismatch {
            what: "sources and length limits",
            left: sources.len(),
            right: max_lens.len(),
        });
    }
    let mut outputs = vec![Vec::new(); sources.len()];
    if sources.is_empty() {
        return Ok(outputs);
    }
    let mut enc = model.encode_sources(sources)?;
    let mut state = model.initial_state(&enc)?;
    let mut active: Vec<usize> = (0..sources.len()).filter(|&i| max_lens[i] > 0).collect();
    if active.len() < sources.len() {
        enc = enc.select_rows(&active)?;
        state = state.select_rows(&active)?;
    }
    let mut prev = vec![BOS; active.len()];
    let mut t = 0;
    while !active.is_empty() {
        let step = model.step(&state, &prev, &enc)?;
        let mut keep = Vec::new();
        let mut next_prev = Vec::new();
        for (r, &i) in active.iter().enumerate() {
            let best = argmax(step.log_probs.row(r)) as u32;
            if best == EOS {
                continue;
            }
            outputs[i].push(best);
            if t + 1 < max_lens[i] {
                keep.push(r);
                next_prev.push(best);
            }
        }
        t += 1;
        if keep.len() == active.len() {
            state = step.state;
        } else if !keep.is_empty() {
            state = step.state.select_rows(&keep)?;
            enc = enc.select_rows(&keep)?;
        }
        active = keep.iter().map(|&r| active[r]).collect();
        prev = next_prev;
    }
    Ok(outputs)
}

/// Log-linear combination weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionWeights {
    pub model_weights: Vec<f64>,
    pub lm_weight: f64,
}

impl FusionWeights {
    /// `1/k` for each of `models` models.
    pub fn uniform(models: usize, lm_weight: f64) -> Self {
        Self {
            model_weights: vec![1.0 / models as f64; models],
            lm_weight,
        }
    }

    pub fn validate(&self, models: usize) -> Result<()> {
        if self.model_weights.len() != models {
            return Err(Error::CountMismatch {
                what: "models and model weights",
                left: models,
                right: self.model_weights.len(),
            });
        }
        if self.model_weights.iter().any(|&w| !(w > 0.0)) || !(self.lm_weight >= 0.0) {
            return Err(Error::InvalidArgument {
                op: "beam_search",
                reason: "model weights must be positive and the LM weight nonnegative".into(),
            });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam_size: usize,
    pub max_len: usize,
    /// Rank finished hypotheses by score per token.
    pub length_normalize: bool,
    /// Apply the LM only to the final n-best list instead of during expansion.
    pub rescore_only: bool,
}

impl SearchConfig {
    pub fn new(beam_size: usize, max_len: usize) -> Self {
        Self {
            beam_size,
            max_len,
            length_normalize: false,
            rescore_only: false,
        }
    }
}

#[derive(Clone, Debug)]
struct Hypothesis {
    tokens: Vec<u32>,
    score: f64,
    attention: Vec<Vec<f64>>,
}

impl Hypothesis {
    fn context(&self) -> (u32, u32) {
        match self.tokens.as_slice() {
            [] => (BOS, BOS),
            [w] => (BOS, *w),
            [.., u, v] => (*u, *v),
        }
    }

    fn steps(&self, finished: bool) -> usize {
        self.tokens.len() + finished as usize
    }
}

struct Candidate {
    score: f64,
    parent: usize,
    step: f64,
    token: u32,
}

/// Orders by cumulative score (desc), then parent rank, step score (desc), token id.
fn candidate_order(a: &Candidate, b: &Candidate) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.parent.cmp(&b.parent))
        .then(b.step.total_cmp(&a.step))
        .then(a.token.cmp(&b.token))
}

fn fused_log_probs(
    weights: &FusionWeights,
    lm: Option<&TrigramModel>,
    outputs: &[Tensor],
    live: &[Hypothesis],
) -> Vec<Vec<f64>> {
    let vocab = outputs[0].last_dim();
    live.iter()
        .enumerate()
        .map(|(r, hyp)| {
            let mut row = vec![0.0; vocab];
            for (j, out) in outputs.iter().enumerate() {
                let w = weights.model_weights[j];
                for (acc, lp) in row.iter_mut().zip(out.row(r)) {
                    *acc += w * lp;
                }
            }
            if let Some(lm) = lm {
                let (u, v) = hyp.context();
                for (w, acc) in row.iter_mut().enumerate() {
                    *acc += weights.lm_weight * lm.log_prob(u, v, w as u32);
                }
            }
            row
        })
        .collect()
}

/// Beam search over the weighted sum of the models' log-probabilities and,
/// optionally, a language model.
pub fn beam_search(
    models: &[Model],
    source: &Source,
    lm: Option<&TrigramModel>,
    weights: &FusionWeights,
    config: &SearchConfig,
) -> Result<Decoded> {
    if models.is_empty() {
        return Err(Error::EmptyModelList);
    }
    if config.beam_size == 0 {
        return Err(Error::InvalidArgument {
            op: "beam_search",
            reason: "beam size must be positive".into(),
        });
    }
    weights.validate(models.len())?;
    let vocab = models[0].config.target_vocab;
    if models.iter().any(|m| m.config.target_vocab != vocab) {
        return Err(Error::InvalidArgument {
            op: "beam_search",
            reason: "models disagree on the target vocabulary".into(),
        });
    }
    let lm = lm.filter(|_| weights.lm_weight > 0.0);
    let fuse_lm = if config.rescore_only { None } else { lm };

    let encoded: Vec<EncodedSource> = models
        .iter()
        .map(|m| m.encode_sources(&[source]))
        .collect::<Result<_>>()?;
    let mut states: Vec<DecoderState> = models
        .iter()
        .zip(&encoded)
        .map(|(m, e)| m.initial_state(e))
        .collect::<Result<_>>()?;
    let mut live_enc = encoded.clone();
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        score: 0.0,
        attention: Vec::new(),
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();

    for _ in 0..config.max_len {
        let prev: Vec<u32> = live
            .iter()
            .map(|h| h.tokens.last().copied().unwrap_or(BOS))
            .collect();
        let mut outputs = Vec::with_capacity(models.len());
        let mut next_states = Vec::with_capacity(models.len());
        let mut attention = None;
        for (j, model) in models.iter().enumerate() {
            let step = model.step(&states[j], &prev, &live_enc[j])?;
            outputs.push(step.log_probs);
            next_states.push(step.state);
            if j == 0 {
                attention = Some(step.weights);
            }
        }
        let attention = attention.expect("at least one model");
        let fused = fused_log_probs(weights, fuse_lm, &outputs, &live);
        let mut candidates = Vec::with_capacity(live.len() * vocab);
        for (parent, row) in fused.iter().enumerate() {
            for (token, &step) in row.iter().enumerate() {
                candidates.push(Candidate {
                    score: live[parent].score + step,
                    parent,
                    step,
                    token: token as u32,
                });
            }
        }
        let keep = config.beam_size.min(candidates.len());
        if keep < candidates.len() {
            candidates.select_nth_unstable_by(keep - 1, candidate_order);
            candidates.truncate(keep);
        }
        candidates.sort_by(candidate_order);

        let mut next_live = Vec::new();
        let mut parents = Vec::new();
        for c in candidates {
            let parent = &live[c.parent];
            let mut hyp = Hypothesis {
                tokens: parent.tokens.clone(),
                score: c.score,
                attention: parent.attention.clone(),
            };
            hyp.attention.push(attention.row(c.parent).to_vec());
            if c.token == EOS {
                completed.push(hyp);
            } else {
                hyp.tokens.push(c.token);
                next_live.push(hyp);
                parents.push(c.parent);
            }
        }
        live = next_live;
        if live.is_empty() {
            break;
        }
        for j in 0..models.len() {
            states[j] = next_states[j].select_rows(&parents)?;
            live_enc[j] = encoded[j].select_rows(&vec![0; parents.len()])?;
        }
        if !config.length_normalize {
            let best_done = completed
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
            if best_done >= best_live {
                break;
            }
        }
    }

    let finished = !completed.is_empty();
    let mut pool: Vec<(Hypothesis, bool)> = if finished {
        completed.into_iter().map(|h| (h, true)).collect()
    } else {
        live.into_iter().map(|h| (h, false)).collect()
    };
    if config.rescore_only {
        if let Some(lm) = lm {
            for (h, done) in pool.iter_mut() {
                h.score += weights.lm_weight * rescore_lm(lm, &h.tokens, *done);
            }
        }
    }
    let rank = |h: &Hypothesis, done: bool| {
        if config.length_normalize {
            h.score / h.steps(done).max(1) as f64
        } else {
            h.score
        }
    };
    let mut best = 0;
    for i in 1..pool.len() {
        if rank(&pool[i].0, pool[i].1) > rank(&pool[best].0, pool[best].1) {
            best = i;
        }
    }
    let (h, done) = pool.swap_remove(best);
    Ok(Decoded {
        tokens: h.tokens,
        score: h.score,
        attention: h.attention,
        finished: done,
    })
}

fn rescore_lm(lm: &TrigramModel, tokens: &[u32], finished: bool) -> f64 {
    if finished {
        lm.sequence_log_prob(tokens)
    } else {
        let (mut u, mut v) = (BOS, BOS);
        let mut total = 0.0;
        for &w in tokens {
            total += lm.log_prob(u, v, w);
            (u, v) = (v, w);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::train_trigram;
    use crate::model::ModelConfig;
    use alloc::string::String;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_model(seed: u64, vocab: usize, scale: f64) -> Model {
        let mut cfg = ModelConfig::text(9, vocab, 4, 3);
        cfg.dropout = 0.0;
        let mut model = Model::init(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let names: Vec<String> = model.params.names().iter().map(|s| String::from(*s)).collect();
        for n in names {
            for x in model.params.get_mut(&n).unwrap().data_mut() {
                *x = rng.gen_range(-scale..scale);
            }
        }
        model
    }

    fn random_source(rng: &mut ChaCha8Rng) -> Source {
        Source::Tokens((0..rng.gen_range(1..6)).map(|_| rng.gen_range(4..9)).collect())
    }

    #[test]
    fn biased_eos_gives_empty_output() {
        let mut model = random_model(1, 7, 0.5);
        model.params.get_mut("dec.b_out").unwrap().data_mut()[EOS as usize] = 100.0;
        let d = greedy_decode(&model, &Source::Tokens(vec![4, 5]), 10).unwrap();
        assert!(d.tokens.is_empty() && d.finished);
        assert_eq!(d.attention.len(), 1);
    }

    #[test]
    fn greedy_is_deterministic_and_bounded() {
        let model = random_model(2, 7, 1.0);
        let src = Source::Tokens(vec![4, 8, 6]);
        let a = greedy_decode(&model, &src, 6).unwrap();
        assert_eq!(a, greedy_decode(&model, &src, 6).unwrap());
        assert!(a.attention.len() <= 6);
        for row in &a.attention {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batched_greedy_matches_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let model = random_model(seed, 8, 1.5);
            let sources: Vec<Source> = (0..5).map(|_| random_source(&mut rng)).collect();
            let refs: Vec<&Source> = sources.iter().collect();
            let lens: Vec<usize> = (0..5).map(|i| 3 + i).collect();
            let batched = greedy_batch(&model, &refs, &lens).unwrap();
            for (i, s) in sources.iter().enumerate() {
                assert_eq!(batched[i], greedy_decode(&model, s, lens[i]).unwrap().tokens);
            }
        }
    }

    #[test]
    fn beam_one_equals_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..100 {
            let model = random_model(100 + seed, 8, 1.5);
            let src = random_source(&mut rng);
            let g = greedy_decode(&model, &src, 8).unwrap();
            let b = beam_search(
                core::slice::from_ref(&model),
                &src,
                None,
                &FusionWeights::uniform(1, 0.0),
                &SearchConfig::new(1, 8),
            )
            .unwrap();
            assert_eq!(g, b, "seed {seed}");
        }
    }

    #[test]
    fn zero_lm_weight_and_identical_ensembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lm = train_trigram(&[vec![4, 5, 6], vec![6, 5]], 8).unwrap();
        for seed in 0..20 {
            let model = random_model(200 + seed, 8, 1.5);
            let src = random_source(&mut rng);
            let cfg = SearchConfig::new(4, 7);
            let one = core::slice::from_ref(&model);
            let plain = beam_search(one, &src, None, &FusionWeights::uniform(1, 0.0), &cfg).unwrap();
            let zero = beam_search(one, &src, Some(&lm), &FusionWeights::uniform(1, 0.0), &cfg).unwrap();
            assert_eq!(plain, zero);
            let five = vec![model.clone(); 5];
            let ens = beam_search(&five, &src, None, &FusionWeights::uniform(5, 0.0), &cfg).unwrap();
            assert_eq!(plain.tokens, ens.tokens);
        }
    }

    /// Every output of up to `max_len` steps with its score.
    fn exhaustive(model: &Model, src: &Source, max_len: usize) -> (Vec<u32>, f64) {
        let enc = model.encode_sources(&[src]).unwrap();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack = vec![(Vec::<u32>::new(), 0.0, model.initial_state(&enc).unwrap())];
        while let Some((tokens, score, state)) = stack.pop() {
            let prev = tokens.last().copied().unwrap_or(BOS);
            let step = model.step(&state, &[prev], &enc).unwrap();
            for (w, &lp) in step.log_probs.row(0).iter().enumerate() {
                let s = score + lp;
                if w as u32 == EOS {
                    if s > best.1 {
                        best = (tokens.clone(), s);
                    }
                } else if tokens.len() + 1 < max_len {
                    let mut t = tokens.clone();
                    t.push(w as u32);
                    stack.push((t, s, step.state.clone()));
                }
            }
        }
        best
    }

    #[test]
    fn wide_beam_equals_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for seed in 0..10 {
            let model = random_model(300 + seed, 5, 2.0);
            let src = random_source(&mut rng);
            let (tokens, score) = exhaustive(&model, &src, 3);
            let one = core::slice::from_ref(&model);
            let b = beam_search(
                one,
                &src,
                None,
                &FusionWeights::uniform(1, 0.0),
                &SearchConfig::new(125, 3),
            )
            .unwrap();
            if score.is_finite() {
                assert_eq!(b.tokens, tokens);
                assert!((b.score - score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scores_never_increase() {
        let model = random_model(7, 8, 1.0);
        let lm = train_trigram(&[vec![4, 5, 6]], 8).unwrap();
        let mut cfg = SearchConfig::new(3, 6);
        cfg.length_normalize = true;
        let d = beam_search(
            core::slice::from_ref(&model),
            &Source::Tokens(vec![4, 5]),
            Some(&lm),
            &FusionWeights::uniform(1, 0.5),
            &cfg,
        )
        .unwrap();
        assert!(d.score <= 0.0);
    }

    #[test]
    fn rescoring_applies_the_lm_after_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lm = train_trigram(&[vec![7, 7, 7]], 8).unwrap();
        for seed in 0..10 {
            let model = random_model(400 + seed, 8, 1.5);
            let src = random_source(&mut rng);
            let one = core::slice::from_ref(&model);
            let mut cfg = SearchConfig::new(4, 6);
            cfg.rescore_only = true;
            let d = beam_search(one, &src, Some(&lm), &FusionWeights::uniform(1, 1.0), &cfg).unwrap();
            let plain = beam_search(one, &src, None, &FusionWeights::uniform(1, 0.0), &cfg).unwrap();
            let lm_part = d.score - rescore_lm(&lm, &d.tokens, d.finished);
            assert!(lm_part <= plain.score + 1e-12);
        }
    }

    #[test]
    fn argument_errors() {
        let model = random_model(9, 7, 1.0);
        let src = Source::Tokens(vec![4]);
        let cfg = SearchConfig::new(2, 4);
        assert_eq!(
            beam_search(&[], &src, None, &FusionWeights::uniform(1, 0.0), &cfg).unwrap_err(),
            Error::EmptyModelList
        );
        let one = core::slice::from_ref(&model);
        assert!(beam_search(one, &src, None, &FusionWeights::uniform(2, 0.0), &cfg).is_err());
        assert!(beam_search(
            one,
            &src,
            None,
            &FusionWeights::uniform(1, 0.0),
            &SearchConfig::new(0, 4)
        )
        .is_err());
    }

    #[test]
    fn wider_beams_rarely_lose() {
        // Not a theorem; counts how often a one-wider beam finds a worse winner.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut worse = 0;
        for seed in 0..50 {
            let model = random_model(500 + seed, 7, 2.0);
            let src = random_source(&mut rng);
            let k = rng.gen_range(1..5);
            let one = core::slice::from_ref(&model);
            let w = FusionWeights::uniform(1, 0.0);
            let a = beam_search(one, &src, None, &w, &SearchConfig::new(k, 6)).unwrap();
            let b = beam_search(one, &src, None, &w, &SearchConfig::new(k + 1, 6)).unwrap();
            if b.finished == a.finished && b.score < a.score - 1e-12 {
                worse += 1;
            }
        }
        std::println!("wider beam lost on {worse}/50");
        assert_eq!(worse, 0);
    }
}
