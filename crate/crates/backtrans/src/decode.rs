//! Inference: greedy decoding, beam search, and temperature sampling.
//!
//! All strategies run over a [`StepScorer`], which yields next-token
//! log-probabilities for a prefix. The production scorer wraps a
//! [`Transformer`]; tests drive the same search code with table-driven toy
//! scorers whose probabilities are known exactly.

use crate::data::{BOS_ID, EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Beam,
    Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub max_len: usize,
    /// Length-penalty exponent: hypotheses are ranked by logprob / len^alpha.
    pub length_penalty: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Optional sampling truncation; both default off (full distribution).
    #[serde(default)]
    pub top_k: Option<usize>,
    #[serde(default)]
    pub top_p: Option<f64>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            mode: DecodeMode::Beam,
            beam_size: 4,
            max_len: 32,
            length_penalty: 0.6,
            temperature: 1.0,
            seed: 0,
            top_k: None,
            top_p: None,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max length must be at least 1".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(())
    }
}

/// A decoded sequence with the per-step model probabilities of its tokens
/// (the predicted-translation-probability inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    /// log P(token_i | prefix) for each emitted token, untempered.
    pub step_logprobs: Vec<f64>,
    /// log P(end | full sequence); None when decoding hit the length cap.
    pub end_logprob: Option<f64>,
    pub truncated: bool,
}

impl Hypothesis {
    /// Sentence log-probability of the emitted tokens: exactly the sum of
    /// the per-step values.
    pub fn sentence_logprob(&self) -> f64 {
        self.step_logprobs.iter().sum()
    }

    /// Sequence log-probability including the end transition.
    pub fn full_logprob(&self) -> f64 {
        self.sentence_logprob() + self.end_logprob.unwrap_or(0.0)
    }

    /// Length-penalized score used for ranking.
    pub fn score(&self, length_penalty: f64) -> f64 {
        let steps = (self.tokens.len() + usize::from(self.end_logprob.is_some())).max(1);
        self.full_logprob() / (steps as f64).powf(length_penalty)
    }
}

/// Next-token distribution source.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary for the next position after
    /// `prefix` (content tokens only, no framing).
    fn step_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Transformer-backed scorer: encodes the source once, then scores target
/// prefixes with dropout off.
pub struct ModelScorer<'m> {
    model: &'m Transformer,
    enc_out: Tensor,
    src_len: usize,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Transformer, src: &[usize]) -> Result<Self> {
        let mut bound = model.bind(false);
        let mut rng = RngStream::new(0, 0); // unused: inference applies no dropout
        let enc = bound.encode(src, None, &mut rng)?;
        Ok(ModelScorer {
            model,
            enc_out: bound.value(enc).clone(),
            src_len: src.len(),
        })
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config.tgt_vocab
    }

    fn step_logprobs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let mut bound = self.model.bind(false);
        let mut rng = RngStream::new(0, 0);
        let enc = bound.graph.leaf(self.enc_out.clone());
        let lp = bound.decode_logprobs(enc, self.src_len, prefix, None, &mut rng)?;
        let t = bound.value(lp);
        Ok(t.row(t.shape()[0] - 1).to_vec())
    }
}

fn emittable(token: usize) -> bool {
    token != PAD_ID && token != BOS_ID
}

/// Greedy decoding: argmax token per step (ties to the lower id), stopping
/// at the end marker or the length cap.
pub fn greedy_decode(scorer: &dyn StepScorer, max_len: usize) -> Result<Hypothesis> {
    let mut tokens = Vec::new();
    let mut step_logprobs = Vec::new();
    for _ in 0..max_len {
        let lps = scorer.step_logprobs(&tokens)?;
        let (best, best_lp) = lps
            .iter()
            .enumerate()
            .filter(|(t, _)| emittable(*t))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (t, &lp)| {
                if lp > acc.1 {
                    (t, lp)
                } else {
                    acc
                }
            });
        if best == EOS_ID {
            return Ok(Hypothesis {
                tokens,
                step_logprobs,
                end_logprob: Some(best_lp),
                truncated: false,
            });
        }
        tokens.push(best);
        step_logprobs.push(best_lp);
    }
    Ok(Hypothesis {
        tokens,
        step_logprobs,
        end_logprob: None,
        truncated: true,
    })
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<usize>,
    step_logprobs: Vec<f64>,
    cum: f64,
}

/// Beam search over log-probabilities with length-penalty rescoring. Ties
/// break toward the lexicographically smaller token sequence.
pub fn beam_decode(
    scorer: &dyn StepScorer,
    beam_size: usize,
    max_len: usize,
    length_penalty: f64,
) -> Result<Hypothesis> {
    if beam_size == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    let mut alive = vec![Beam {
        tokens: Vec::new(),
        step_logprobs: Vec::new(),
        cum: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        // Expand every live hypothesis by every emittable token.
        let mut candidates: Vec<(Beam, usize, f64)> = Vec::new();
        for beam in &alive {
            let lps = scorer.step_logprobs(&beam.tokens)?;
            for (tok, &lp) in lps.iter().enumerate() {
                if emittable(tok) {
                    candidates.push((beam.clone(), tok, lp));
                }
            }
        }
        candidates.sort_by(|a, b| {
            let sa = a.0.cum + a.2;
            let sb = b.0.cum + b.2;
            sb.partial_cmp(&sa)
                .unwrap()
                .then_with(|| (&a.0.tokens, a.1).cmp(&(&b.0.tokens, b.1)))
        });

        alive = Vec::with_capacity(beam_size);
        for (beam, tok, lp) in candidates.into_iter().take(beam_size) {
            if tok == EOS_ID {
                finished.push(Hypothesis {
                    tokens: beam.tokens,
                    step_logprobs: beam.step_logprobs,
                    end_logprob: Some(lp),
                    truncated: false,
                });
            } else {
                let mut next = beam;
                next.tokens.push(tok);
                next.step_logprobs.push(lp);
                next.cum += lp;
                alive.push(next);
            }
        }
        if alive.is_empty() {
            break;
        }
    }

    let best_of = |hyps: Vec<Hypothesis>| {
        hyps.into_iter().min_by(|a, b| {
            b.score(length_penalty)
                .partial_cmp(&a.score(length_penalty))
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        })
    };
    if let Some(best) = best_of(finished) {
        return Ok(best);
    }
    // Nothing finished within the cap: best live prefix, flagged truncated.
    let best = best_of(
        alive
            .into_iter()
            .map(|b| Hypothesis {
                tokens: b.tokens,
                step_logprobs: b.step_logprobs,
                end_logprob: None,
                truncated: true,
            })
            .collect(),
    )
    .expect("beam never empties before the first step");
    Ok(best)
}

/// Ancestral sampling from softmax(logits/temperature), seeded and
/// reproducible. Reported step probabilities are the untempered model
/// probabilities of the sampled tokens.
pub fn sample_decode(
    scorer: &dyn StepScorer,
    config: &DecodeConfig,
    rng: &mut RngStream,
) -> Result<Hypothesis> {
    config.validate()?;
    let mut tokens = Vec::new();
    let mut step_logprobs = Vec::new();
    for _ in 0..config.max_len {
        let lps = scorer.step_logprobs(&tokens)?;
        let tok = sample_token(&lps, config, rng);
        if tok == EOS_ID {
            return Ok(Hypothesis {
                tokens,
                step_logprobs,
                end_logprob: Some(lps[EOS_ID]),
                truncated: false,
            });
        }
        step_logprobs.push(lps[tok]);
        tokens.push(tok);
    }
    Ok(Hypothesis {
        tokens,
        step_logprobs,
        end_logprob: None,
        truncated: true,
    })
}

fn sample_token(logprobs: &[f64], config: &DecodeConfig, rng: &mut RngStream) -> usize {
    // Tempered weights over emittable tokens, max-shifted for stability.
    let shift = logprobs
        .iter()
        .enumerate()
        .filter(|(t, _)| emittable(*t))
        .map(|(_, &lp)| lp / config.temperature)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<(usize, f64)> = logprobs
        .iter()
        .enumerate()
        .filter(|(t, _)| emittable(*t))
        .map(|(t, &lp)| (t, (lp / config.temperature - shift).exp()))
        .collect();

    if let Some(k) = config.top_k {
        weights.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        weights.truncate(k.max(1));
    }
    if let Some(p) = config.top_p {
        weights.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let mut cum = 0.0;
        let mut keep = 0;
        for (i, (_, w)) in weights.iter().enumerate() {
            cum += w / total;
            keep = i + 1;
            if cum >= p {
                break;
            }
        }
        weights.truncate(keep.max(1));
    }
    // Keep token-id order for a stable cumulative scan.
    weights.sort_by_key(|(t, _)| *t);

    let total: f64 = weights.iter().map(|(_, w)| w).sum();
    let u = rng.uniform() * total;
    let mut cum = 0.0;
    for (t, w) in &weights {
        cum += w;
        if u < cum {
            return *t;
        }
    }
    weights.last().expect("nonempty vocabulary").0
}

/// Decode one source sentence with the configured strategy.
pub fn decode(
    model: &Transformer,
    src: &[usize],
    config: &DecodeConfig,
    rng: &mut RngStream,
) -> Result<Hypothesis> {
    config.validate()?;
    let scorer = ModelScorer::new(model, src)?;
    match config.mode {
        DecodeMode::Greedy => greedy_decode(&scorer, config.max_len),
        DecodeMode::Beam => beam_decode(&scorer, config.beam_size, config.max_len, config.length_penalty),
        DecodeMode::Sample => sample_decode(&scorer, config, rng),
    }
}
