//! Monte Carlo Dropout uncertainty scoring.
//!
//! For a fixed (source, prediction) pair, run K stochastic forward passes
//! with dropout active, keeping both sequences fixed (teacher forcing; no
//! decoding happens here). Each pass yields per-token probabilities of the
//! prediction and their product as the sentence probability, all held in log
//! space. Expectations and variances of those probability samples quantify
//! how confident the model was in its prediction.

use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::rng::RngStream;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// K stochastic-pass probability samples for one (source, prediction) pair.
/// Log values are authoritative; probabilities are derived by exponentiation.
#[derive(Debug, Clone, PartialEq)]
pub struct McSampleSet {
    /// K per-pass sentence log-probabilities.
    pub sentence_logprobs: Vec<f64>,
    /// K rows of per-token log-probabilities; row k sums to
    /// `sentence_logprobs[k]` exactly.
    pub word_logprobs: Vec<Vec<f64>>,
}

impl McSampleSet {
    /// Assemble from per-pass word log-probabilities; sentence values are
    /// the row sums, so the product invariant holds by construction.
    pub fn from_word_logprobs(word_logprobs: Vec<Vec<f64>>) -> Result<Self> {
        if word_logprobs.is_empty() {
            return Err(Error::Config("sample set needs K >= 1".into()));
        }
        let width = word_logprobs[0].len();
        if word_logprobs.iter().any(|r| r.len() != width) {
            return Err(Error::Config("ragged word probability rows".into()));
        }
        let sentence_logprobs = word_logprobs.iter().map(|r| r.iter().sum()).collect();
        Ok(McSampleSet {
            sentence_logprobs,
            word_logprobs,
        })
    }

    pub fn k(&self) -> usize {
        self.sentence_logprobs.len()
    }

    pub fn token_count(&self) -> usize {
        self.word_logprobs.first().map_or(0, |r| r.len())
    }

    pub fn sentence_probs(&self) -> Vec<f64> {
        self.sentence_logprobs.iter().map(|lp| lp.exp()).collect()
    }
}

/// Expectations and variances of the sampled translation probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyStats {
    pub sentence_expectation: f64,
    pub sentence_variance: f64,
    pub token_expectations: Vec<f64>,
    pub token_variances: Vec<f64>,
}

/// Run K independent stochastic passes over the fixed pair. Pass k draws its
/// dropout masks from `rng.substream(k)`, so the K passes can be evaluated
/// in any order (or in parallel) with identical results.
pub fn mc_forward(
    model: &Transformer,
    src: &[usize],
    prediction: &[usize],
    dropout: f64,
    k: usize,
    rng: &RngStream,
) -> Result<McSampleSet> {
    if k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if prediction.is_empty() {
        return Err(Error::Corpus("cannot score an empty prediction".into()));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::Config(format!("dropout {dropout} not in [0,1)")));
    }
    let mut scoring_model = model.clone();
    scoring_model.config.dropout = dropout;

    let word_logprobs: Vec<Vec<f64>> = (0..k)
        .into_par_iter()
        .map(|pass| {
            let mut pass_rng = rng.substream(pass as u64);
            single_pass(&scoring_model, src, prediction, &mut pass_rng)
        })
        .collect::<Result<_>>()?;
    McSampleSet::from_word_logprobs(word_logprobs)
}

/// One teacher-forced stochastic pass: per-token log P(x̂_i | src, x̂_<i).
/// Only the prediction's own positions count; the end-marker transition is
/// not part of the sentence probability.
fn single_pass(
    model: &Transformer,
    src: &[usize],
    prediction: &[usize],
    rng: &mut RngStream,
) -> Result<Vec<f64>> {
    let mut bound = model.bind(true);
    let (lp, gold) = bound.teacher_forced(src, prediction, None, rng)?;
    let t = bound.value(lp);
    Ok((0..prediction.len()).map(|i| t.at(i, gold[i])).collect())
}

/// Arithmetic mean of probability samples (mean of exponentiated values, not
/// the exponentiated mean of logs). Sentence first, then per-token columns.
pub fn expectation(samples: &McSampleSet) -> (f64, Vec<f64>) {
    let sent = mean_probs(&samples.sentence_logprobs, 1.0);
    let tokens = (0..samples.token_count())
        .map(|i| {
            let col: Vec<f64> = samples.word_logprobs.iter().map(|r| r[i]).collect();
            mean_probs(&col, 1.0)
        })
        .collect();
    (sent, tokens)
}

/// Population variance (divide by K): mean of squared samples minus squared
/// mean, clamped into [0, expectation] against floating-point cancellation.
pub fn variance(samples: &McSampleSet) -> (f64, Vec<f64>) {
    let sent = variance_probs(&samples.sentence_logprobs, 1.0);
    let tokens = (0..samples.token_count())
        .map(|i| {
            let col: Vec<f64> = samples.word_logprobs.iter().map(|r| r[i]).collect();
            variance_probs(&col, 1.0)
        })
        .collect();
    (sent, tokens)
}

/// Full statistics for one sample set. With `length_normalize` the sentence
/// probability is replaced by its per-token geometric mean before
/// aggregation (off by default everywhere; raw products are the paper-exact
/// reading).
pub fn stats(samples: &McSampleSet, length_normalize: bool) -> UncertaintyStats {
    let norm = if length_normalize {
        samples.token_count().max(1) as f64
    } else {
        1.0
    };
    let sentence_expectation = mean_probs(&samples.sentence_logprobs, norm);
    let sentence_variance = variance_probs(&samples.sentence_logprobs, norm);
    let (_, token_expectations) = expectation(samples);
    let (_, token_variances) = variance(samples);
    UncertaintyStats {
        sentence_expectation,
        sentence_variance,
        token_expectations,
        token_variances,
    }
}

/// Sorted summation so aggregation is exactly permutation-invariant in the
/// K samples; a constant sample set short-circuits to the constant so the
/// zero-dropout case reproduces the deterministic probability bit for bit.
fn sorted_probs(logprobs: &[f64], norm: f64) -> Vec<f64> {
    let mut probs: Vec<f64> = logprobs.iter().map(|lp| (lp / norm).exp()).collect();
    probs.sort_by(|a, b| a.partial_cmp(b).expect("finite probabilities"));
    probs
}

fn mean_probs(logprobs: &[f64], norm: f64) -> f64 {
    let probs = sorted_probs(logprobs, norm);
    if probs[0] == probs[probs.len() - 1] {
        return probs[0];
    }
    probs.iter().sum::<f64>() / probs.len() as f64
}

fn variance_probs(logprobs: &[f64], norm: f64) -> f64 {
    let probs = sorted_probs(logprobs, norm);
    if probs[0] == probs[probs.len() - 1] {
        return 0.0;
    }
    let k = probs.len() as f64;
    let mean = probs.iter().sum::<f64>() / k;
    let mean_sq = probs.iter().map(|p| p * p).sum::<f64>() / k;
    (mean_sq - mean * mean).clamp(0.0, mean)
}

/// One line of the score dump (JSON-lines, one record per pair).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UncertaintyRecord {
    pub pair_id: usize,
    pub k: usize,
    pub sentence_expectation: f64,
    pub sentence_variance: f64,
    pub token_expectations: Vec<f64>,
    pub token_variances: Vec<f64>,
    /// Sentence-level predicted translation probability from decode time,
    /// when the pair carried decode probabilities.
    pub ptp: Option<f64>,
}

impl UncertaintyRecord {
    pub fn new(pair_id: usize, samples: &McSampleSet, ptp: Option<f64>) -> Self {
        let s = stats(samples, false);
        UncertaintyRecord {
            pair_id,
            k: samples.k(),
            sentence_expectation: s.sentence_expectation,
            sentence_variance: s.sentence_variance,
            token_expectations: s.token_expectations,
            token_variances: s.token_variances,
            ptp,
        }
    }
}
