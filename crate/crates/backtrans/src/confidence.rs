//! Confidence measures over uncertainty statistics.
//!
//! Four measures at both sentence and word level:
//!
//! * `PTP` — the translation probability recorded during standard decoding;
//! * `EXP` — the Monte Carlo expectation of the translation probability;
//! * `VAR` — `(1 - Var)^α`;
//! * `CEV` — `(1 - Var/E)^β`, combining expectation and variance.
//!
//! Word-level measures mirror the sentence formulas token-wise. Every
//! measure lands in [0, 1].


use crate::error::{Error, Result};
use crate::model::Transformer;
use crate::rng::RngStream;
use crate::uncertainty::{mc_forward, stats, UncertaintyStats};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Measure {
    Ptp,
    Exp,
    Var,
    Cev,
}

impl std::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ptp" => Ok(Measure::Ptp),
            "exp" => Ok(Measure::Exp),
            "var" => Ok(Measure::Var),
            "cev" => Ok(Measure::Cev),
            other => Err(Error::Config(format!("unknown measure {other:?}"))),
        }
    }
}

impl std::fmt::Display for Measure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Measure::Ptp => "ptp",
            Measure::Exp => "exp",
            Measure::Var => "var",
            Measure::Cev => "cev",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MeasureConfig {
    pub measure: Measure,
    /// Exponent for VAR; widens the gap between confidence values.
    pub alpha: f64,
    /// Exponent for CEV.
    pub beta: f64,
    /// Replace the sentence probability by its per-token geometric mean
    /// before aggregation (study aid; off by default).
    #[serde(default)]
    pub length_normalize: bool,
}

impl MeasureConfig {
    pub fn new(measure: Measure) -> Self {
        MeasureConfig {
            measure,
            alpha: 2.0,
            beta: 2.0,
            length_normalize: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config(format!(
                "alpha and beta must be positive, got {} and {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// One scored pair: the contract between scoring and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub pair_id: usize,
    pub measure: Measure,
    pub alpha: f64,
    pub beta: f64,
    pub sentence_confidence: f64,
    pub word_confidences: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Sentence and word confidences from decode-time probabilities (Eq. 9 path:
/// no sampling involved).
pub fn ptp(step_logprobs: &[f64]) -> (f64, Vec<f64>) {
    let sentence = step_logprobs.iter().sum::<f64>().exp();
    let words = step_logprobs.iter().map(|lp| lp.exp()).collect();
    (sentence, words)
}

/// The expectation is the confidence.
pub fn exp_confidence(stats: &UncertaintyStats) -> (f64, Vec<f64>) {
    (
        stats.sentence_expectation,
        stats.token_expectations.clone(),
    )
}

/// `(1 - Var)^α`.
pub fn var_confidence(stats: &UncertaintyStats, alpha: f64) -> (f64, Vec<f64>) {
    let f = |v: f64| (1.0 - v).powf(alpha);
    (
        f(stats.sentence_variance),
        stats.token_variances.iter().map(|&v| f(v)).collect(),
    )
}

/// `(1 - Var/E)^β`. A zero expectation (total underflow) maps to zero
/// confidence: a prediction the model gives no probability deserves none.
pub fn cev_confidence(stats: &UncertaintyStats, beta: f64) -> (f64, Vec<f64>) {
    let f = |var: f64, e: f64| {
        if e == 0.0 {
            0.0
        } else {
            (1.0 - var / e).max(0.0).powf(beta)
        }
    };
    (
        f(stats.sentence_variance, stats.sentence_expectation),
        stats
            .token_variances
            .iter()
            .zip(&stats.token_expectations)
            .map(|(&v, &e)| f(v, e))
            .collect(),
    )
}

/// Whether the measure requires Monte Carlo sampling.
pub fn needs_sampling(measure: Measure) -> bool {
    !matches!(measure, Measure::Ptp)
}

/// Score one already-encoded synthetic pair. `src_ids` is what the reverse
/// model reads, `pred_ids` the prediction it is scored on.
pub fn score_encoded_pair(
    model: &Transformer,
    src_ids: &[usize],
    pred_ids: &[usize],
    decode_logprobs: Option<&[f64]>,
    pair_id: usize,
    cfg: &MeasureConfig,
    k: usize,
    dropout: f64,
    rng: &RngStream,
) -> Result<ConfidenceRecord> {
    cfg.validate()?;
    let mut record = ConfidenceRecord {
        pair_id,
        measure: cfg.measure,
        alpha: cfg.alpha,
        beta: cfg.beta,
        sentence_confidence: 0.0,
        word_confidences: Vec::new(),
        flags: Vec::new(),
    };
    if pred_ids.is_empty() {
        record.flags.push("empty_prediction".into());
        return Ok(record);
    }

    let (sentence, words) = if cfg.measure == Measure::Ptp {
        let lps = decode_logprobs.ok_or_else(|| {
            Error::Config(format!(
                "pair {pair_id} has no decode probabilities; PTP needs them"
            ))
        })?;
        ptp(lps)
    } else {
        let samples = mc_forward(model, src_ids, pred_ids, dropout, k, rng)?;
        let s = stats(&samples, cfg.length_normalize);
        if s.sentence_expectation == 0.0 && cfg.measure == Measure::Cev {
            record.flags.push("zero_expectation".into());
        }
        match cfg.measure {
            Measure::Exp => exp_confidence(&s),
            Measure::Var => var_confidence(&s, cfg.alpha),
            Measure::Cev => cev_confidence(&s, cfg.beta),
            Measure::Ptp => unreachable!(),
        }
    };
    record.sentence_confidence = sentence;
    record.word_confidences = words;
    Ok(record)
}

/// Encoded synthetic pair ready for scoring.
pub struct ScorablePair {
    pub pair_id: usize,
    /// Token ids the reverse model reads (the authentic side).
    pub src_ids: Vec<usize>,
    /// Token ids of the prediction being scored.
    pub pred_ids: Vec<usize>,
    pub decode_logprobs: Option<Vec<f64>>,
}

/// Score a corpus of encoded pairs; parallel across pairs, deterministic:
/// pair i always scores under `rng.substream(i)`.
pub fn score_corpus(
    model: &Transformer,
    pairs: &[ScorablePair],
    cfg: &MeasureConfig,
    k: usize,
    dropout: f64,
    rng: &RngStream,
) -> Result<Vec<ConfidenceRecord>> {
    cfg.validate()?;
    pairs
        .par_iter()
        .map(|p| {
            let pair_rng = rng.substream(p.pair_id as u64);
            score_encoded_pair(
                model,
                &p.src_ids,
                &p.pred_ids,
                p.decode_logprobs.as_deref(),
                p.pair_id,
                cfg,
                k,
                dropout,
                &pair_rng,
            )
        })
        .collect()
}

/// Append-only JSON-lines scoring with resume: pair ids already present in
/// the output file are skipped, so an interrupted run picks up where it
/// stopped and still produces identical records.
pub fn score_corpus_to_file(
    model: &Transformer,
    pairs: &[ScorablePair],
    cfg: &MeasureConfig,
    k: usize,
    dropout: f64,
    rng: &RngStream,
    path: &Path,
) -> Result<usize> {
    let done: BTreeSet<usize> = if path.exists() {
        read_records(path)?.iter().map(|r| r.pair_id).collect()
    } else {
        BTreeSet::new()
    };
    let todo: Vec<&ScorablePair> = pairs.iter().filter(|p| !done.contains(&p.pair_id)).collect();

    let records: Vec<ConfidenceRecord> = todo
        .par_iter()
        .map(|p| {
            let pair_rng = rng.substream(p.pair_id as u64);
            score_encoded_pair(
                model,
                &p.src_ids,
                &p.pred_ids,
                p.decode_logprobs.as_deref(),
                p.pair_id,
                cfg,
                k,
                dropout,
                &pair_rng,
            )
        })
        .collect::<Result<_>>()?;

    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in &records {
        let line = serde_json::to_string(r)?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(records.len())
}

pub fn read_records(path: &Path) -> Result<Vec<ConfidenceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::uncertainty::McSampleSet;
    use proptest::prelude::*;

    fn stats_of(e: f64, v: f64) -> UncertaintyStats {
        UncertaintyStats {
            sentence_expectation: e,
            sentence_variance: v,
            token_expectations: vec![e],
            token_variances: vec![v],
        }
    }

    #[test]
    fn ptp_is_the_product() {
        let (sent, words) = ptp(&[0.5f64.ln(), 0.5f64.ln()]);
        assert!((sent - 0.25).abs() < 1e-12);
        assert!((words[0] - 0.5).abs() < 1e-12);

        let (certain, _) = ptp(&[0.0, 0.0, 0.0]);
        assert_eq!(certain, 1.0);
    }

    #[test]
    fn exp_returns_expectation() {
        let s = stats_of(0.4, 0.1);
        assert_eq!(exp_confidence(&s).0, 0.4);
        let s = stats_of(1.0, 0.0);
        assert_eq!(exp_confidence(&s).0, 1.0);
    }

    #[test]
    fn var_hand_value() {
        let s = stats_of(0.5, 0.1);
        let (sent, words) = var_confidence(&s, 2.0);
        assert!((sent - 0.81).abs() < 1e-12);
        assert!((words[0] - 0.81).abs() < 1e-12);
    }

    #[test]
    fn var_zero_variance_is_one() {
        for alpha in [0.5, 1.0, 2.0, 7.0] {
            assert_eq!(var_confidence(&stats_of(0.3, 0.0), alpha).0, 1.0);
        }
    }

    #[test]
    fn var_alpha_widens_gap() {
        let s = stats_of(0.5, 0.2);
        let c2 = var_confidence(&s, 2.0).0;
        let c4 = var_confidence(&s, 4.0).0;
        assert!(c4 < c2);
    }

    #[test]
    fn cev_hand_value() {
        let s = stats_of(0.5, 0.1);
        let (sent, _) = cev_confidence(&s, 2.0);
        assert!((sent - 0.64).abs() < 1e-12);
    }

    #[test]
    fn cev_boundaries() {
        assert_eq!(cev_confidence(&stats_of(0.5, 0.0), 2.0).0, 1.0);
        // Var = E: the footnote bound's edge.
        assert_eq!(cev_confidence(&stats_of(0.3, 0.3), 2.0).0, 0.0);
        // Zero expectation defined as zero confidence.
        assert_eq!(cev_confidence(&stats_of(0.0, 0.0), 2.0).0, 0.0);
    }

    #[test]
    fn degenerate_measure_values_at_zero_variance() {
        // Var=0 with deterministic probability p: EXP = p, VAR = CEV = 1.
        let p = 0.42;
        let s = stats_of(p, 0.0);
        assert_eq!(exp_confidence(&s).0, p);
        assert_eq!(var_confidence(&s, 1.0).0, 1.0);
        assert_eq!(cev_confidence(&s, 1.0).0, 1.0);
    }

    proptest! {
        #[test]
        fn all_measures_land_in_unit_interval(
            e in 0f64..=1.0,
            vfrac in 0f64..=1.0,
            alpha in 0.1f64..8.0,
            beta in 0.1f64..8.0,
        ) {
            // Var ≤ E by the uncertainty-module invariant.
            let v = e * vfrac;
            let s = stats_of(e, v);
            for c in [
                exp_confidence(&s).0,
                var_confidence(&s, alpha).0,
                cev_confidence(&s, beta).0,
            ] {
                prop_assert!((0.0..=1.0).contains(&c), "c = {c}");
            }
        }

        #[test]
        fn var_and_cev_monotone_in_variance(
            e in 0.05f64..=1.0,
            v1frac in 0f64..=1.0,
            v2frac in 0f64..=1.0,
            exponent in 0.5f64..4.0,
        ) {
            let (lo, hi) = if v1frac <= v2frac { (v1frac, v2frac) } else { (v2frac, v1frac) };
            let s_lo = stats_of(e, e * lo);
            let s_hi = stats_of(e, e * hi);
            prop_assert!(var_confidence(&s_lo, exponent).0 >= var_confidence(&s_hi, exponent).0);
            prop_assert!(cev_confidence(&s_lo, exponent).0 >= cev_confidence(&s_hi, exponent).0);
        }
    }

    fn tiny_model(dropout: f64) -> Transformer {
        let mut cfg = ModelConfig::desk(12, 12);
        cfg.hidden = 16;
        cfg.feed_forward = 16;
        cfg.layers = 1;
        cfg.heads = 2;
        cfg.dropout = dropout;
        Transformer::init(cfg, &mut RngStream::new(5, 0)).unwrap()
    }

    #[test]
    fn zero_dropout_cev_is_one_corpus_wide() {
        let model = tiny_model(0.0);
        let pairs: Vec<ScorablePair> = (0..3)
            .map(|i| ScorablePair {
                pair_id: i,
                src_ids: vec![4, 5 + i],
                pred_ids: vec![6, 7],
                decode_logprobs: None,
            })
            .collect();
        let cfg = MeasureConfig::new(Measure::Cev);
        let rng = RngStream::new(1, 0);
        let records = score_corpus(&model, &pairs, &cfg, 4, 0.0, &rng).unwrap();
        for r in &records {
            assert_eq!(r.sentence_confidence, 1.0);
            assert!(r.word_confidences.iter().all(|&c| c == 1.0));
        }
    }

    #[test]
    fn ptp_mode_needs_no_model_sampling() {
        assert!(!needs_sampling(Measure::Ptp));
        assert!(needs_sampling(Measure::Cev));
        let model = tiny_model(0.1);
        let pairs = vec![ScorablePair {
            pair_id: 0,
            src_ids: vec![4],
            pred_ids: vec![5, 6],
            decode_logprobs: Some(vec![0.5f64.ln(), 0.25f64.ln()]),
        }];
        let cfg = MeasureConfig::new(Measure::Ptp);
        let rng = RngStream::new(0, 0);
        let records = score_corpus(&model, &pairs, &cfg, 999, 0.1, &rng).unwrap();
        assert!((records[0].sentence_confidence - 0.125).abs() < 1e-12);
        assert_eq!(records[0].word_confidences.len(), 2);
    }

    #[test]
    fn empty_prediction_gets_zero_confidence_and_flag() {
        let model = tiny_model(0.1);
        let pairs = vec![ScorablePair {
            pair_id: 7,
            src_ids: vec![4],
            pred_ids: vec![],
            decode_logprobs: None,
        }];
        let cfg = MeasureConfig::new(Measure::Cev);
        let rng = RngStream::new(0, 0);
        let records = score_corpus(&model, &pairs, &cfg, 2, 0.1, &rng).unwrap();
        assert_eq!(records[0].sentence_confidence, 0.0);
        assert!(records[0].flags.contains(&"empty_prediction".to_string()));
    }

    #[test]
    fn pipeline_composition_matches_manual_trace() {
        // score_corpus must equal composing mc_forward → stats → measure by
        // hand for each pair.
        let model = tiny_model(0.25);
        let pairs: Vec<ScorablePair> = (0..3)
            .map(|i| ScorablePair {
                pair_id: i,
                src_ids: vec![4 + i, 5],
                pred_ids: vec![6, 7 + i],
                decode_logprobs: None,
            })
            .collect();
        let cfg = MeasureConfig::new(Measure::Cev);
        let rng = RngStream::new(42, 0);
        let records = score_corpus(&model, &pairs, &cfg, 5, 0.25, &rng).unwrap();
        for p in &pairs {
            let pair_rng = rng.substream(p.pair_id as u64);
            let samples =
                mc_forward(&model, &p.src_ids, &p.pred_ids, 0.25, 5, &pair_rng).unwrap();
            let s = stats(&samples, false);
            let (sent, words) = cev_confidence(&s, 2.0);
            assert_eq!(records[p.pair_id].sentence_confidence, sent);
            assert_eq!(records[p.pair_id].word_confidences, words);
        }
    }

    #[test]
    fn scoring_file_is_resumable() {
        let model = tiny_model(0.2);
        let mk = |id: usize| ScorablePair {
            pair_id: id,
            src_ids: vec![4, 5],
            pred_ids: vec![6 + id % 3],
            decode_logprobs: None,
        };
        let cfg = MeasureConfig::new(Measure::Exp);
        let rng = RngStream::new(3, 0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scores.jsonl");

        // First run scores pairs 0 and 1 only.
        let first: Vec<ScorablePair> = (0..2).map(mk).collect();
        let n = score_corpus_to_file(&model, &first, &cfg, 3, 0.2, &rng, &path).unwrap();
        assert_eq!(n, 2);

        // Second run over 0..4 resumes: only 2 and 3 get scored.
        let all: Vec<ScorablePair> = (0..4).map(mk).collect();
        let n = score_corpus_to_file(&model, &all, &cfg, 3, 0.2, &rng, &path).unwrap();
        assert_eq!(n, 2);

        let records = read_records(&path).unwrap();
        assert_eq!(records.len(), 4);
        // Resumed records equal a from-scratch scoring.
        let fresh = score_corpus(&model, &all, &cfg, 3, 0.2, &rng).unwrap();
        for (a, b) in records.iter().zip(&fresh) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn equals_exp_when_dropout_zero_matches_ptp() {
        // With zero dropout, EXP equals the deterministic model probability;
        // a pair whose decode logprobs equal the teacher-forced ones gives
        // PTP == EXP exactly.
        let model = tiny_model(0.0);
        let src = vec![4, 5];
        let pred = vec![6, 7];
        let rng = RngStream::new(0, 0);
        let samples = mc_forward(&model, &src, &pred, 0.0, 3, &rng).unwrap();
        let s = stats(&samples, false);
        let (exp_sent, exp_words) = exp_confidence(&s);
        let (ptp_sent, ptp_words) = ptp(&samples.word_logprobs[0]);
        assert_eq!(exp_sent, ptp_sent);
        assert_eq!(exp_words, ptp_words);
        let _ = McSampleSet::from_word_logprobs(samples.word_logprobs.clone()).unwrap();
    }
}
