//! Sentence pairs, corpora, and the one-sentence-per-line file format.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Where a sentence pair came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Authentic,
    Synthetic,
}

/// An aligned source/target pair of pretokenized sentences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentencePair {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub provenance: Provenance,
    /// Per-step model probabilities of each source token, recorded when the
    /// pair was produced by decoding (the PTP inputs). Stored as log values.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_logprobs: Option<Vec<f64>>,
}

impl SentencePair {
    pub fn authentic(source: Vec<String>, target: Vec<String>) -> Self {
        SentencePair {
            source,
            target,
            provenance: Provenance::Authentic,
            decode_logprobs: None,
        }
    }

    pub fn synthetic(source: Vec<String>, target: Vec<String>, logprobs: Vec<f64>) -> Self {
        SentencePair {
            source,
            target,
            provenance: Provenance::Synthetic,
            decode_logprobs: Some(logprobs),
        }
    }

    /// Swap source and target (used to train the reverse direction).
    pub fn flipped(&self) -> SentencePair {
        SentencePair {
            source: self.target.clone(),
            target: self.source.clone(),
            provenance: self.provenance,
            decode_logprobs: None,
        }
    }
}

pub type Corpus = Vec<SentencePair>;

/// Read a monolingual corpus: UTF-8, one sentence per line, pretokenized
/// here. Blank lines are kept as empty sentences so line numbers stay
/// aligned with any sidecar files.
pub fn read_mono(path: &Path) -> Result<Vec<Vec<String>>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(text.lines().map(crate::data::tokenize).collect())
}

/// Read an aligned pair of corpus files into authentic sentence pairs.
pub fn read_parallel(src_path: &Path, tgt_path: &Path) -> Result<Corpus> {
    let src = read_mono(src_path)?;
    let tgt = read_mono(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::Corpus(format!(
            "line count mismatch: {} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    Ok(src
        .into_iter()
        .zip(tgt)
        .map(|(s, t)| SentencePair::authentic(s, t))
        .collect())
}

/// Write sentences one per line, tokens space-separated.
pub fn write_sentences(path: &Path, sentences: &[Vec<String>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        out.push_str(&s.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_read_checks_alignment() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("b.txt");
        std::fs::write(&a, "x y\nz\n").unwrap();
        std::fs::write(&b, "u v\n").unwrap();
        assert!(read_parallel(&a, &b).is_err());
        std::fs::write(&b, "u v\nw\n").unwrap();
        let corpus = read_parallel(&a, &b).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus[0].source, vec!["x", "y"]);
        assert_eq!(corpus[1].target, vec!["w"]);
    }

    #[test]
    fn sentence_write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.txt");
        let sents = vec![
            vec!["a".to_string(), "b".to_string()],
            vec!["c".to_string()],
        ];
        write_sentences(&p, &sents).unwrap();
        assert_eq!(read_mono(&p).unwrap(), sents);
    }
}
