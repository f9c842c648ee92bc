//! Tokenization, byte-pair encoding, vocabularies, and token-budget batching.

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

/// Marker appended to the final symbol of each word so merges cannot cross
/// word boundaries and segmentation stays invertible.
pub const END_OF_WORD: &str = "</w>";

const BPE_FILE_VERSION: u32 = 1;

/// Whitespace pretokenization with punctuation split off as separate tokens.
pub fn tokenize(line: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in line.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
        } else if ch.is_alphanumeric() || ch == '_' {
            cur.push(ch);
        } else {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            tokens.push(ch.to_string());
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

// ── Byte-pair encoding ──────────────────────────────────────────────

/// An ordered list of learned merges. Applying them in order is
/// deterministic; earlier merges take priority.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
}

impl BpeModel {
    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// Learn up to `merge_count` merges by greedy highest-frequency pair
    /// merging over the whitespace-pretokenized corpus. Frequency ties break
    /// by lexicographic order of the pair.
    pub fn learn(corpus: &[Vec<String>], merge_count: usize) -> Result<Self> {
        if corpus.iter().all(|s| s.is_empty()) {
            return Err(Error::Corpus("cannot learn BPE from an empty corpus".into()));
        }
        // Word frequency table; each word is a sequence of symbols ending in
        // the end-of-word marker fused onto its last character.
        let mut word_freq: BTreeMap<Vec<String>, u64> = BTreeMap::new();
        for sent in corpus {
            for word in sent {
                *word_freq.entry(word_symbols(word)).or_insert(0) += 1;
            }
        }

        let mut merges = Vec::with_capacity(merge_count);
        for _ in 0..merge_count {
            let mut pair_freq: BTreeMap<(String, String), u64> = BTreeMap::new();
            for (word, freq) in &word_freq {
                for pair in word.windows(2) {
                    *pair_freq
                        .entry((pair[0].clone(), pair[1].clone()))
                        .or_insert(0) += freq;
                }
            }
            // Highest frequency wins; BTreeMap iteration already yields ties
            // in lexicographic order, so the first max stays first.
            let Some((best, _)) = pair_freq.iter().fold(None::<(&(String, String), u64)>, {
                |acc, (pair, &freq)| match acc {
                    Some((_, f)) if f >= freq => acc,
                    _ => Some((pair, freq)),
                }
            }) else {
                break; // every word is a single symbol already
            };
            let best = best.clone();
            word_freq = word_freq
                .into_iter()
                .map(|(word, freq)| (merge_pair_in_word(&word, &best), freq))
                .collect();
            merges.push(best);
        }
        Ok(BpeModel { merges })
    }

    /// Segment one pretokenized sentence into subword tokens, applying merges
    /// in learned priority order. Unknown characters pass through.
    pub fn apply(&self, tokens: &[String]) -> Vec<String> {
        let rank: HashMap<(&str, &str), usize> = self
            .merges
            .iter()
            .enumerate()
            .map(|(i, (a, b))| ((a.as_str(), b.as_str()), i))
            .collect();
        let mut out = Vec::new();
        for word in tokens {
            let mut symbols = word_symbols(word);
            loop {
                let best = symbols
                    .windows(2)
                    .filter_map(|w| rank.get(&(w[0].as_str(), w[1].as_str())).copied())
                    .min();
                let Some(best_rank) = best else { break };
                let pair = &self.merges[best_rank];
                symbols = merge_pair_in_word(&symbols, pair);
            }
            out.extend(symbols);
        }
        out
    }

    /// The exact left inverse of [`BpeModel::apply`]: joins subwords back
    /// into the pretokenized sentence.
    pub fn undo(subwords: &[String]) -> Vec<String> {
        let mut words = Vec::new();
        let mut cur = String::new();
        for sub in subwords {
            if let Some(stem) = sub.strip_suffix(END_OF_WORD) {
                cur.push_str(stem);
                words.push(std::mem::take(&mut cur));
            } else {
                cur.push_str(sub);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
        words
    }

    /// Plain-text format: a header line, then one merge per line.
    pub fn to_file_string(&self) -> String {
        let mut s = format!("#bpe v{BPE_FILE_VERSION} marker={END_OF_WORD}\n");
        for (a, b) in &self.merges {
            let _ = writeln!(s, "{a} {b}");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Corpus("empty BPE model file".into()))?;
        if !header.starts_with("#bpe v1 ") {
            return Err(Error::Corpus(format!("unsupported BPE header: {header}")));
        }
        let mut merges = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let (a, b) = line
                .split_once(' ')
                .ok_or_else(|| Error::Corpus(format!("malformed merge line: {line}")))?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(BpeModel { merges })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_file_string(&text)
    }
}

fn word_symbols(word: &str) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    let mut symbols: Vec<String> = chars.iter().map(|c| c.to_string()).collect();
    if let Some(last) = symbols.last_mut() {
        last.push_str(END_OF_WORD);
    }
    symbols
}

/// Replace adjacent occurrences of `pair` left to right (non-overlapping
/// after each replacement).
fn merge_pair_in_word(word: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && word[i] == pair.0 && word[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(word[i].clone());
            i += 1;
        }
    }
    out
}

// ── Vocabulary ──────────────────────────────────────────────────────

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ↔ id bijection with a fixed reserved block at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    /// Build from a segmented corpus: every distinct token, ordered by
    /// descending frequency then lexicographically, after the reserved block.
    pub fn build(corpus_tokens: impl Iterator<Item = String>) -> Self {
        let mut freq: BTreeMap<String, u64> = BTreeMap::new();
        for tok in corpus_tokens {
            *freq.entry(tok).or_insert(0) += 1;
        }
        let mut by_freq: Vec<(String, u64)> = freq.into_iter().collect();
        by_freq.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(by_freq.into_iter().map(|(t, _)| t));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, ids }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved block always present
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.tokens
            .get(id)
            .map(|s| s.as_str())
            .ok_or(Error::OutOfVocab {
                id,
                vocab_size: self.tokens.len(),
            })
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&id| self.token(id).map(|s| s.to_string()))
            .collect()
    }

    /// One token per line; line number equals id minus the reserved block.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for tok in &self.tokens[RESERVED.len()..] {
            let _ = writeln!(s, "{tok}");
        }
        s
    }

    pub fn from_file_string(text: &str) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(text.lines().filter(|l| !l.is_empty()).map(String::from));
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, ids }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(Self::from_file_string(&text))
    }

    /// Content hash of the vocabulary (checkpoints embed this to detect
    /// mismatched vocabularies at load time).
    pub fn fingerprint(&self) -> String {
        crate::hash::sha256_hex(self.to_file_string().as_bytes())
    }
}

// ── Token-budget batching ───────────────────────────────────────────

/// Group index ranges of `lengths` (max of source/target token count per
/// pair) so that every batch's padded cost — batch size times its longest
/// pair — stays within `budget`. Pairs are sorted by length first; returned
/// batches index into the original slice order.
pub fn batch_by_tokens(lengths: &[(usize, usize)], budget: usize) -> Result<Vec<Vec<usize>>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    let cost = |i: usize| lengths[i].0.max(lengths[i].1);
    if let Some(&worst) = order.iter().max_by_key(|&&i| cost(i)) {
        if cost(worst) > budget {
            return Err(Error::Corpus(format!(
                "pair {} needs {} tokens, over the batch budget {}",
                worst,
                cost(worst),
                budget
            )));
        }
    }
    order.sort_by_key(|&i| (cost(i), i));

    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_max = 0usize;
    for i in order {
        let new_max = cur_max.max(cost(i));
        if !cur.is_empty() && (cur.len() + 1) * new_max > budget {
            batches.push(std::mem::take(&mut cur));
            cur_max = 0;
        }
        cur_max = cur_max.max(cost(i));
        cur.push(i);
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    Ok(batches)
}
