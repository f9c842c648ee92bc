//! Scaled-down transformer encoder-decoder.
//!
//! The attention primitive accepts an optional word-level confidence vector
//! over source key positions: attention weights are computed by softmax
//! first, then multiplied elementwise by the confidence vector (a broadcast
//! product over query rows) with no renormalization by default.

use crate::autodiff::{Graph, TensorId};
use crate::error::{Error, Result};
use crate::optim::ParamMap;
use crate::rng::RngStream;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which attention blocks a word-confidence vector modulates. The vector
/// indexes source positions, so candidates are the blocks whose keys are
/// source states: encoder self-attention and encoder-decoder cross-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceSites {
    #[default]
    Both,
    EncoderSelf,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Hidden size D; must be divisible by `heads`.
    pub hidden: usize,
    pub feed_forward: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub max_len: usize,
    #[serde(default)]
    pub confidence_sites: ConfidenceSites,
    /// Renormalize attention rows after confidence scaling. Off by default:
    /// the modified attention is used exactly as scaled.
    #[serde(default)]
    pub renormalize_confidence: bool,
    /// Share the target embedding with the output projection.
    #[serde(default)]
    pub tie_target_embedding: bool,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, D=64, 4 heads, FF=128.
    pub fn desk(src_vocab: usize, tgt_vocab: usize) -> Self {
        ModelConfig {
            src_vocab,
            tgt_vocab,
            hidden: 64,
            feed_forward: 128,
            layers: 2,
            heads: 4,
            dropout: 0.1,
            label_smoothing: 0.1,
            max_len: 64,
            confidence_sites: ConfidenceSites::Both,
            renormalize_confidence: false,
            tie_target_embedding: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0,1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} not in [0,1)",
                self.label_smoothing
            )));
        }
        if self.layers == 0 || self.max_len < 2 || self.src_vocab < 5 || self.tgt_vocab < 5 {
            return Err(Error::Config("degenerate model dimensions".into()));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }
}

/// Per-source-position confidence weights, each in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceVector(Vec<f64>);

impl ConfidenceVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("confidence values must lie in [0,1]".into()));
        }
        Ok(ConfidenceVector(values))
    }

    pub fn ones(len: usize) -> Self {
        ConfidenceVector(vec![1.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Scaled dot-product attention with optional confidence modulation:
/// `softmax(QKᵀ/√D)` first, then each weight row is multiplied elementwise
/// by `c` (broadcast over query rows), then the result multiplies V.
pub fn attention(
    g: &mut Graph,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    c: Option<&ConfidenceVector>,
    renormalize: bool,
) -> Result<TensorId> {
    let d = g.value(q).cols();
    let key_count = g.value(k).rows();
    if let Some(c) = c {
        if c.len() != key_count {
            return Err(Error::Shape {
                op: "attention confidence",
                lhs: vec![key_count],
                rhs: vec![c.len()],
            });
        }
    }
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let mut weights = g.softmax_rows(scaled)?;
    if let Some(c) = c {
        let cv = g.leaf(Tensor::vector(c.as_slice().to_vec()));
        weights = g.mul_row_vec(weights, cv)?;
        if renormalize {
            let sums = g.sum_rows(weights)?;
            weights = g.div_col_vec(weights, sums)?;
        }
    }
    g.matmul(weights, v)
}

/// Model parameters plus configuration.
#[derive(Debug, Clone)]
pub struct Transformer {
    pub config: ModelConfig,
    pub params: ParamMap,
}

impl Transformer {
    /// Fresh parameters: Xavier-uniform projections, N(0, D^-1/2) embeddings,
    /// identity layer norms. Draw order is fixed, so initialization is fully
    /// determined by the stream.
    pub fn init(config: ModelConfig, rng: &mut RngStream) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let mut params = ParamMap::new();

        let embed_std = 1.0 / (d as f64).sqrt();
        params.insert(
            "embed.src".into(),
            Tensor::from_fn(vec![config.src_vocab, d], || rng.normal() * embed_std),
        );
        params.insert(
            "embed.tgt".into(),
            Tensor::from_fn(vec![config.tgt_vocab, d], || rng.normal() * embed_std),
        );
        if !config.tie_target_embedding {
            params.insert(
                "out.w".into(),
                xavier(vec![d, config.tgt_vocab], rng),
            );
        }
        params.insert("out.b".into(), Tensor::zeros(vec![config.tgt_vocab]));

        for l in 0..config.layers {
            for name in ["sa"] {
                insert_attn(&mut params, &format!("enc{l}.{name}"), d, rng);
            }
            insert_ln(&mut params, &format!("enc{l}.ln1"), d);
            insert_ln(&mut params, &format!("enc{l}.ln2"), d);
            insert_ffn(&mut params, &format!("enc{l}.ff"), d, config.feed_forward, rng);

            insert_attn(&mut params, &format!("dec{l}.sa"), d, rng);
            insert_attn(&mut params, &format!("dec{l}.ca"), d, rng);
            insert_ln(&mut params, &format!("dec{l}.ln1"), d);
            insert_ln(&mut params, &format!("dec{l}.ln2"), d);
            insert_ln(&mut params, &format!("dec{l}.ln3"), d);
            insert_ffn(&mut params, &format!("dec{l}.ff"), d, config.feed_forward, rng);
        }
        insert_ln(&mut params, "enc_out_ln", d);
        insert_ln(&mut params, "dec_out_ln", d);

        Ok(Transformer { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParamMap) -> Result<Self> {
        config.validate()?;
        Ok(Transformer { config, params })
    }

    /// Bind this model's parameters into a fresh graph for one forward pass.
    pub fn bind(&self, training: bool) -> Bound<'_> {
        let mut graph = Graph::new();
        let param_ids = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), graph.leaf(v.clone())))
            .collect();
        Bound {
            model: self,
            graph,
            param_ids,
            training,
        }
    }
}

fn xavier(shape: Vec<usize>, rng: &mut RngStream) -> Tensor {
    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
    Tensor::from_fn(shape, || rng.uniform_in(-limit, limit))
}

fn insert_attn(params: &mut ParamMap, prefix: &str, d: usize, rng: &mut RngStream) {
    for w in ["wq", "wk", "wv", "wo"] {
        params.insert(format!("{prefix}.{w}"), xavier(vec![d, d], rng));
    }
}

fn insert_ln(params: &mut ParamMap, prefix: &str, d: usize) {
    params.insert(format!("{prefix}.g"), Tensor::from_fn(vec![d], || 1.0));
    params.insert(format!("{prefix}.b"), Tensor::zeros(vec![d]));
}

fn insert_ffn(params: &mut ParamMap, prefix: &str, d: usize, ff: usize, rng: &mut RngStream) {
    params.insert(format!("{prefix}.w1"), xavier(vec![d, ff], rng));
    params.insert(format!("{prefix}.b1"), Tensor::zeros(vec![ff]));
    params.insert(format!("{prefix}.w2"), xavier(vec![ff, d], rng));
    params.insert(format!("{prefix}.b2"), Tensor::zeros(vec![d]));
}

/// One forward-pass context: a graph with the model's parameters bound as
/// leaves. Several sentence pairs may run through the same binding so a
/// single backward sweep accumulates their gradients.
pub struct Bound<'m> {
    model: &'m Transformer,
    pub graph: Graph,
    param_ids: BTreeMap<String, TensorId>,
    training: bool,
}

impl Bound<'_> {
    fn p(&self, name: &str) -> TensorId {
        *self
            .param_ids
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    fn cfg(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        self.graph.value(id)
    }

    /// Map node gradients back to parameter names.
    pub fn param_grads(&self, loss: TensorId) -> Result<ParamMap> {
        let grads = self.graph.backward(loss)?;
        Ok(self
            .param_ids
            .iter()
            .map(|(name, &id)| (name.clone(), grads.of(id).clone()))
            .collect())
    }

    fn embed(&mut self, table: &str, ids: &[usize], rng: &mut RngStream) -> Result<TensorId> {
        let cfg = self.cfg();
        if ids.len() > cfg.max_len {
            return Err(Error::Overlength {
                len: ids.len(),
                max: cfg.max_len,
            });
        }
        let d = cfg.hidden;
        let dropout = cfg.dropout;
        let table = self.p(table);
        let emb = self.graph.gather_rows(table, ids)?;
        let scaled = self.graph.scale(emb, (d as f64).sqrt());
        let pe = self.graph.leaf(positional_encoding(ids.len(), d));
        let summed = self.graph.add(scaled, pe)?;
        self.graph.dropout(summed, dropout, self.training, rng)
    }

    /// Multi-head attention over bound projection weights.
    fn mha(
        &mut self,
        prefix: &str,
        queries: TensorId,
        keys_values: TensorId,
        mask: Option<&Tensor>,
        confidence: Option<TensorId>,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        let cfg = self.cfg();
        let (heads, dk, dropout) = (cfg.heads, cfg.head_dim(), cfg.dropout);
        let renorm = cfg.renormalize_confidence;
        let g = &mut self.graph;

        let wq = self.param_ids[&format!("{prefix}.wq")];
        let wk = self.param_ids[&format!("{prefix}.wk")];
        let wv = self.param_ids[&format!("{prefix}.wv")];
        let wo = self.param_ids[&format!("{prefix}.wo")];

        let q = g.matmul(queries, wq)?;
        let k = g.matmul(keys_values, wk)?;
        let v = g.matmul(keys_values, wv)?;

        let mask_id = mask.map(|m| g.leaf(m.clone()));
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dk, dk)?;
            let kh = g.slice_cols(k, h * dk, dk)?;
            let vh = g.slice_cols(v, h * dk, dk)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let mut scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
            if let Some(m) = mask_id {
                scaled = g.add(scaled, m)?;
            }
            let mut weights = g.softmax_rows(scaled)?;
            if let Some(c) = confidence {
                weights = g.mul_row_vec(weights, c)?;
                if renorm {
                    let sums = g.sum_rows(weights)?;
                    weights = g.div_col_vec(weights, sums)?;
                }
            }
            let weights = g.dropout(weights, dropout, self.training, rng)?;
            head_outs.push(g.matmul(weights, vh)?);
        }
        let cat = g.concat_cols(&head_outs)?;
        g.matmul(cat, wo)
    }

    fn ln(&mut self, prefix: &str, x: TensorId) -> Result<TensorId> {
        let gamma = self.p(&format!("{prefix}.g"));
        let beta = self.p(&format!("{prefix}.b"));
        self.graph.layer_norm(x, gamma, beta, 1e-6)
    }

    fn ffn(&mut self, prefix: &str, x: TensorId) -> Result<TensorId> {
        let w1 = self.p(&format!("{prefix}.w1"));
        let b1 = self.p(&format!("{prefix}.b1"));
        let w2 = self.p(&format!("{prefix}.w2"));
        let b2 = self.p(&format!("{prefix}.b2"));
        let h = self.graph.matmul(x, w1)?;
        let h = self.graph.add_row_vec(h, b1)?;
        let h = self.graph.relu(h);
        let out = self.graph.matmul(h, w2)?;
        self.graph.add_row_vec(out, b2)
    }

    /// Pre-norm residual block: x + dropout(f(ln(x))).
    fn sublayer<F>(&mut self, ln_prefix: &str, x: TensorId, rng: &mut RngStream, f: F) -> Result<TensorId>
    where
        F: FnOnce(&mut Self, TensorId, &mut RngStream) -> Result<TensorId>,
    {
        let dropout = self.cfg().dropout;
        let normed = self.ln(ln_prefix, x)?;
        let out = f(self, normed, rng)?;
        let out = self.graph.dropout(out, dropout, self.training, rng)?;
        self.graph.add(x, out)
    }

    /// Encode source token ids (the end-of-sequence marker is appended here).
    /// `confidence`, when present, must cover exactly the source tokens; the
    /// appended marker position is trusted fully.
    pub fn encode(
        &mut self,
        src: &[usize],
        confidence: Option<&ConfidenceVector>,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        if src.is_empty() {
            return Err(Error::Corpus("cannot encode an empty sentence".into()));
        }
        check_vocab(src, self.cfg().src_vocab)?;
        let framed: Vec<usize> = src
            .iter()
            .copied()
            .chain(std::iter::once(crate::data::EOS_ID))
            .collect();
        let c_leaf = self
            .confidence_leaf(confidence, src.len())?
            .filter(|_| self.applies_to_encoder());
        let mut x = self.embed("embed.src", &framed, rng)?;
        for l in 0..self.cfg().layers {
            x = self.sublayer(&format!("enc{l}.ln1"), x, rng, |s, normed, rng| {
                s.mha(&format!("enc{l}.sa"), normed, normed, None, c_leaf, rng)
            })?;
            x = self.sublayer(&format!("enc{l}.ln2"), x, rng, |s, normed, _| {
                s.ffn(&format!("enc{l}.ff"), normed)
            })?;
        }
        self.ln("enc_out_ln", x)
    }

    fn confidence_leaf(
        &mut self,
        confidence: Option<&ConfidenceVector>,
        src_len: usize,
    ) -> Result<Option<TensorId>> {
        let Some(c) = confidence else { return Ok(None) };
        if c.len() != src_len {
            return Err(Error::Shape {
                op: "confidence vector",
                lhs: vec![src_len],
                rhs: vec![c.len()],
            });
        }
        let mut v = c.as_slice().to_vec();
        v.push(1.0); // the appended end marker
        Ok(Some(self.graph.leaf(Tensor::vector(v))))
    }

    fn applies_to_encoder(&self) -> bool {
        matches!(
            self.cfg().confidence_sites,
            ConfidenceSites::Both | ConfidenceSites::EncoderSelf
        )
    }

    fn applies_to_cross(&self) -> bool {
        matches!(
            self.cfg().confidence_sites,
            ConfidenceSites::Both | ConfidenceSites::Cross
        )
    }

    /// Decoder forward over a (begin-marker framed) prefix, returning
    /// log-probability rows, one per prefix position.
    pub fn decode_logprobs(
        &mut self,
        enc_out: TensorId,
        src_len: usize,
        tgt_prefix: &[usize],
        confidence: Option<&ConfidenceVector>,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        check_vocab(tgt_prefix, self.cfg().tgt_vocab)?;
        let framed: Vec<usize> = std::iter::once(crate::data::BOS_ID)
            .chain(tgt_prefix.iter().copied())
            .collect();
        let t = framed.len();
        let c_leaf = self
            .confidence_leaf(confidence, src_len)?
            .filter(|_| self.applies_to_cross());

        let causal = causal_mask(t);
        let mut x = self.embed("embed.tgt", &framed, rng)?;
        for l in 0..self.cfg().layers {
            x = self.sublayer(&format!("dec{l}.ln1"), x, rng, |s, normed, rng| {
                s.mha(&format!("dec{l}.sa"), normed, normed, Some(&causal), None, rng)
            })?;
            x = self.sublayer(&format!("dec{l}.ln2"), x, rng, |s, normed, rng| {
                s.mha(&format!("dec{l}.ca"), normed, enc_out, None, c_leaf, rng)
            })?;
            x = self.sublayer(&format!("dec{l}.ln3"), x, rng, |s, normed, _| {
                s.ffn(&format!("dec{l}.ff"), normed)
            })?;
        }
        let x = self.ln("dec_out_ln", x)?;

        let logits = if self.cfg().tie_target_embedding {
            let et = self.p("embed.tgt");
            let ett = self.graph.transpose(et)?;
            self.graph.matmul(x, ett)?
        } else {
            let w = self.p("out.w");
            self.graph.matmul(x, w)?
        };
        let b = self.p("out.b");
        let logits = self.graph.add_row_vec(logits, b)?;
        self.graph.log_softmax_rows(logits)
    }

    /// Teacher-forced log-probabilities of the full target given the source:
    /// row j holds log P(token_j | prefix, source) for the gold sequence
    /// (the end marker appended). Returns the logprob matrix and the gold
    /// column indices.
    pub fn teacher_forced(
        &mut self,
        src: &[usize],
        tgt: &[usize],
        confidence: Option<&ConfidenceVector>,
        rng: &mut RngStream,
    ) -> Result<(TensorId, Vec<usize>)> {
        if tgt.is_empty() {
            return Err(Error::Corpus("cannot score an empty target".into()));
        }
        if tgt.len() + 1 > self.cfg().max_len {
            return Err(Error::Overlength {
                len: tgt.len() + 1,
                max: self.cfg().max_len,
            });
        }
        let enc = self.encode(src, confidence, rng)?;
        let logprobs = self.decode_logprobs(enc, src.len(), tgt, confidence, rng)?;
        let gold: Vec<usize> = tgt
            .iter()
            .copied()
            .chain(std::iter::once(crate::data::EOS_ID))
            .collect();
        Ok((logprobs, gold))
    }

    /// Per-token smoothed negative log-likelihood vector: the smoothed
    /// distribution puts 1-ε+ε/V on the gold token and ε/V elsewhere.
    pub fn per_token_smoothed_nll(
        &mut self,
        logprobs: TensorId,
        gold: &[usize],
        eps: f64,
    ) -> Result<TensorId> {
        let vocab = self.graph.value(logprobs).cols() as f64;
        let gold_lp = self.graph.pick_per_row(logprobs, gold)?;
        let gold_term = self.graph.scale(gold_lp, -(1.0 - eps));
        let all_lp = self.graph.sum_rows(logprobs)?;
        let smooth_term = self.graph.scale(all_lp, -eps / vocab);
        self.graph.add(gold_term, smooth_term)
    }

    /// Mean smoothed NLL over one sentence (the unweighted training loss).
    pub fn smoothed_nll(
        &mut self,
        logprobs: TensorId,
        gold: &[usize],
        eps: f64,
    ) -> Result<TensorId> {
        let per_token = self.per_token_smoothed_nll(logprobs, gold, eps)?;
        let n = gold.len();
        self.graph.dot_const(per_token, &vec![1.0 / n as f64; n])
    }
}

fn check_vocab(ids: &[usize], vocab: usize) -> Result<()> {
    for &id in ids {
        if id >= vocab {
            return Err(Error::OutOfVocab {
                id,
                vocab_size: vocab,
            });
        }
    }
    Ok(())
}

/// Additive causal mask: 0 at or below the diagonal, -1e9 above. The shift
/// is large enough that masked weights underflow to exactly zero after
/// softmax, so future positions cannot influence earlier ones even in the
/// last bit.
fn causal_mask(t: usize) -> Tensor {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            m[i * t + j] = -1e9;
        }
    }
    Tensor::new(vec![t, t], m).expect("mask shape")
}

/// Sinusoidal positional encoding table.
fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("pe shape")
}
