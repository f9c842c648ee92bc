//! Reverse-mode automatic differentiation on a linear tape.
//!
//! A [`Graph`] records every primitive operation as it executes the forward
//! pass; [`Graph::backward`] replays the tape in reverse topological order
//! (which is simply reverse insertion order) and accumulates gradients.
//! Tensors on the graph are immutable once created.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Handle to a value on the graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Transpose(TensorId),
    Add(TensorId, TensorId),
    /// `[m,n] + [n]`, the vector broadcast over rows.
    AddRowVec(TensorId, TensorId),
    Mul(TensorId, TensorId),
    /// `[m,n] ⊙ [n]`, the vector broadcast over rows.
    MulRowVec(TensorId, TensorId),
    /// `[m,n] / [m]`, each row divided by its own scalar.
    DivColVec(TensorId, TensorId),
    /// Any tensor scaled by a scalar node.
    MulScalar(TensorId, TensorId),
    Scale(TensorId, f64),
    Relu(TensorId),
    SoftmaxRows(TensorId),
    LogSoftmaxRows(TensorId),
    LayerNorm {
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    /// Mask entries are 0.0 (dropped) or 1/(1-rate) (kept, inverted scaling).
    Dropout {
        x: TensorId,
        mask: Vec<f64>,
    },
    GatherRows {
        table: TensorId,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    SumRows(TensorId),
    SumAll(TensorId),
    PickPerRow {
        x: TensorId,
        cols: Vec<usize>,
    },
    DotConst {
        x: TensorId,
        weights: Vec<f64>,
    },
    AddN(Vec<TensorId>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Recording tape plus forward values. Single-writer: one graph per forward
/// pass. Independent passes over the same parameters may run concurrently on
/// separate graphs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> TensorId {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by {:?}",
            op_name(&op)
        );
        self.nodes.push(Node { value, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Insert an input value. Leaves are where gradients terminate.
    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.push(value, Op::Leaf)
    }

    // ── Forward primitives ──────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let value = matmul_raw(ta, tb);
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let t = self.value(a);
        if t.rank() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        let value = transpose_raw(t);
        Ok(self.push(value, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::Shape {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn add_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (ta, tv) = (self.value(a), self.value(v));
        if ta.rank() != 2 || tv.rank() != 1 || ta.shape()[1] != tv.shape()[0] {
            return Err(Error::Shape {
                op: "add_row_vec",
                lhs: ta.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let n = ta.shape()[1];
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tv.data()[i % n])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRowVec(a, v)))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::Shape {
                op: "mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    /// Each row of `a` multiplied elementwise by `v` (a broadcast product over
    /// key positions; this is how confidence vectors enter attention).
    pub fn mul_row_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (ta, tv) = (self.value(a), self.value(v));
        if ta.rank() != 2 || tv.rank() != 1 || ta.shape()[1] != tv.shape()[0] {
            return Err(Error::Shape {
                op: "mul_row_vec",
                lhs: ta.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let n = ta.shape()[1];
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x * tv.data()[i % n])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulRowVec(a, v)))
    }

    /// Each row of `a` divided by the matching entry of `v`.
    pub fn div_col_vec(&mut self, a: TensorId, v: TensorId) -> Result<TensorId> {
        let (ta, tv) = (self.value(a), self.value(v));
        if ta.rank() != 2 || tv.rank() != 1 || ta.shape()[0] != tv.shape()[0] {
            return Err(Error::Shape {
                op: "div_col_vec",
                lhs: ta.shape().to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let n = ta.shape()[1];
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x / tv.data()[i / n])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::DivColVec(a, v)))
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        let ts = self.value(s);
        if !ts.is_scalar() {
            return Err(Error::Shape {
                op: "mul_scalar",
                lhs: self.value(a).shape().to_vec(),
                rhs: ts.shape().to_vec(),
            });
        }
        let k = ts.item();
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * k).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::MulScalar(a, s)))
    }

    pub fn scale(&mut self, a: TensorId, k: f64) -> TensorId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * k).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let value = rowwise(self.value(a), "softmax_rows", softmax_slice)?;
        Ok(self.push(value, Op::SoftmaxRows(a)))
    }

    pub fn log_softmax_rows(&mut self, a: TensorId) -> Result<TensorId> {
        let value = rowwise(self.value(a), "log_softmax_rows", log_softmax_slice)?;
        Ok(self.push(value, Op::LogSoftmaxRows(a)))
    }

    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = if tx.rank() == 2 { tx.shape()[1] } else { 0 };
        if n == 0 || tg.shape() != [n] || tb.shape() != [n] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let rows = tx.shape()[0];
        let mut out = Vec::with_capacity(rows * n);
        for r in 0..rows {
            let row = tx.row(r);
            let (mean, std) = row_moments(row, eps);
            for j in 0..n {
                out.push(tg.data()[j] * (row[j] - mean) / std + tb.data()[j]);
            }
        }
        let value = Tensor::new(vec![rows, n], out)?;
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Inverted dropout: elements zeroed with probability `rate`, survivors
    /// scaled by 1/(1-rate) so the expectation matches the input. Identity
    /// when not training or when the rate is zero (no randomness consumed).
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f64,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let tx = self.value(x);
        let mask: Vec<f64> = (0..tx.len())
            .map(|_| if rng.uniform() < rate { 0.0 } else { keep_scale })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Dropout { x, mask }))
    }

    /// Row lookup: `out[i, :] = table[ids[i], :]`. Embedding gather.
    pub fn gather_rows(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: tt.shape().to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, cols) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::OutOfVocab {
                    id,
                    vocab_size: rows,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Config("concat_cols of nothing".into()));
        }
        let rows = self.value(parts[0]).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() != 2 || t.shape()[0] != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            widths.push(t.shape()[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let tx = self.value(x);
        if tx.rank() != 2 || start + len > tx.shape()[1] {
            return Err(Error::Shape {
                op: "slice_cols",
                lhs: tx.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let rows = tx.shape()[0];
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let value = Tensor::new(vec![rows, len], data)?;
        Ok(self.push(value, Op::SliceCols { x, start, len }))
    }

    pub fn sum_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::Shape {
                op: "sum_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        }
        let data = (0..tx.shape()[0])
            .map(|r| tx.row(r).iter().sum())
            .collect();
        let value = Tensor::vector(data);
        Ok(self.push(value, Op::SumRows(x)))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    /// `out[i] = x[i, cols[i]]` — one entry per row.
    pub fn pick_per_row(&mut self, x: TensorId, cols: &[usize]) -> Result<TensorId> {
        let tx = self.value(x);
        if tx.rank() != 2 || cols.len() != tx.shape()[0] {
            return Err(Error::Shape {
                op: "pick_per_row",
                lhs: tx.shape().to_vec(),
                rhs: vec![cols.len()],
            });
        }
        let width = tx.shape()[1];
        let mut data = Vec::with_capacity(cols.len());
        for (r, &c) in cols.iter().enumerate() {
            if c >= width {
                return Err(Error::OutOfVocab {
                    id: c,
                    vocab_size: width,
                });
            }
            data.push(tx.at(r, c));
        }
        let value = Tensor::vector(data);
        Ok(self.push(
            value,
            Op::PickPerRow {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Dot product with a constant weight vector, producing a scalar.
    pub fn dot_const(&mut self, x: TensorId, weights: &[f64]) -> Result<TensorId> {
        let tx = self.value(x);
        if tx.rank() != 1 || tx.len() != weights.len() {
            return Err(Error::Shape {
                op: "dot_const",
                lhs: tx.shape().to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let s = tx.data().iter().zip(weights).map(|(a, w)| a * w).sum();
        Ok(self.push(
            Tensor::scalar(s),
            Op::DotConst {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    /// Sum of same-shaped tensors.
    pub fn add_n(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Config("add_n of nothing".into()));
        }
        let shape = self.value(parts[0]).shape().to_vec();
        let mut data = vec![0.0; self.value(parts[0]).len()];
        for &p in parts {
            let t = self.value(p);
            if t.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    op: "add_n",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            for (acc, v) in data.iter_mut().zip(t.data()) {
                *acc += v;
            }
        }
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::AddN(parts.to_vec())))
    }

    // ── Backward pass ───────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns gradients for every node;
    /// nodes that do not influence the loss get zero gradients.
    pub fn backward(&self, loss: TensorId) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.value(loss).shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].clone() else {
                continue;
            };
            self.accumulate_inputs(id, &g, &mut grads);
        }

        let dense = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.unwrap_or_else(|| Tensor::zeros(self.nodes[i].value.shape().to_vec())))
            .collect();
        Ok(Gradients { grads: dense })
    }

    fn accumulate_inputs(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                // dA = g · Bᵀ, dB = Aᵀ · g
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bt = transpose_raw(tb);
                let at = transpose_raw(ta);
                acc(grads, *a, &matmul_raw(g, &bt));
                acc(grads, *b, &matmul_raw(&at, g));
            }
            Op::Transpose(a) => {
                acc(grads, *a, &transpose_raw(g));
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::AddRowVec(a, v) => {
                acc(grads, *a, g);
                let n = self.value(*v).len();
                let mut dv = vec![0.0; n];
                for (i, gv) in g.data().iter().enumerate() {
                    dv[i % n] += gv;
                }
                acc(grads, *v, &Tensor::vector(dv));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da: Vec<f64> = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                let db: Vec<f64> = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                acc(grads, *a, &Tensor::new(ta.shape().to_vec(), da).unwrap());
                acc(grads, *b, &Tensor::new(tb.shape().to_vec(), db).unwrap());
            }
            Op::MulRowVec(a, v) => {
                let (ta, tv) = (self.value(*a), self.value(*v));
                let n = tv.len();
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * tv.data()[i % n])
                    .collect();
                let mut dv = vec![0.0; n];
                for (i, gv) in g.data().iter().enumerate() {
                    dv[i % n] += gv * ta.data()[i];
                }
                acc(grads, *a, &Tensor::new(ta.shape().to_vec(), da).unwrap());
                acc(grads, *v, &Tensor::vector(dv));
            }
            Op::DivColVec(a, v) => {
                let (ta, tv) = (self.value(*a), self.value(*v));
                let n = ta.shape()[1];
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv / tv.data()[i / n])
                    .collect();
                let mut dv = vec![0.0; tv.len()];
                for (i, gv) in g.data().iter().enumerate() {
                    let r = i / n;
                    dv[r] -= gv * ta.data()[i] / (tv.data()[r] * tv.data()[r]);
                }
                acc(grads, *a, &Tensor::new(ta.shape().to_vec(), da).unwrap());
                acc(grads, *v, &Tensor::vector(dv));
            }
            Op::MulScalar(a, s) => {
                let (ta, ts) = (self.value(*a), self.value(*s));
                let k = ts.item();
                let da: Vec<f64> = g.data().iter().map(|gv| gv * k).collect();
                let ds: f64 = g.data().iter().zip(ta.data()).map(|(gv, x)| gv * x).sum();
                acc(grads, *a, &Tensor::new(ta.shape().to_vec(), da).unwrap());
                acc(grads, *s, &Tensor::scalar(ds));
            }
            Op::Scale(a, k) => {
                let da: Vec<f64> = g.data().iter().map(|gv| gv * k).collect();
                acc(
                    grads,
                    *a,
                    &Tensor::new(self.value(*a).shape().to_vec(), da).unwrap(),
                );
            }
            Op::Relu(a) => {
                let ta = self.value(*a);
                let da: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(ta.data())
                    .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                    .collect();
                acc(grads, *a, &Tensor::new(ta.shape().to_vec(), da).unwrap());
            }
            Op::SoftmaxRows(a) => {
                // dx = y ⊙ (g − (g·y)) rowwise
                let n = out.cols();
                let mut da = vec![0.0; out.len()];
                for r in 0..out.len() / n {
                    let y = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        da[r * n + j] = y[j] * (gr[j] - dot);
                    }
                }
                acc(
                    grads,
                    *a,
                    &Tensor::new(self.value(*a).shape().to_vec(), da).unwrap(),
                );
            }
            Op::LogSoftmaxRows(a) => {
                // dx = g − softmax(x) · Σg rowwise
                let n = out.cols();
                let mut da = vec![0.0; out.len()];
                for r in 0..out.len() / n {
                    let lp = &out.data()[r * n..(r + 1) * n];
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        da[r * n + j] = gr[j] - lp[j].exp() * gsum;
                    }
                }
                acc(
                    grads,
                    *a,
                    &Tensor::new(self.value(*a).shape().to_vec(), da).unwrap(),
                );
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let (rows, n) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; tx.len()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for r in 0..rows {
                    let row = tx.row(r);
                    let gr = &g.data()[r * n..(r + 1) * n];
                    let (mean, std) = row_moments(row, *eps);
                    let xhat: Vec<f64> = row.iter().map(|v| (v - mean) / std).collect();
                    let dxhat: Vec<f64> = gr
                        .iter()
                        .zip(tg.data())
                        .map(|(g, gam)| g * gam)
                        .collect();
                    let m1: f64 = dxhat.iter().sum::<f64>() / n as f64;
                    let m2: f64 = dxhat
                        .iter()
                        .zip(&xhat)
                        .map(|(d, h)| d * h)
                        .sum::<f64>()
                        / n as f64;
                    for j in 0..n {
                        dx[r * n + j] = (dxhat[j] - m1 - xhat[j] * m2) / std;
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                acc(grads, *x, &Tensor::new(tx.shape().to_vec(), dx).unwrap());
                acc(grads, *gamma, &Tensor::vector(dgamma));
                acc(grads, *beta, &Tensor::vector(dbeta));
            }
            Op::Dropout { x, mask } => {
                let da: Vec<f64> = g.data().iter().zip(mask).map(|(gv, m)| gv * m).collect();
                acc(
                    grads,
                    *x,
                    &Tensor::new(self.value(*x).shape().to_vec(), da).unwrap(),
                );
            }
            Op::GatherRows { table, ids } => {
                let tt = self.value(*table);
                let cols = tt.shape()[1];
                let mut dt = vec![0.0; tt.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..cols {
                        dt[id * cols + j] += g.at(r, j);
                    }
                }
                acc(grads, *table, &Tensor::new(tt.shape().to_vec(), dt).unwrap());
            }
            Op::ConcatCols(parts) => {
                let rows = out.shape()[0];
                let mut start = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    let mut dp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        dp.extend_from_slice(&g.row(r)[start..start + w]);
                    }
                    acc(grads, p, &Tensor::new(vec![rows, w], dp).unwrap());
                    start += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                let tx = self.value(*x);
                let (rows, total) = (tx.shape()[0], tx.shape()[1]);
                let mut dx = vec![0.0; tx.len()];
                for r in 0..rows {
                    for j in 0..*len {
                        dx[r * total + start + j] = g.at(r, j);
                    }
                }
                acc(grads, *x, &Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::SumRows(x) => {
                let tx = self.value(*x);
                let n = tx.shape()[1];
                let dx: Vec<f64> = (0..tx.len()).map(|i| g.data()[i / n]).collect();
                acc(grads, *x, &Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::SumAll(x) => {
                let tx = self.value(*x);
                let gv = g.item();
                let dx = vec![gv; tx.len()];
                acc(grads, *x, &Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::PickPerRow { x, cols } => {
                let tx = self.value(*x);
                let width = tx.shape()[1];
                let mut dx = vec![0.0; tx.len()];
                for (r, &c) in cols.iter().enumerate() {
                    dx[r * width + c] += g.data()[r];
                }
                acc(grads, *x, &Tensor::new(tx.shape().to_vec(), dx).unwrap());
            }
            Op::DotConst { x, weights } => {
                let gv = g.item();
                let dx: Vec<f64> = weights.iter().map(|w| w * gv).collect();
                acc(grads, *x, &Tensor::vector(dx));
            }
            Op::AddN(parts) => {
                for &p in parts {
                    acc(grads, p, g);
                }
            }
        }
    }
}

/// Dense per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn of(&self, id: TensorId) -> &Tensor {
        &self.grads[id.index()]
    }
}

fn acc(grads: &mut [Option<Tensor>], id: TensorId, delta: &Tensor) {
    match &mut grads[id.index()] {
        Some(t) => {
            for (a, d) in t.data_mut().iter_mut().zip(delta.data()) {
                *a += d;
            }
        }
        slot => *slot = Some(delta.clone()),
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::AddRowVec(..) => "add_row_vec",
        Op::Mul(..) => "mul",
        Op::MulRowVec(..) => "mul_row_vec",
        Op::DivColVec(..) => "div_col_vec",
        Op::MulScalar(..) => "mul_scalar",
        Op::Scale(..) => "scale",
        Op::Relu(..) => "relu",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::GatherRows { .. } => "gather_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols { .. } => "slice_cols",
        Op::SumRows(..) => "sum_rows",
        Op::SumAll(..) => "sum_all",
        Op::PickPerRow { .. } => "pick_per_row",
        Op::DotConst { .. } => "dot_const",
        Op::AddN(..) => "add_n",
    }
}

// ── Raw kernels (shared by forward and backward) ────────────────────

pub(crate) fn matmul_raw(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let arow = a.row(i);
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate().take(k) {
            let brow = &b.data()[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], c).expect("matmul shape")
}

pub(crate) fn transpose_raw(t: &Tensor) -> Tensor {
    let (m, n) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = t.at(i, j);
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose shape")
}

fn rowwise(t: &Tensor, op: &'static str, f: fn(&[f64], &mut [f64])) -> Result<Tensor> {
    let (rows, n) = match t.rank() {
        1 => (1, t.shape()[0]),
        2 => (t.shape()[0], t.shape()[1]),
        _ => {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            })
        }
    };
    if n == 0 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut out = vec![0.0; t.len()];
    for r in 0..rows {
        f(&t.data()[r * n..(r + 1) * n], &mut out[r * n..(r + 1) * n]);
    }
    Tensor::new(t.shape().to_vec(), out)
}

/// Numerically stable softmax of one row (max subtraction).
pub fn softmax_slice(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Stable log-softmax of one row.
pub fn log_softmax_slice(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = x - max - log_sum;
    }
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, (var + eps).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(g: &mut Graph, rows: usize, cols: usize, data: Vec<f64>) -> TensorId {
        g.leaf(Tensor::matrix(rows, cols, data).unwrap())
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 2, vec![1., 2., 3., 4.]);
        let i = mat(&mut g, 2, 2, vec![1., 0., 0., 1.]);
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1., 2., 3., 4.]);

        let col = mat(&mut g, 2, 1, vec![5., 7.]);
        let d = g.matmul(i, col).unwrap();
        assert_eq!(g.value(d).data(), &[5., 7.]);
    }

    #[test]
    fn matmul_direct() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 2, vec![1., 2., 3., 4.]);
        let b = mat(&mut g, 2, 1, vec![1., 1.]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[3., 7.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = mat(&mut g, 2, 3, vec![0.; 6]);
        let b = mat(&mut g, 2, 2, vec![0.; 4]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![0., 0., 0.]));
        let s = g.softmax_rows(x).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let big = g.leaf(Tensor::vector(vec![1000., 1000.]));
        let s2 = g.softmax_rows(big).unwrap();
        assert!(g.value(s2).all_finite());
        for v in g.value(s2).data() {
            assert!((v - 0.5).abs() < 1e-15);
        }

        let x3 = g.leaf(Tensor::vector(vec![0.0, 3.0f64.ln()]));
        let s3 = g.softmax_rows(x3).unwrap();
        assert!((g.value(s3).data()[0] - 0.25).abs() < 1e-12);
        assert!((g.value(s3).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_empty() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![]));
        assert!(g.softmax_rows(x).is_err());
    }

    #[test]
    fn backward_sum_of_squares() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1., 2.]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(w).data(), &[2., 4.]);
    }

    #[test]
    fn backward_disconnected_is_zero() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1., 2.]));
        let p = g.leaf(Tensor::vector(vec![5., 5.]));
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(p).data(), &[0., 0.]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let w = g.leaf(Tensor::vector(vec![1., 2.]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut g = Graph::new();
        let mut rng = RngStream::new(0, 0);
        let x = g.leaf(Tensor::vector(vec![1., 2., 3.]));
        let y = g.dropout(x, 0.0, true, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_inference_is_identity() {
        let mut g = Graph::new();
        let mut rng = RngStream::new(0, 0);
        let x = g.leaf(Tensor::vector(vec![1., 2., 3.]));
        let y = g.dropout(x, 0.3, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn dropout_rejects_rate_one() {
        let mut g = Graph::new();
        let mut rng = RngStream::new(0, 0);
        let x = g.leaf(Tensor::vector(vec![1.0]));
        assert!(g.dropout(x, 1.0, true, &mut rng).is_err());
    }

    #[test]
    fn dropout_zero_fraction_concentrates() {
        // Binomial check: zero fraction within 3σ of the rate over 10⁴ elements.
        let n = 20_000;
        let rate = 0.5;
        let mut g = Graph::new();
        let mut rng = RngStream::new(11, 0);
        let x = g.leaf(Tensor::from_fn(vec![n], || 1.0));
        let y = g.dropout(x, rate, true, &mut rng).unwrap();
        let zeros = g.value(y).data().iter().filter(|v| **v == 0.0).count();
        let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!((zeros as f64 - n as f64 * rate).abs() < 3.0 * sigma);
    }

    #[test]
    fn dropout_masks_reproduce_bit_for_bit() {
        let run = || {
            let mut g = Graph::new();
            let mut rng = RngStream::new(99, 7);
            let x = g.leaf(Tensor::from_fn(vec![64], || 1.0));
            let y = g.dropout(x, 0.3, true, &mut rng).unwrap();
            g.value(y).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn dropout_preserves_expectation() {
        // Inverted scaling: E[dropout(x)] == x, empirically within 3σ.
        let trials = 40_000;
        let rate = 0.3;
        let mut g = Graph::new();
        let mut rng = RngStream::new(5, 0);
        let x = g.leaf(Tensor::from_fn(vec![trials], || 2.0));
        let y = g.dropout(x, rate, true, &mut rng).unwrap();
        let mean = g.value(y).data().iter().sum::<f64>() / trials as f64;
        // Each element is 0 or 2/(1-rate); std of the mean:
        let per_var = rate / (1.0 - rate) * 4.0;
        let sigma = (per_var / trials as f64).sqrt();
        assert!((mean - 2.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut g = Graph::new();
        let t = mat(&mut g, 2, 2, vec![1., 2., 3., 4.]);
        assert!(matches!(
            g.gather_rows(t, &[0, 2]),
            Err(Error::OutOfVocab { id: 2, .. })
        ));
    }
}
