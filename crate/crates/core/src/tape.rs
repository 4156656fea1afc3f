//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Ops execute eagerly and are recorded on the tape; `backward` walks the
//! record in reverse to accumulate gradients. A tape is confined to one
//! worker; independent tapes run in parallel freely.

use std::collections::BTreeMap;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TapeError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite values encountered in {op}")]
    NonFinite { op: &'static str },
    #[error("backward called before any forward op was recorded")]
    BackwardBeforeForward,
    #[error("invalid node id {0}")]
    InvalidNode(usize),
    #[error("seed gradient shape {seed:?} does not match output shape {output:?}")]
    SeedShape { seed: Vec<usize>, output: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, TapeError>;

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub usize);

/// Named parameter tensors with a trainable mask.
#[derive(Clone, Debug)]
pub struct ParameterSet<S: Scalar> {
    entries: BTreeMap<String, (Tensor<S>, bool)>,
}

impl<S: Scalar> Default for ParameterSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParameterSet<S> {
    pub fn new() -> Self {
        ParameterSet { entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<S>) {
        self.entries.insert(name.to_string(), (value, true));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name).map(|(t, _)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.entries.get_mut(name).map(|(t, _)| t)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).map_or(false, |(_, t)| *t)
    }

    pub fn set_trainable<F: Fn(&str) -> bool>(&mut self, pred: F) {
        for (name, (_, t)) in self.entries.iter_mut() {
            *t = pred(name);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>, bool)> {
        self.entries.iter().map(|(k, (t, m))| (k.as_str(), t, *m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn merge(&mut self, other: ParameterSet<S>) {
        self.entries.extend(other.entries);
    }

    pub fn cast<T: Scalar>(&self) -> ParameterSet<T> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, (t, m))| (k.clone(), (t.cast::<T>(), *m)))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
enum Op<S: Scalar> {
    /// Leaf value fed into the tape; `param` carries the parameter name.
    Input { param: Option<String> },
    Matmul,
    Add,
    Sub,
    /// Row-broadcast bias add: matrix (m,n) + vector (n).
    AddBias,
    Mul,
    Scale(S),
    Concat { axis: usize },
    Slice { row0: usize, col0: usize, col1: usize },
    /// Row selection with scatter-add backward (embedding lookup).
    Gather { rows: Vec<usize> },
    Sigmoid,
    Tanh,
    Relu,
    /// Elementwise multiply by a recorded mask (dropout, freezes randomness).
    Dropout { mask: Tensor<S> },
    /// Width-2 left-padded convolution: [x (T,d), w (2d,k), b (k)] -> (T,k).
    CausalConv2,
    Sum,
    Mean,
    /// Elementwise (a-b)^2.
    SquaredError,
    /// Mean over rows of (logsumexp(row) - row[target]).
    CrossEntropyRows { targets: Vec<usize> },
}

struct Node<S: Scalar> {
    op: Op<S>,
    inputs: Vec<usize>,
    value: Tensor<S>,
}

/// Ordered record of primitive ops with their inputs and outputs.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_raw<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![S::ZERO; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// a^T * b for gradient accumulation.
fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![S::ZERO; k * n];
    for i in 0..m {
        for p in 0..k {
            let v = a.data()[i * k + p];
            for j in 0..n {
                out[p * n + j] += v * b.data()[i * n + j];
            }
        }
    }
    Tensor::new(vec![k, n], out)
}

/// a * b^T for gradient accumulation.
fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, n, k) = (a.rows(), a.cols(), b.rows());
    let mut out = vec![S::ZERO; m * k];
    for i in 0..m {
        for p in 0..k {
            let mut acc = S::ZERO;
            for j in 0..n {
                acc += a.data()[i * n + j] * b.data()[p * n + j];
            }
            out[i * k + p] = acc;
        }
    }
    Tensor::new(vec![m, k], out)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<S>, inputs: Vec<usize>, value: Tensor<S>, opname: &'static str) -> Result<NodeId> {
        if !value.is_all_finite() {
            return Err(TapeError::NonFinite { op: opname });
        }
        self.nodes.push(Node { op, inputs, value });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Feed a plain value into the tape.
    pub fn input(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push(Op::Input { param: None }, vec![], value, "input")
    }

    /// Feed a named parameter; its gradient is collected by `param_grads`.
    pub fn param(&mut self, name: &str, params: &ParameterSet<S>) -> Result<NodeId> {
        let value = params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
            .clone();
        self.push(Op::Input { param: Some(name.to_string()) }, vec![], value, "input")
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.cols() != tb.rows() {
            return Err(TapeError::ShapeMismatch {
                op: "matmul",
                detail: format!("{:?} x {:?}", ta.shape(), tb.shape()),
            });
        }
        let value = matmul_raw(ta, tb);
        self.push(Op::Matmul, vec![a.0, b.0], value, "matmul")
    }

    fn elementwise2(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<S>,
        opname: &'static str,
        f: impl Fn(S, S) -> S,
    ) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(TapeError::ShapeMismatch {
                op: opname,
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data);
        self.push(op, vec![a.0, b.0], value, opname)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, Op::Add, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, Op::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, Op::Mul, "multiply", |x, y| x * y)
    }

    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise2(a, b, Op::SquaredError, "squared-error", |x, y| (x - y) * (x - y))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        if tx.cols() != tb.numel() {
            return Err(TapeError::ShapeMismatch {
                op: "add-bias",
                detail: format!("{:?} + {:?}", tx.shape(), tb.shape()),
            });
        }
        let n = tx.cols();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % n])
            .collect();
        let value = Tensor::new(tx.shape().to_vec(), data);
        self.push(Op::AddBias, vec![x.0, bias.0], value, "add-bias")
    }

    pub fn scale(&mut self, x: NodeId, c: S) -> Result<NodeId> {
        let value = self.nodes[x.0].value.map(|v| v * c);
        self.push(Op::Scale(c), vec![x.0], value, "scale")
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(TapeError::ShapeMismatch { op: "concat", detail: "no inputs".into() });
        }
        let value = match axis {
            0 => {
                let cols = self.nodes[parts[0].0].value.cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for p in parts {
                    let t = &self.nodes[p.0].value;
                    if t.cols() != cols {
                        return Err(TapeError::ShapeMismatch {
                            op: "concat",
                            detail: format!("column mismatch {} vs {}", t.cols(), cols),
                        });
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::new(vec![rows, cols], data)
            }
            1 => {
                let rows = self.nodes[parts[0].0].value.rows();
                let widths: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.cols()).collect();
                for p in parts {
                    if self.nodes[p.0].value.rows() != rows {
                        return Err(TapeError::ShapeMismatch {
                            op: "concat",
                            detail: "row mismatch".into(),
                        });
                    }
                }
                let total: usize = widths.iter().sum();
                let mut data = vec![S::ZERO; rows * total];
                let mut off = 0;
                for (p, w) in parts.iter().zip(&widths) {
                    let t = &self.nodes[p.0].value;
                    for r in 0..rows {
                        data[r * total + off..r * total + off + w]
                            .copy_from_slice(&t.data()[r * w..(r + 1) * w]);
                    }
                    off += w;
                }
                Tensor::new(vec![rows, total], data)
            }
            _ => {
                return Err(TapeError::ShapeMismatch {
                    op: "concat",
                    detail: format!("unsupported axis {axis}"),
                })
            }
        };
        self.push(Op::Concat { axis }, parts.iter().map(|p| p.0).collect(), value, "concat")
    }

    pub fn slice(&mut self, x: NodeId, row0: usize, row1: usize, col0: usize, col1: usize) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if row1 > t.rows() || col1 > t.cols() || row0 >= row1 || col0 >= col1 {
            return Err(TapeError::ShapeMismatch {
                op: "slice",
                detail: format!("[{row0}..{row1}, {col0}..{col1}] of {:?}", t.shape()),
            });
        }
        let cols = t.cols();
        let mut data = Vec::with_capacity((row1 - row0) * (col1 - col0));
        for r in row0..row1 {
            data.extend_from_slice(&t.data()[r * cols + col0..r * cols + col1]);
        }
        let value = Tensor::new(vec![row1 - row0, col1 - col0], data);
        self.push(Op::Slice { row0, col0, col1 }, vec![x.0], value, "slice")
    }

    pub fn gather(&mut self, x: NodeId, rows: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        let cols = t.cols();
        let nrows = t.rows();
        for &r in rows {
            if r >= nrows {
                return Err(TapeError::ShapeMismatch {
                    op: "gather",
                    detail: format!("row {r} out of {nrows}"),
                });
            }
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(&t.data()[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![rows.len(), cols], data);
        self.push(Op::Gather { rows: rows.to_vec() }, vec![x.0], value, "gather")
    }

    fn unary(&mut self, x: NodeId, op: Op<S>, opname: &'static str, f: impl Fn(S) -> S) -> Result<NodeId> {
        let value = self.nodes[x.0].value.map(f);
        self.push(op, vec![x.0], value, opname)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Sigmoid, "sigmoid", |v| S::ONE / (S::ONE + (-v).exp()))
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Tanh, "tanh", |v| v.tanh())
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary(x, Op::Relu, "relu", |v| v.max(S::ZERO))
    }

    /// Dropout as multiplication by a caller-supplied recorded mask. Masks are
    /// Bernoulli(1-p) scaled by 1/(1-p) at train time; identity at eval.
    pub fn dropout(&mut self, x: NodeId, mask: Tensor<S>) -> Result<NodeId> {
        let t = &self.nodes[x.0].value;
        if t.shape() != mask.shape() {
            return Err(TapeError::ShapeMismatch {
                op: "dropout",
                detail: format!("{:?} vs mask {:?}", t.shape(), mask.shape()),
            });
        }
        let data = t.data().iter().zip(mask.data()).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data);
        self.push(Op::Dropout { mask }, vec![x.0], value, "dropout")
    }

    /// Width-2 left-padded convolution over a (T,d) sequence. Weight rows
    /// 0..d act on the previous timestep (zero pad at t=0), rows d..2d on the
    /// current one.
    pub fn causal_conv2(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            &self.nodes[bias.0].value,
        );
        let (t_len, d, k) = (tx.rows(), tx.cols(), tw.cols());
        if tw.rows() != 2 * d || tb.numel() != k {
            return Err(TapeError::ShapeMismatch {
                op: "causal-conv2",
                detail: format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            });
        }
        let mut data = vec![S::ZERO; t_len * k];
        for t in 0..t_len {
            for j in 0..k {
                let mut acc = tb.data()[j];
                if t > 0 {
                    for c in 0..d {
                        acc += tx.at(t - 1, c) * tw.at(c, j);
                    }
                }
                for c in 0..d {
                    acc += tx.at(t, c) * tw.at(d + c, j);
                }
                data[t * k + j] = acc;
            }
        }
        let value = Tensor::new(vec![t_len, k], data);
        self.push(Op::CausalConv2, vec![x.0, w.0, bias.0], value, "causal-conv2")
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let mut acc = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        self.push(Op::Sum, vec![x.0], Tensor::scalar(acc), "sum")
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        let n = self.nodes[x.0].value.numel();
        let mut acc = S::ZERO;
        for &v in self.nodes[x.0].value.data() {
            acc += v;
        }
        let value = Tensor::scalar(acc / S::from_f64(n as f64));
        self.push(Op::Mean, vec![x.0], value, "mean")
    }

    /// Mean over rows of (logsumexp(row) - row[target]); the negative
    /// log-likelihood head for language modeling.
    pub fn cross_entropy_rows(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let t = &self.nodes[logits.0].value;
        let (rows, cols) = (t.rows(), t.cols());
        if targets.len() != rows {
            return Err(TapeError::ShapeMismatch {
                op: "cross-entropy",
                detail: format!("{} targets for {} rows", targets.len(), rows),
            });
        }
        for &tgt in targets {
            if tgt >= cols {
                return Err(TapeError::ShapeMismatch {
                    op: "cross-entropy",
                    detail: format!("target {tgt} out of {cols}"),
                });
            }
        }
        let mut acc = S::ZERO;
        for (r, &tgt) in targets.iter().enumerate() {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let mx = row.iter().fold(row[0], |m, &v| m.max(v));
            let mut lse = S::ZERO;
            for &v in row {
                lse += (v - mx).exp();
            }
            acc += mx + lse.ln() - row[tgt];
        }
        let value = Tensor::scalar(acc / S::from_f64(rows as f64));
        self.push(
            Op::CrossEntropyRows { targets: targets.to_vec() },
            vec![logits.0],
            value,
            "cross-entropy",
        )
    }

    /// Recompute every node's value from the recorded ops. Returns the values
    /// in node order; bit-identical to the recorded ones in the same precision.
    pub fn replay(&self) -> Vec<Tensor<S>> {
        let mut values: Vec<Tensor<S>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let get = |i: usize| &values[node.inputs[i]];
            let v = match &node.op {
                Op::Input { .. } => node.value.clone(),
                Op::Matmul => matmul_raw(get(0), get(1)),
                Op::Add => zipmap(get(0), get(1), |x, y| x + y),
                Op::Sub => zipmap(get(0), get(1), |x, y| x - y),
                Op::Mul => zipmap(get(0), get(1), |x, y| x * y),
                Op::SquaredError => zipmap(get(0), get(1), |x, y| (x - y) * (x - y)),
                Op::AddBias => {
                    let (x, b) = (get(0), get(1));
                    let n = x.cols();
                    Tensor::new(
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .enumerate()
                            .map(|(i, &v)| v + b.data()[i % n])
                            .collect(),
                    )
                }
                Op::Scale(c) => get(0).map(|v| v * *c),
                Op::Sigmoid => get(0).map(|v| S::ONE / (S::ONE + (-v).exp())),
                Op::Tanh => get(0).map(|v| v.tanh()),
                Op::Relu => get(0).map(|v| v.max(S::ZERO)),
                Op::Dropout { mask } => zipmap(get(0), mask, |x, m| x * m),
                _ => node.value.clone(), // structural ops replay their record
            };
            values.push(v);
        }
        values
    }

    /// Reverse sweep from `output`, seeded with `seed` (ones if omitted).
    /// Returns per-node gradients; use `param_grads` for named collection.
    pub fn backward(&self, output: NodeId, seed: Option<Tensor<S>>) -> Result<Vec<Option<Tensor<S>>>> {
        if self.nodes.is_empty() {
            return Err(TapeError::BackwardBeforeForward);
        }
        if output.0 >= self.nodes.len() {
            return Err(TapeError::InvalidNode(output.0));
        }
        let out_shape = self.nodes[output.0].value.shape().to_vec();
        let seed = match seed {
            Some(s) => {
                if s.shape() != out_shape.as_slice() {
                    return Err(TapeError::SeedShape { seed: s.shape().to_vec(), output: out_shape });
                }
                s
            }
            None => Tensor::full(out_shape, S::ONE),
        };
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            let mut contribs: Vec<(usize, Tensor<S>)> = Vec::new();
            match &node.op {
                Op::Input { .. } => {}
                Op::Matmul => {
                    let a = &self.nodes[node.inputs[0]].value;
                    let b = &self.nodes[node.inputs[1]].value;
                    contribs.push((node.inputs[0], matmul_nt(&g, b)));
                    contribs.push((node.inputs[1], matmul_tn(a, &g)));
                }
                Op::Add => {
                    contribs.push((node.inputs[0], g.clone()));
                    contribs.push((node.inputs[1], g.clone()));
                }
                Op::Sub => {
                    contribs.push((node.inputs[0], g.clone()));
                    contribs.push((node.inputs[1], g.map(|v| -v)));
                }
                Op::Mul => {
                    let a = &self.nodes[node.inputs[0]].value;
                    let b = &self.nodes[node.inputs[1]].value;
                    contribs.push((node.inputs[0], zipmap(&g, b, |x, y| x * y)));
                    contribs.push((node.inputs[1], zipmap(&g, a, |x, y| x * y)));
                }
                Op::SquaredError => {
                    let a = &self.nodes[node.inputs[0]].value;
                    let b = &self.nodes[node.inputs[1]].value;
                    let diff = zipmap(a, b, |x, y| x - y);
                    let two = S::from_f64(2.0);
                    contribs.push((node.inputs[0], zipmap(&g, &diff, |gv, d| gv * two * d)));
                    contribs.push((node.inputs[1], zipmap(&g, &diff, |gv, d| -(gv * two * d))));
                }
                Op::AddBias => {
                    contribs.push((node.inputs[0], g.clone()));
                    let n = self.nodes[node.inputs[1]].value.numel();
                    let mut bg = vec![S::ZERO; n];
                    for (i, &v) in g.data().iter().enumerate() {
                        bg[i % n] += v;
                    }
                    contribs.push((node.inputs[1], Tensor::new(vec![n], bg)));
                }
                Op::Scale(c) => {
                    contribs.push((node.inputs[0], g.map(|v| v * *c)));
                }
                Op::Concat { axis } => match axis {
                    0 => {
                        let mut row = 0;
                        let cols = g.cols();
                        for &inp in &node.inputs {
                            let r = self.nodes[inp].value.rows();
                            let data = g.data()[row * cols..(row + r) * cols].to_vec();
                            contribs.push((inp, Tensor::new(vec![r, cols], data)));
                            row += r;
                        }
                    }
                    _ => {
                        let rows = g.rows();
                        let total = g.cols();
                        let mut off = 0;
                        for &inp in &node.inputs {
                            let w = self.nodes[inp].value.cols();
                            let mut data = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                data.extend_from_slice(&g.data()[r * total + off..r * total + off + w]);
                            }
                            contribs.push((inp, Tensor::new(vec![rows, w], data)));
                            off += w;
                        }
                    }
                },
                Op::Slice { row0, col0, col1 } => {
                    let src = &self.nodes[node.inputs[0]].value;
                    let mut full = Tensor::zeros(src.shape().to_vec());
                    let cols = src.cols();
                    let w = col1 - col0;
                    for (r, chunk) in g.data().chunks(w).enumerate() {
                        let base = (row0 + r) * cols + col0;
                        full.data_mut()[base..base + w].copy_from_slice(chunk);
                    }
                    contribs.push((node.inputs[0], full));
                }
                Op::Gather { rows } => {
                    let src = &self.nodes[node.inputs[0]].value;
                    let cols = src.cols();
                    let mut full = Tensor::zeros(src.shape().to_vec());
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            full.data_mut()[r * cols + c] += g.data()[i * cols + c];
                        }
                    }
                    contribs.push((node.inputs[0], full));
                }
                Op::Sigmoid => {
                    let y = &node.value;
                    contribs.push((node.inputs[0], zipmap(&g, y, |gv, yv| gv * yv * (S::ONE - yv))));
                }
                Op::Tanh => {
                    let y = &node.value;
                    contribs.push((node.inputs[0], zipmap(&g, y, |gv, yv| gv * (S::ONE - yv * yv))));
                }
                Op::Relu => {
                    let x = &self.nodes[node.inputs[0]].value;
                    contribs.push((
                        node.inputs[0],
                        zipmap(&g, x, |gv, xv| if xv > S::ZERO { gv } else { S::ZERO }),
                    ));
                }
                Op::Dropout { mask } => {
                    contribs.push((node.inputs[0], zipmap(&g, mask, |gv, m| gv * m)));
                }
                Op::CausalConv2 => {
                    let x = &self.nodes[node.inputs[0]].value;
                    let w = &self.nodes[node.inputs[1]].value;
                    let (t_len, d, k) = (x.rows(), x.cols(), w.cols());
                    let mut gx = Tensor::zeros(vec![t_len, d]);
                    let mut gw = Tensor::zeros(vec![2 * d, k]);
                    let mut gb = Tensor::zeros(vec![k]);
                    for t in 0..t_len {
                        for j in 0..k {
                            let gv = g.at(t, j);
                            gb.data_mut()[j] += gv;
                            for c in 0..d {
                                // current-word block
                                gx.data_mut()[t * d + c] += gv * w.at(d + c, j);
                                gw.data_mut()[(d + c) * k + j] += gv * x.at(t, c);
                                // previous-word block
                                if t > 0 {
                                    gx.data_mut()[(t - 1) * d + c] += gv * w.at(c, j);
                                    gw.data_mut()[c * k + j] += gv * x.at(t - 1, c);
                                }
                            }
                        }
                    }
                    contribs.push((node.inputs[0], gx));
                    contribs.push((node.inputs[1], gw));
                    contribs.push((node.inputs[2], gb));
                }
                Op::Sum => {
                    let src = &self.nodes[node.inputs[0]].value;
                    let gv = g.item();
                    contribs.push((node.inputs[0], Tensor::full(src.shape().to_vec(), gv)));
                }
                Op::Mean => {
                    let src = &self.nodes[node.inputs[0]].value;
                    let gv = g.item() / S::from_f64(src.numel() as f64);
                    contribs.push((node.inputs[0], Tensor::full(src.shape().to_vec(), gv)));
                }
                Op::CrossEntropyRows { targets } => {
                    let logits = &self.nodes[node.inputs[0]].value;
                    let (rows, cols) = (logits.rows(), logits.cols());
                    let gv = g.item() / S::from_f64(rows as f64);
                    let mut gl = Tensor::zeros(vec![rows, cols]);
                    for (r, &tgt) in targets.iter().enumerate() {
                        let row = &logits.data()[r * cols..(r + 1) * cols];
                        let mx = row.iter().fold(row[0], |m, &v| m.max(v));
                        let mut z = S::ZERO;
                        for &v in row {
                            z += (v - mx).exp();
                        }
                        for c in 0..cols {
                            let sm = (row[c] - mx).exp() / z;
                            let ind = if c == tgt { S::ONE } else { S::ZERO };
                            gl.data_mut()[r * cols + c] = gv * (sm - ind);
                        }
                    }
                    contribs.push((node.inputs[0], gl));
                }
            }
            for (inp, contrib) in contribs {
                match &mut grads[inp] {
                    Some(existing) => {
                        for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                            *e += *c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradients for every trainable entry of `params`; parameters not reached
    /// by the output get zeros of the matching shape.
    pub fn param_grads(
        &self,
        output: NodeId,
        seed: Option<Tensor<S>>,
        params: &ParameterSet<S>,
    ) -> Result<BTreeMap<String, Tensor<S>>> {
        let grads = self.backward(output, seed)?;
        let mut by_name: BTreeMap<String, Tensor<S>> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Input { param: Some(name) } = &node.op {
                if let Some(g) = &grads[idx] {
                    match by_name.get_mut(name) {
                        Some(acc) => {
                            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                        None => {
                            by_name.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
        }
        for (name, value, trainable) in params.iter() {
            if trainable {
                by_name
                    .entry(name.to_string())
                    .or_insert_with(|| Tensor::zeros(value.shape().to_vec()));
            }
        }
        by_name.retain(|name, _| params.is_trainable(name));
        Ok(by_name)
    }
}

fn zipmap<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    debug_assert_eq!(a.shape(), b.shape());
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// Max relative error between analytic gradients and central finite
/// differences, |analytic - central| / (|central| + eps). The closure builds
/// a scalar output from an input node holding `point`; it is re-run for every
/// perturbed component, so it must be deterministic.
pub fn grad_check<F>(build: F, point: &Tensor<f64>, step: f64) -> f64
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    let eval = |p: &Tensor<f64>| -> Option<f64> {
        let mut tape = Tape::new();
        let x = tape.input(p.clone()).ok()?;
        let out = build(&mut tape, x).ok()?;
        let v = tape.value(out).item();
        v.is_finite().then_some(v)
    };

    let mut tape = Tape::new();
    let x = match tape.input(point.clone()) {
        Ok(x) => x,
        Err(_) => return f64::INFINITY,
    };
    let out = match build(&mut tape, x) {
        Ok(o) => o,
        Err(_) => return f64::INFINITY,
    };
    let grads = match tape.backward(out, None) {
        Ok(g) => g,
        Err(_) => return f64::INFINITY,
    };
    let analytic = match &grads[x.0] {
        Some(g) => g.clone(),
        None => Tensor::zeros(point.shape().to_vec()),
    };

    let eps = 1e-12;
    let mut max_rel = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let (fp, fm) = match (eval(&plus), eval(&minus)) {
            (Some(a), Some(b)) => (a, b),
            _ => return f64::INFINITY,
        };
        let central = (fp - fm) / (2.0 * step);
        let rel = (analytic.data()[i] - central).abs() / (central.abs() + eps);
        if !rel.is_finite() {
            return f64::INFINITY;
        }
        max_rel = max_rel.max(rel);
    }
    max_rel
}
