//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! A [`Tape`] records a directed acyclic graph of tensor operations in
//! execution order. Leaves are either constants or named parameters; calling
//! [`Tape::backward`] replays the recorded ops in reverse, accumulating
//! adjoints, and returns one gradient tensor per registered parameter.
//!
//! The op set is intentionally small and fully enumerated: every op has an
//! exact analytic reverse rule, and every op is covered by a central
//! finite-difference property test. There is no implicit broadcasting beyond
//! single-element-tensor-times-tensor multiplication and the row-wise bias add
//! inside `affine`.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps weight names to leaves already bound on a tape. Model forwards resolve
/// each weight through a binding: bound names participate in gradients, all
/// other weights enter the graph as constants. An empty binding therefore runs
/// the model fully frozen.
#[derive(Default)]
pub struct Binding {
    map: HashMap<String, ValueRef>,
}

impl Binding {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, leaf: ValueRef) {
        self.map.insert(name.to_string(), leaf);
    }

    pub fn get(&self, name: &str) -> Option<ValueRef> {
        self.map.get(name).copied()
    }

    /// The bound leaf for `name`, or `fallback` recorded as a constant.
    pub fn resolve(&self, tape: &mut Tape, name: &str, fallback: &Tensor) -> ValueRef {
        match self.map.get(name) {
            Some(&r) => r,
            None => tape.constant(fallback.clone()),
        }
    }
}

/// Identifier for a trainable parameter, assigned by the caller (usually a
/// [`crate::optim::ParamStore`]). Gradients from [`Tape::backward`] are keyed
/// by this id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Handle to a value recorded on a specific tape. Using a ref on a different
/// tape than the one that created it is a contract error, not silent misbehavior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueRef {
    tape: u64,
    index: usize,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone)]
enum Node {
    Leaf { param: Option<ParamId> },
    Op { op: OpKind, inputs: Vec<usize> },
}

#[derive(Debug, Clone)]
enum OpKind {
    Add,
    Sub,
    /// Elementwise product; either operand may be a single-element tensor,
    /// which then scales the other operand.
    Mul,
    /// Multiplication by a compile-time constant factor.
    Scale(f64),
    /// `[m,k] @ [k,n] -> [m,n]`
    MatMul,
    /// `[m,k] @ [n,k]^T -> [m,n]` (saves explicit transposes in attention).
    MatMulTB,
    Sum,
    Mean,
    /// Sum of squared entries.
    SqNorm,
    /// Row-wise softmax (a rank-1 input is treated as a single row).
    Softmax,
    Tanh,
    /// `x @ w + b` with `b` broadcast across rows: inputs `[x, w, b]`.
    Affine,
    /// Stack matrices with equal column counts along the row axis.
    ConcatRows,
    /// Select rows of a matrix by index; duplicate indices are allowed and
    /// accumulate gradient into the same source row.
    GatherRows(Vec<usize>),
}

/// Wengert tape: an append-only record of tensor ops in execution order.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    values: Vec<Tensor>,
    /// Param id -> node index, used to detect duplicate registration and to
    /// collect gradients (zero for params the loss never touched).
    params: Vec<(ParamId, usize)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            values: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant leaf; no gradient will be tracked for it.
    pub fn constant(&mut self, value: Tensor) -> ValueRef {
        self.push(Node::Leaf { param: None }, value)
    }

    /// Records a trainable leaf. Each `ParamId` may be bound at most once per tape.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Result<ValueRef> {
        if self.params.iter().any(|&(p, _)| p == id) {
            return Err(Error::Contract(format!("param {id:?} bound twice on one tape")));
        }
        let r = self.push(Node::Leaf { param: Some(id) }, value);
        self.params.push((id, r.index));
        Ok(r)
    }

    /// The forward value behind a ref.
    pub fn value(&self, r: ValueRef) -> Result<&Tensor> {
        self.check(r)?;
        Ok(&self.values[r.index])
    }

    /// Convenience: the forward value of a single-element ref.
    pub fn scalar_value(&self, r: ValueRef) -> Result<f64> {
        self.value(r)?.scalar_value()
    }

    // ---- recorded ops ------------------------------------------------------

    pub fn add(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let out = ta.zip(tb, |x, y| x + y).map_err(|_| Error::Shape {
            op: "add",
            detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        })?;
        self.push_op(OpKind::Add, vec![a.index, b.index], out, "add")
    }

    pub fn sub(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let out = ta.zip(tb, |x, y| x - y).map_err(|_| Error::Shape {
            op: "sub",
            detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
        })?;
        self.push_op(OpKind::Sub, vec![a.index, b.index], out, "sub")
    }

    pub fn mul(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let out = if ta.is_scalar() && !tb.is_scalar() {
            let s = ta.data()[0];
            tb.map(|y| s * y)
        } else if tb.is_scalar() && !ta.is_scalar() {
            let s = tb.data()[0];
            ta.map(|x| x * s)
        } else if ta.shape() == tb.shape() {
            ta.zip(tb, |x, y| x * y)?
        } else {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            });
        };
        self.push_op(OpKind::Mul, vec![a.index, b.index], out, "mul")
    }

    pub fn scale(&mut self, a: ValueRef, c: f64) -> Result<ValueRef> {
        let out = self.value(a)?.scaled(c);
        self.push_op(OpKind::Scale(c), vec![a.index], out, "scale")
    }

    pub fn matmul(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let (m, k) = (ta.rows()?, ta.cols()?);
        let (kb, n) = (tb.rows()?, tb.cols()?);
        if k != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} @ {:?}", ta.shape(), tb.shape()),
            });
        }
        let out = Tensor::new(vec![m, n], mm(ta.data(), m, k, tb.data(), n))?;
        self.push_op(OpKind::MatMul, vec![a.index, b.index], out, "matmul")
    }

    /// `a @ b^T` without materializing the transpose.
    pub fn matmul_tb(&mut self, a: ValueRef, b: ValueRef) -> Result<ValueRef> {
        let (ta, tb) = (self.value(a)?, self.value(b)?);
        let (m, k) = (ta.rows()?, ta.cols()?);
        let (n, kb) = (tb.rows()?, tb.cols()?);
        if k != kb {
            return Err(Error::Shape {
                op: "matmul_tb",
                detail: format!("{:?} @ {:?}^T", ta.shape(), tb.shape()),
            });
        }
        let out = Tensor::new(vec![m, n], mm_tb(ta.data(), m, k, tb.data(), n))?;
        self.push_op(OpKind::MatMulTB, vec![a.index, b.index], out, "matmul_tb")
    }

    pub fn sum(&mut self, a: ValueRef) -> Result<ValueRef> {
        let s: f64 = self.value(a)?.data().iter().sum();
        self.push_op(OpKind::Sum, vec![a.index], Tensor::scalar(s), "sum")
    }

    pub fn mean(&mut self, a: ValueRef) -> Result<ValueRef> {
        let t = self.value(a)?;
        let s: f64 = t.data().iter().sum();
        let out = Tensor::scalar(s / t.len() as f64);
        self.push_op(OpKind::Mean, vec![a.index], out, "mean")
    }

    pub fn sq_norm(&mut self, a: ValueRef) -> Result<ValueRef> {
        let s = self.value(a)?.sq_norm();
        self.push_op(OpKind::SqNorm, vec![a.index], Tensor::scalar(s), "sq_norm")
    }

    pub fn softmax(&mut self, a: ValueRef) -> Result<ValueRef> {
        let t = self.value(a)?;
        let (rows, cols) = softmax_dims(t)?;
        let mut data = Vec::with_capacity(t.len());
        for r in 0..rows {
            let row = &t.data()[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let denom: f64 = exps.iter().sum();
            data.extend(exps.iter().map(|e| e / denom));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push_op(OpKind::Softmax, vec![a.index], out, "softmax")
    }

    pub fn tanh(&mut self, a: ValueRef) -> Result<ValueRef> {
        let out = self.value(a)?.map(f64::tanh);
        self.push_op(OpKind::Tanh, vec![a.index], out, "tanh")
    }

    /// `x @ w + b`, the linear-layer primitive. `x` is `[n, d_in]`, `w` is
    /// `[d_in, d_out]`, and the rank-1 bias `b` (`[d_out]`) is added to every row.
    pub fn affine(&mut self, x: ValueRef, w: ValueRef, b: ValueRef) -> Result<ValueRef> {
        let (tx, tw, tb) = (self.value(x)?, self.value(w)?, self.value(b)?);
        let (n, din) = (tx.rows()?, tx.cols()?);
        let (dinw, dout) = (tw.rows()?, tw.cols()?);
        if din != dinw || tb.shape() != [dout] {
            return Err(Error::Shape {
                op: "affine",
                detail: format!("x {:?}, w {:?}, b {:?}", tx.shape(), tw.shape(), tb.shape()),
            });
        }
        let mut data = mm(tx.data(), n, din, tw.data(), dout);
        for r in 0..n {
            for c in 0..dout {
                data[r * dout + c] += tb.data()[c];
            }
        }
        let out = Tensor::new(vec![n, dout], data)?;
        self.push_op(OpKind::Affine, vec![x.index, w.index, b.index], out, "affine")
    }

    /// Stacks matrices with identical column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[ValueRef]) -> Result<ValueRef> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows needs at least one input".into()));
        }
        let cols = self.value(parts[0])?.cols()?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p)?;
            if t.cols()? != cols {
                return Err(Error::Shape {
                    op: "concat_rows",
                    detail: format!("column mismatch: {cols} vs {:?}", t.shape()),
                });
            }
            rows += t.rows()?;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(vec![rows, cols], data)?;
        let inputs = parts.iter().map(|p| p.index).collect();
        self.push_op(OpKind::ConcatRows, inputs, out, "concat_rows")
    }

    /// Gathers `indices` rows of a matrix into a new matrix, in order.
    pub fn gather_rows(&mut self, a: ValueRef, indices: &[usize]) -> Result<ValueRef> {
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows needs at least one index".into()));
        }
        let t = self.value(a)?;
        let (rows, cols) = (t.rows()?, t.cols()?);
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Shape {
                    op: "gather_rows",
                    detail: format!("index {i} out of range for {rows} rows"),
                });
            }
            data.extend_from_slice(&t.data()[i * cols..(i + 1) * cols]);
        }
        let out = Tensor::new(vec![indices.len(), cols], data)?;
        self.push_op(OpKind::GatherRows(indices.to_vec()), vec![a.index], out, "gather_rows")
    }

    // ---- reverse pass ------------------------------------------------------

    /// Reverse-replays the tape from a scalar loss and returns one gradient per
    /// registered parameter. Parameters the loss does not depend on get exact
    /// zero gradients. The tape itself is immutable; calling `backward` twice
    /// returns bit-identical results.
    pub fn backward(&self, loss: ValueRef) -> Result<BTreeMap<ParamId, Tensor>> {
        self.check(loss)?;
        if !self.values[loss.index].is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.index].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.index] = Some(vec![1.0]);

        for idx in (0..self.nodes.len()).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let (op, inputs) = match &self.nodes[idx] {
                Node::Leaf { param } => {
                    // Keep leaf grads around for collection below.
                    if param.is_some() {
                        grads[idx] = Some(g);
                    }
                    continue;
                }
                Node::Op { op, inputs } => (op, inputs),
            };
            let out = &self.values[idx];
            match op {
                OpKind::Add => {
                    self.accumulate(&mut grads, inputs[0], &g);
                    self.accumulate(&mut grads, inputs[1], &g);
                }
                OpKind::Sub => {
                    self.accumulate(&mut grads, inputs[0], &g);
                    let neg: Vec<f64> = g.iter().map(|&x| -x).collect();
                    self.accumulate(&mut grads, inputs[1], &neg);
                }
                OpKind::Mul => {
                    let a = &self.values[inputs[0]];
                    let b = &self.values[inputs[1]];
                    if a.is_scalar() && !b.is_scalar() {
                        let da: f64 = g.iter().zip(b.data()).map(|(&gi, &bi)| gi * bi).sum();
                        self.accumulate(&mut grads, inputs[0], &[da]);
                        let s = a.data()[0];
                        let db: Vec<f64> = g.iter().map(|&gi| gi * s).collect();
                        self.accumulate(&mut grads, inputs[1], &db);
                    } else if b.is_scalar() && !a.is_scalar() {
                        let s = b.data()[0];
                        let da: Vec<f64> = g.iter().map(|&gi| gi * s).collect();
                        self.accumulate(&mut grads, inputs[0], &da);
                        let db: f64 = g.iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).sum();
                        self.accumulate(&mut grads, inputs[1], &[db]);
                    } else {
                        let da: Vec<f64> = g.iter().zip(b.data()).map(|(&gi, &bi)| gi * bi).collect();
                        let db: Vec<f64> = g.iter().zip(a.data()).map(|(&gi, &ai)| gi * ai).collect();
                        self.accumulate(&mut grads, inputs[0], &da);
                        self.accumulate(&mut grads, inputs[1], &db);
                    }
                }
                OpKind::Scale(c) => {
                    let da: Vec<f64> = g.iter().map(|&gi| gi * c).collect();
                    self.accumulate(&mut grads, inputs[0], &da);
                }
                OpKind::MatMul => {
                    let a = &self.values[inputs[0]];
                    let b = &self.values[inputs[1]];
                    let (m, k) = (a.rows().unwrap(), a.cols().unwrap());
                    let n = b.cols().unwrap();
                    // dA = g @ B^T, dB = A^T @ g
                    let da = mm_tb(&g, m, n, b.data(), k);
                    let db = mm_ta(a.data(), m, k, &g, n);
                    self.accumulate(&mut grads, inputs[0], &da);
                    self.accumulate(&mut grads, inputs[1], &db);
                }
                OpKind::MatMulTB => {
                    let a = &self.values[inputs[0]];
                    let b = &self.values[inputs[1]];
                    let (m, k) = (a.rows().unwrap(), a.cols().unwrap());
                    let n = b.rows().unwrap();
                    // out = A @ B^T: dA = g @ B, dB = g^T @ A
                    let da = mm(&g, m, n, b.data(), k);
                    let db = mm_ta(&g, m, n, a.data(), k);
                    self.accumulate(&mut grads, inputs[0], &da);
                    self.accumulate(&mut grads, inputs[1], &db);
                }
                OpKind::Sum => {
                    let a = &self.values[inputs[0]];
                    let da = vec![g[0]; a.len()];
                    self.accumulate(&mut grads, inputs[0], &da);
                }
                OpKind::Mean => {
                    let a = &self.values[inputs[0]];
                    let da = vec![g[0] / a.len() as f64; a.len()];
                    self.accumulate(&mut grads, inputs[0], &da);
                }
                OpKind::SqNorm => {
                    let a = &self.values[inputs[0]];
                    let da: Vec<f64> = a.data().iter().map(|&x| 2.0 * g[0] * x).collect();
                    self.accumulate(&mut grads, inputs[0], &da);
                }
                OpKind::Softmax => {
                    let (rows, cols) = softmax_dims(out).unwrap();
                    let s = out.data();
                    let mut da = vec![0.0; s.len()];
                    for r in 0..rows {
                        let base = r * cols;
                        let inner: f64 =
                            (0..cols).map(|c| g[base + c] * s[base + c]).sum();
                        for c in 0..cols {
                            da[base + c] = s[base + c] * (g[base + c] - inner);
                        }
                    }
                    self.accumulate(&mut grads, inputs[0], &da);
                }
                OpKind::Tanh => {
                    let y = out.data();
                    let da: Vec<f64> =
                        g.iter().zip(y).map(|(&gi, &yi)| gi * (1.0 - yi * yi)).collect();
                    self.accumulate(&mut grads, inputs[0], &da);
                }
                OpKind::Affine => {
                    let x = &self.values[inputs[0]];
                    let w = &self.values[inputs[1]];
                    let (n, din) = (x.rows().unwrap(), x.cols().unwrap());
                    let dout = w.cols().unwrap();
                    let dx = mm_tb(&g, n, dout, w.data(), din);
                    let dw = mm_ta(x.data(), n, din, &g, dout);
                    let mut db = vec![0.0; dout];
                    for r in 0..n {
                        for c in 0..dout {
                            db[c] += g[r * dout + c];
                        }
                    }
                    self.accumulate(&mut grads, inputs[0], &dx);
                    self.accumulate(&mut grads, inputs[1], &dw);
                    self.accumulate(&mut grads, inputs[2], &db);
                }
                OpKind::ConcatRows => {
                    let cols = out.cols().unwrap();
                    let mut offset = 0;
                    for &inp in inputs {
                        let len = self.values[inp].len();
                        self.accumulate(&mut grads, inp, &g[offset..offset + len]);
                        offset += len;
                        let _ = cols;
                    }
                }
                OpKind::GatherRows(indices) => {
                    let a = &self.values[inputs[0]];
                    let cols = a.cols().unwrap();
                    let mut da = vec![0.0; a.len()];
                    for (pos, &i) in indices.iter().enumerate() {
                        for c in 0..cols {
                            da[i * cols + c] += g[pos * cols + c];
                        }
                    }
                    self.accumulate(&mut grads, inputs[0], &da);
                }
            }
        }

        let mut result = BTreeMap::new();
        for &(id, node_idx) in &self.params {
            let shape = self.values[node_idx].shape().to_vec();
            let grad = match &grads[node_idx] {
                Some(g) => Tensor::new(shape, g.clone())?,
                None => Tensor::zeros(shape),
            };
            result.insert(id, grad);
        }
        Ok(result)
    }

    // ---- internals ---------------------------------------------------------

    fn check(&self, r: ValueRef) -> Result<()> {
        if r.tape != self.id || r.index >= self.nodes.len() {
            return Err(Error::Contract(
                "value ref does not belong to this tape".into(),
            ));
        }
        Ok(())
    }

    fn push(&mut self, node: Node, value: Tensor) -> ValueRef {
        self.nodes.push(node);
        self.values.push(value);
        ValueRef { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn push_op(
        &mut self,
        op: OpKind,
        inputs: Vec<usize>,
        out: Tensor,
        name: &'static str,
    ) -> Result<ValueRef> {
        if !out.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push(Node::Op { op, inputs }, out))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], idx: usize, contribution: &[f64]) {
        let slot = grads[idx].get_or_insert_with(|| vec![0.0; self.values[idx].len()]);
        debug_assert_eq!(slot.len(), contribution.len());
        for (s, &c) in slot.iter_mut().zip(contribution) {
            *s += c;
        }
    }
}

fn softmax_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n] => Ok((1, *n)),
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op: "softmax",
            detail: format!("expected vector or matrix, got {other:?}"),
        }),
    }
}

/// `[m,k] @ [k,n]` on raw row-major buffers.
fn mm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..n {
                out[i * n + j] += av * b[l * n + j];
            }
        }
    }
    out
}

/// `[m,k] @ [n,k]^T -> [m,n]`.
fn mm_tb(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[j * k + l];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `[m,k]^T @ [m,n] -> [k,n]`.
fn mm_ta(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            for j in 0..n {
                out[l * n + j] += av * b[i * n + j];
            }
        }
    }
    out
}
