//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward primitive appends a node holding its value and enough saved state for
//! its vector-Jacobian product. Parameters are referenced from a borrowed [`ParamStore`]
//! rather than copied, so several tapes may read the same store concurrently.

use std::collections::HashMap;

use super::kernels::{gemm, MatRef};
use super::{NumericsError, ParamId, ParamStore, Rng, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

const LAYER_NORM_EPS: f64 = 1e-5;
pub const BCE_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, bt: bool, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    Softmax { a: Var },
    LogSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Dropout { a: Var, keep: Vec<f64> },
    MeanRows { a: Var, valid: Vec<bool>, count: usize },
    Sum { a: Var },
    Mean { a: Var },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    GatherRows { a: Var, index: Vec<Option<usize>> },
    Pick { a: Var, index: Vec<usize> },
    Reshape { a: Var },
    Attention { q: Var, k: Var, v: Var, segments: Vec<(usize, usize)>, heads: usize, probs: Vec<f64> },
    Bce { p: Var, labels: Vec<f64> },
    RowNormalize { a: Var, norms: Vec<f64> },
}

#[derive(Debug)]
enum Slot {
    Owned(Tensor),
    Param(ParamId),
}

#[derive(Debug)]
struct Node {
    slot: Slot,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: Vec<(ParamId, Vec<f64>)>,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Gradient with respect to an input leaf created with `requires_grad`.
    pub fn wrt(&self, var: Var) -> Option<&[f64]> {
        self.leaves.get(&var.0).map(|g| g.as_slice())
    }

    /// Adds another gradient set into this one.
    pub fn merge(&mut self, other: Gradients) {
        for (id, g) in other.params {
            match self.params.iter_mut().find(|(p, _)| *p == id) {
                Some((_, acc)) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => self.params.push((id, g)),
            }
        }
        for (k, g) in other.leaves {
            match self.leaves.get_mut(&k) {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => {
                    self.leaves.insert(k, g);
                }
            }
        }
    }
}

pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    dropout_rng: Option<Rng>,
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> NumericsError {
    NumericsError::ShapeMismatch { op, shapes: shapes.iter().map(|s| s.to_vec()).collect() }
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        _ => {
            let c = *shape.last().unwrap();
            (shape.iter().product::<usize>() / c, c)
        }
    }
}

impl<'p> Tape<'p> {
    /// Evaluation-mode tape: dropout is the identity.
    pub fn new(store: &'p ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new(), dropout_rng: None }
    }

    /// Tape without parameters, for graphs over plain inputs.
    pub fn detached() -> Tape<'static> {
        Tape { store: None, nodes: Vec::new(), param_vars: HashMap::new(), dropout_rng: None }
    }

    /// Training-mode tape; dropout masks are drawn from `rng`.
    pub fn training(store: &'p ParamStore, rng: Rng) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new(), dropout_rng: Some(rng) }
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].slot {
            Slot::Owned(t) => t,
            Slot::Param(id) => &self.store.expect("param node without store").get(*id).tensor,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.value(v).data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { slot: Slot::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Input leaf; participates in gradients iff `t.requires_grad()`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node { slot: Slot::Owned(t), op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t.with_requires_grad(false))
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let store = self.store.expect("Tape::param on a detached tape");
        let needs_grad = !store.get(id).frozen;
        self.nodes.push(Node { slot: Slot::Param(id), op: Op::Param(id), needs_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    // ---- forward primitives -------------------------------------------------------------

    /// Matrix product. A 1-D lhs is a row vector, a 1-D rhs a column vector.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` with `b` stored row-major as `[n, k]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, bt: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op = if bt { "matmul_bt" } else { "matmul" };
        if sa.len() > 2 || sb.len() > 2 {
            return Err(mismatch(op, &[&sa, &sb]));
        }
        let (m, k) = matrix_dims(&sa);
        let (kb, n) = match (sb.len(), bt) {
            (1, false) => (sb[0], 1),
            (1, true) => (sb[0], 1),
            (_, false) => (sb[0], sb[1]),
            (_, true) => (sb[1], sb[0]),
        };
        if k != kb {
            return Err(mismatch(op, &[&sa, &sb]));
        }
        let mut out = vec![0.0; m * n];
        let bview = if bt { MatRef::transposed(self.data(b), k) } else { MatRef::rowmajor(self.data(b), n) };
        gemm(m, k, n, 1.0, MatRef::rowmajor(self.data(a), k), bview, 0.0, &mut out, n);
        let shape = match (sa.len(), sb.len()) {
            (1, 1) => vec![1],
            (1, _) => vec![n],
            (_, 1) => vec![m],
            _ => vec![m, n],
        };
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, bt, m, k, n }, &[a, b]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, &[self.shape(a), self.shape(b)]));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let data = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        Tensor::new(self.shape(a).to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_map(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_map(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_map(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul { a, b }, &[a, b]))
    }

    /// Adds a 1-D `bias` to every row (last axis) of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.shape(bias) != [c] {
            return Err(mismatch("add_row", &[self.shape(a), self.shape(bias)]));
        }
        let bd = self.data(bias);
        let data = self.data(a).chunks(c).flat_map(|row| row.iter().zip(bd).map(|(x, y)| x + y)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::AddRow { a, bias }, &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.map(a, |x| c * x);
        self.push(t, Op::Scale { a, c }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| if x > 0.0 { x } else { 0.0 });
        self.push(t, Op::Relu { a }, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        self.push(t, Op::Sigmoid { a }, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.masked_softmax(a, None)
    }

    /// Softmax over the last axis restricted to entries where `mask` is true; masked
    /// outputs are exactly zero. A row with no unmasked entry is an error.
    pub fn masked_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(mismatch("masked_softmax", &[x.shape(), &[m.len()]]));
            }
        }
        let c = x.last_dim();
        let mut out = vec![0.0; x.numel()];
        for (r, (row, orow)) in x.data().chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let keep = |j: usize| mask.map_or(true, |m| m[r * c + j]);
            softmax_row(row, orow, keep).ok_or(NumericsError::EmptyAxis { op: "softmax" })?;
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { a }, &[a]))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(c) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        let t = Tensor::new(x.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LogSoftmax { a }, &[a]))
    }

    /// Layer normalisation over the last axis with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(mismatch("layer_norm", &[self.shape(x), self.shape(gamma), self.shape(beta)]));
        }
        let xv = self.value(x);
        let (g, b) = (self.data(gamma), self.data(beta));
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(g[j] * h + b[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta]))
    }

    /// Inverted dropout. Identity on evaluation tapes or when `rate == 0`.
    pub fn dropout(&mut self, a: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(NumericsError::InvalidArgument { op: "dropout", reason: format!("rate {rate} not in [0,1)") });
        }
        if rate == 0.0 || self.dropout_rng.is_none() {
            return Ok(a);
        }
        let n = self.value(a).numel();
        let rng = self.dropout_rng.as_mut().expect("checked");
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..n).map(|_| if rng.next_f64() < rate { 0.0 } else { scale }).collect();
        let data = self.data(a).iter().zip(&keep).map(|(x, k)| x * k).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Dropout { a, keep }, &[a]))
    }

    /// Mean over rows (axis 0) of a 2-D tensor, counting only rows marked valid.
    pub fn mean_rows(&mut self, a: Var, valid: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        if x.ndim() != 2 {
            return Err(mismatch("mean_rows", &[x.shape()]));
        }
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let valid = match valid {
            Some(v) if v.len() != r => return Err(mismatch("mean_rows", &[x.shape(), &[v.len()]])),
            Some(v) => v.to_vec(),
            None => vec![true; r],
        };
        let count = valid.iter().filter(|&&b| b).count();
        if count == 0 {
            return Err(NumericsError::EmptyAxis { op: "mean_rows" });
        }
        let mut out = vec![0.0; c];
        for (row, _) in x.data().chunks(c).zip(&valid).filter(|(_, &v)| v) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= count as f64);
        let t = Tensor::vector(out);
        Ok(self.push(t, Op::MeanRows { a, valid, count }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.data(a);
        let s = x.iter().sum::<f64>() / x.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Stacks parts along axis 0. 1-D parts are joined end to end; 2-D parts must agree on columns.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument { op: "concat_rows", reason: "no inputs".into() });
        }
        let first = self.shape(parts[0]).to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(mismatch("concat_rows", &[&first, s]));
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = first;
        shape[0] = rows;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Joins parts along the last axis; all parts must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(NumericsError::InvalidArgument { op: "concat_cols", reason: "no inputs".into() });
        }
        let rows = self.value(parts[0]).rows();
        let lead: Vec<usize> = self.shape(parts[0]).split_last().map(|(_, l)| l.to_vec()).unwrap_or_default();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows || v.ndim() != lead.len() + 1 {
                return Err(mismatch("concat_cols", &[self.shape(parts[0]), v.shape()]));
            }
            widths.push(v.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }, parts))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let c = x.last_dim();
        if len == 0 || start + len > c {
            return Err(NumericsError::InvalidArgument {
                op: "slice_cols",
                reason: format!("range {start}..{} outside width {c}", start + len),
            });
        }
        let data = x.data().chunks(c).flat_map(|row| row[start..start + len].iter().copied()).collect();
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::SliceCols { a, start }, &[a]))
    }

    /// Selects rows of a 2-D tensor (or elements of a 1-D one); `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Result<Var> {
        let x = self.value(a);
        if index.is_empty() {
            return Err(NumericsError::InvalidArgument { op: "gather_rows", reason: "empty index".into() });
        }
        let (rows, c) = if x.ndim() == 1 { (x.numel(), 1) } else { (x.shape()[0], x.numel() / x.shape()[0]) };
        let mut data = Vec::with_capacity(index.len() * c);
        for ix in index {
            match ix {
                Some(i) if *i >= rows => {
                    return Err(NumericsError::InvalidArgument {
                        op: "gather_rows",
                        reason: format!("row {i} out of {rows}"),
                    })
                }
                Some(i) => data.extend_from_slice(&x.data()[i * c..(i + 1) * c]),
                None => data.extend(std::iter::repeat(0.0).take(c)),
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::GatherRows { a, index: index.to_vec() }, &[a]))
    }

    /// Flat element selection, producing a 1-D tensor.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.data(a);
        if index.is_empty() || index.iter().any(|&i| i >= x.len()) {
            return Err(NumericsError::InvalidArgument { op: "pick", reason: "index out of range".into() });
        }
        let t = Tensor::vector(index.iter().map(|&i| x[i]).collect());
        Ok(self.push(t, Op::Pick { a, index: index.to_vec() }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t.with_requires_grad(false), Op::Reshape { a }, &[a]))
    }

    /// `x @ w (+ b)` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Multi-head scaled dot-product attention over independent row segments.
    ///
    /// `q`, `k`, `v` are `[rows, d]`. Each `(start, len)` segment attends only within itself;
    /// keys whose `key_valid` flag is false receive zero weight. Heads split `d` evenly.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
        key_valid: Option<&[bool]>,
    ) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 2 || self.shape(k) != sq.as_slice() || self.shape(v) != sq.as_slice() {
            return Err(mismatch("attention", &[&sq, self.shape(k), self.shape(v)]));
        }
        let (rows, d) = (sq[0], sq[1]);
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::InvalidArgument {
                op: "attention",
                reason: format!("width {d} not divisible into {heads} heads"),
            });
        }
        if let Some(kv) = key_valid {
            if kv.len() != rows {
                return Err(mismatch("attention", &[&sq, &[kv.len()]]));
            }
        }
        let mut covered = 0;
        for &(s, l) in segments {
            if l == 0 || s + l > rows {
                return Err(NumericsError::InvalidArgument { op: "attention", reason: "bad segment".into() });
            }
            covered += l;
        }
        if covered != rows {
            return Err(NumericsError::InvalidArgument {
                op: "attention",
                reason: format!("segments cover {covered} of {rows} rows"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|&(_, l)| l * l).sum::<usize>() * heads);
        for &(s, l) in segments {
            for h in 0..heads {
                let off = s * d + h * dh;
                let mut scores = vec![0.0; l * l];
                gemm(
                    l,
                    dh,
                    l,
                    scale,
                    MatRef::rowmajor(qd, d).offset(off),
                    MatRef::transposed(kd, d).offset(off),
                    0.0,
                    &mut scores,
                    l,
                );
                let mut p = vec![0.0; l * l];
                for i in 0..l {
                    let keep = |j: usize| key_valid.map_or(true, |kv| kv[s + j]);
                    softmax_row(&scores[i * l..(i + 1) * l], &mut p[i * l..(i + 1) * l], keep)
                        .ok_or(NumericsError::EmptyAxis { op: "attention" })?;
                }
                gemm(l, l, dh, 1.0, MatRef::rowmajor(&p, l), MatRef::rowmajor(vd, d).offset(off), 0.0, &mut out[off..], d);
                probs.extend_from_slice(&p);
            }
        }
        let t = Tensor::matrix(rows, d, out)?;
        Ok(self.push(t, Op::Attention { q, k, v, segments: segments.to_vec(), heads, probs }, &[q, k, v]))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `labels`,
    /// with `p` clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, p: Var, labels: &[f64]) -> Result<Var> {
        let x = self.data(p);
        if x.len() != labels.len() {
            return Err(mismatch("bce", &[self.shape(p), &[labels.len()]]));
        }
        let n = x.len() as f64;
        let loss = x.iter().zip(labels).map(|(&p, &y)| bce_term(p, y)).sum::<f64>() / n;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, labels: labels.to_vec() }, &[p]))
    }

    /// Scales every row (last axis) to unit Euclidean norm.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.last_dim();
        let mut norms = Vec::with_capacity(x.rows());
        let mut data = Vec::with_capacity(x.numel());
        for row in x.data().chunks(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let t = Tensor::new(x.shape().to_vec(), data).expect("shape preserved");
        self.push(t, Op::RowNormalize { a, norms }, &[a])
    }

    // ---- reverse pass -------------------------------------------------------------------

    /// Propagates d`loss`/d(node) back to every leaf and unfrozen parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NumericsError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                op => self.backprop_op(op, Var(i), &g, &mut grads)?,
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_op(&self, op: &Op, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        match op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul { a, b, bt, m, k, n } => {
                if self.nodes[a.0].needs_grad {
                    let bd = self.data(b);
                    // dA = dC @ B^T  (or dC @ B when b is stored transposed)
                    let bview = if bt { MatRef::rowmajor(bd, k) } else { MatRef::transposed(bd, n) };
                    let ga = self.grad_slot(grads, a).unwrap();
                    gemm(m, n, k, 1.0, MatRef::rowmajor(g, n), bview, 1.0, ga, k);
                }
                if self.nodes[b.0].needs_grad {
                    let ad = self.data(a);
                    let gb = self.grad_slot(grads, b).unwrap();
                    if bt {
                        // dB[n,k] = dC^T @ A
                        gemm(n, m, k, 1.0, MatRef::transposed(g, n), MatRef::rowmajor(ad, k), 1.0, gb, k);
                    } else {
                        // dB[k,n] = A^T @ dC
                        gemm(k, m, n, 1.0, MatRef::transposed(ad, k), MatRef::rowmajor(g, n), 1.0, gb, n);
                    }
                }
            }
            &Op::Add { a, b } => {
                add_into(self.grad_slot(grads, a), g, 1.0);
                add_into(self.grad_slot(grads, b), g, 1.0);
            }
            &Op::Sub { a, b } => {
                add_into(self.grad_slot(grads, a), g, 1.0);
                add_into(self.grad_slot(grads, b), g, -1.0);
            }
            &Op::Mul { a, b } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g).zip(self.data(b)).for_each(|((s, gi), y)| *s += gi * y);
                }
                if let Some(gb) = self.grad_slot(grads, b) {
                    gb.iter_mut().zip(g).zip(self.data(a)).for_each(|((s, gi), x)| *s += gi * x);
                }
            }
            &Op::AddRow { a, bias } => {
                add_into(self.grad_slot(grads, a), g, 1.0);
                if let Some(gb) = self.grad_slot(grads, bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                }
            }
            &Op::Scale { a, c } => add_into(self.grad_slot(grads, a), g, c),
            &Op::Relu { a } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    let x = self.data(a);
                    ga.iter_mut().zip(g).zip(x).for_each(|((s, gi), &xi)| {
                        if xi > 0.0 {
                            *s += gi
                        }
                    });
                }
            }
            &Op::Sigmoid { a } => {
                let y = self.data(out);
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().zip(g).zip(y).for_each(|((s, gi), yi)| *s += gi * yi * (1.0 - yi));
                }
            }
            &Op::Softmax { a } => {
                let y = self.value(out);
                let c = y.last_dim();
                if let Some(ga) = self.grad_slot(grads, a) {
                    for ((yr, gr), sr) in y.data().chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        sr.iter_mut().zip(yr).zip(gr).for_each(|((s, y), g)| *s += y * (g - dot));
                    }
                }
            }
            &Op::LogSoftmax { a } => {
                let y = self.value(out);
                let c = y.last_dim();
                if let Some(ga) = self.grad_slot(grads, a) {
                    for ((yr, gr), sr) in y.data().chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let gsum: f64 = gr.iter().sum();
                        sr.iter_mut().zip(yr).zip(gr).for_each(|((s, y), g)| *s += g - y.exp() * gsum);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*x).last_dim();
                let gam = self.data(*gamma);
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        gg.iter_mut().zip(gr).zip(hr).for_each(|((s, g), h)| *s += g * h);
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for gr in g.chunks(c) {
                        gb.iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let mut dh = vec![0.0; c];
                    for (((gr, hr), sr), rs) in g.chunks(c).zip(xhat.chunks(c)).zip(gx.chunks_mut(c)).zip(rstd) {
                        dh.iter_mut().zip(gr).zip(gam).for_each(|((d, g), w)| *d = g * w);
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dhh = dh.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / c as f64;
                        for ((s, d), h) in sr.iter_mut().zip(&dh).zip(hr) {
                            *s += rs * (d - mean_dh - h * mean_dhh);
                        }
                    }
                }
            }
            Op::Dropout { a, keep } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).zip(keep).for_each(|((s, g), k)| *s += g * k);
                }
            }
            Op::MeanRows { a, valid, count } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let c = g.len();
                    let inv = 1.0 / *count as f64;
                    for (row, _) in ga.chunks_mut(c).zip(valid).filter(|(_, &v)| v) {
                        row.iter_mut().zip(g).for_each(|(s, g)| *s += g * inv);
                    }
                }
            }
            &Op::Sum { a } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    ga.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            &Op::Mean { a } => {
                if let Some(ga) = self.grad_slot(grads, a) {
                    let inv = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|s| *s += inv);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    add_into(self.grad_slot(grads, p), &g[off..off + n], 1.0);
                    off += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = self.value(out).last_dim();
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for (sr, gr) in gp.chunks_mut(w).zip(g.chunks(total)) {
                            sr.iter_mut().zip(&gr[col..col + w]).for_each(|(s, g)| *s += g);
                        }
                    }
                    col += w;
                }
            }
            &Op::SliceCols { a, start } => {
                let c = self.value(a).last_dim();
                let w = self.value(out).last_dim();
                if let Some(ga) = self.grad_slot(grads, a) {
                    for (sr, gr) in ga.chunks_mut(c).zip(g.chunks(w)) {
                        sr[start..start + w].iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::GatherRows { a, index } => {
                let x = self.value(*a);
                let c = if x.ndim() == 1 { 1 } else { x.numel() / x.shape()[0] };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (ix, gr) in index.iter().zip(g.chunks(c)) {
                        if let Some(i) = ix {
                            ga[i * c..(i + 1) * c].iter_mut().zip(gr).for_each(|(s, g)| *s += g);
                        }
                    }
                }
            }
            Op::Pick { a, index } => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (&i, gi) in index.iter().zip(g) {
                        ga[i] += gi;
                    }
                }
            }
            &Op::Reshape { a } => add_into(self.grad_slot(grads, a), g, 1.0),
            Op::Attention { q, k, v, segments, heads, probs } => {
                self.backprop_attention(*q, *k, *v, segments, *heads, probs, g, grads);
            }
            Op::Bce { p, labels } => {
                if let Some(gp) = self.grad_slot(grads, *p) {
                    let n = labels.len() as f64;
                    for ((s, &pi), &y) in gp.iter_mut().zip(self.data(*p)).zip(labels) {
                        if pi > BCE_CLAMP && pi < 1.0 - BCE_CLAMP {
                            *s += g[0] * (pi - y) / (pi * (1.0 - pi)) / n;
                        }
                    }
                }
            }
            Op::RowNormalize { a, norms } => {
                let y = self.value(out);
                let c = y.last_dim();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (((yr, gr), sr), n) in y.data().chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)).zip(norms) {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                        sr.iter_mut().zip(yr).zip(gr).for_each(|((s, y), g)| *s += (g - y * dot) / n);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rows, d) = (self.shape(q)[0], self.shape(q)[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let (need_q, need_k, need_v) =
            (self.nodes[q.0].needs_grad, self.nodes[k.0].needs_grad, self.nodes[v.0].needs_grad);
        let mut gq = vec![0.0; if need_q { rows * d } else { 0 }];
        let mut gk = vec![0.0; if need_k { rows * d } else { 0 }];
        let mut gv = vec![0.0; if need_v { rows * d } else { 0 }];
        let mut poff = 0;
        for &(s, l) in segments {
            for h in 0..heads {
                let off = s * d + h * dh;
                let p = &probs[poff..poff + l * l];
                poff += l * l;
                let go = MatRef::rowmajor(g, d).offset(off);
                if need_v {
                    // dV = P^T dO
                    gemm(l, l, dh, 1.0, MatRef::transposed(p, l), go, 1.0, &mut gv[off..], d);
                }
                if !(need_q || need_k) {
                    continue;
                }
                // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)) * scale
                let mut dp = vec![0.0; l * l];
                gemm(l, dh, l, 1.0, go, MatRef::transposed(vd, d).offset(off), 0.0, &mut dp, l);
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut dp[i * l..(i + 1) * l];
                    let dot: f64 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                    dr.iter_mut().zip(pr).for_each(|(x, p)| *x = p * (*x - dot) * scale);
                }
                if need_q {
                    gemm(l, l, dh, 1.0, MatRef::rowmajor(&dp, l), MatRef::rowmajor(kd, d).offset(off), 1.0, &mut gq[off..], d);
                }
                if need_k {
                    gemm(l, l, dh, 1.0, MatRef::transposed(&dp, l), MatRef::rowmajor(qd, d).offset(off), 1.0, &mut gk[off..], d);
                }
            }
        }
        if need_q {
            add_into(self.grad_slot(grads, q), &gq, 1.0);
        }
        if need_k {
            add_into(self.grad_slot(grads, k), &gk, 1.0);
        }
        if need_v {
            add_into(self.grad_slot(grads, v), &gv, 1.0);
        }
    }
}

fn add_into(slot: Option<&mut Vec<f64>>, g: &[f64], c: f64) {
    if let Some(s) = slot {
        s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Binary cross-entropy of one clamped probability.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Writes the softmax of the kept entries of `row` into `out`; dropped entries get 0.
/// Returns `None` when nothing is kept.
fn softmax_row(row: &[f64], out: &mut [f64], keep: impl Fn(usize) -> bool) -> Option<()> {
    let mut max = f64::NEG_INFINITY;
    let mut any = false;
    for (j, &x) in row.iter().enumerate() {
        if keep(j) {
            any = true;
            max = max.max(x);
        }
    }
    if !any {
        return None;
    }
    let mut sum = 0.0;
    for (j, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        *o = if keep(j) { (x - max).exp() } else { 0.0 };
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    Some(())
}
