//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends one node to the [`Tape`]; nodes only ever refer to
//! earlier nodes, so insertion order is a topological order and the backward
//! sweep is a single reverse pass. Values are kept on the tape, which lets the
//! backward rules read inputs and outputs without extra saved state.
//!
//! Binary elementwise ops accept equal shapes, or one operand whose last
//! dimension is 1 where the other's is `n` (a per-row scalar). Any op that
//! yields NaN or ±inf fails immediately with the op's name.

use crate::tensor::{gemm, gemm_nt, gemm_tn, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul,
    MatMulT,
    Bmm,
    Add(Bcast),
    Sub(Bcast),
    Mul(Bcast),
    AddRow,
    Neg,
    Scale(f64),
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softmax,
    LogSoftmax,
    Pick(Vec<usize>),
    Concat { axis: usize, sizes: Vec<usize> },
    Slice { axis: usize, start: usize },
    Reshape,
    Conv1d,
    Dropout(Vec<f64>),
    Grl(f64),
    Sum,
    GatherRows(Vec<usize>),
    RepeatRows(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::MatMulT => "matmul_t",
            Op::Bmm => "bmm",
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::AddRow => "add_row",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Pick(_) => "pick",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape => "reshape",
            Op::Conv1d => "conv1d",
            Op::Dropout(_) => "dropout",
            Op::Grl(_) => "gradient_reversal",
            Op::Sum => "sum",
            Op::GatherRows(_) => "gather_rows",
            Op::RepeatRows(_) => "repeat_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Tensor,
    requires_grad: bool,
}

/// Elementwise binary operators accepted by [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

/// Elementwise unary operators accepted by [`Tape::unary`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Neg,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant, cutting the
    /// gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Tensor) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ------------------------------------------------------------------
    // Linear algebra
    // ------------------------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Op::MatMul, vec![a, b], Tensor::new(vec![m, n], out))
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout used for weight matrices stored as
    /// `[out × in]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(TensorError::Shape {
                op: "matmul_t",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Op::MatMulT, vec![a, b], Tensor::new(vec![m, n], out))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::Shape {
                op: "bmm",
                lhs: sa,
                rhs: sb,
            });
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bsz * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..bsz {
                gemm(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        self.push(Op::Bmm, vec![a, b], Tensor::new(vec![bsz, m, n], out))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(Bcast, Vec<usize>)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok((Bcast::None, sa.to_vec()));
        }
        let lead_eq = sa.len() == sb.len()
            && !sa.is_empty()
            && sa[..sa.len() - 1] == sb[..sb.len() - 1];
        if lead_eq {
            if *sb.last().unwrap() == 1 {
                return Ok((Bcast::Rhs, sa.to_vec()));
            }
            if *sa.last().unwrap() == 1 {
                return Ok((Bcast::Lhs, sb.to_vec()));
            }
        }
        Err(TensorError::Shape {
            op,
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        })
    }

    pub fn elementwise(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (bc, shape) = self.broadcast(name, a, b)?;
        let n = *shape.last().unwrap_or(&1);
        let total: usize = shape.iter().product();
        let f: fn(f64, f64) -> f64 = match op {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let out: Vec<f64> = {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            match bc {
                Bcast::None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
                Bcast::Rhs => (0..total).map(|i| f(ad[i], bd[i / n])).collect(),
                Bcast::Lhs => (0..total).map(|i| f(ad[i / n], bd[i])).collect(),
            }
        };
        let node_op = match op {
            Binary::Add => Op::Add(bc),
            Binary::Sub => Op::Sub(bc),
            Binary::Mul => Op::Mul(bc),
        };
        self.push(node_op, vec![a, b], Tensor::new(shape, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Binary::Mul, a, b)
    }

    /// Adds the vector `b[n]` to every length-`n` row of `a[..×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 1 || sa.last() != sb.first() {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: sa,
                rhs: sb,
            });
        }
        let n = sb[0];
        let out: Vec<f64> = {
            let bd = self.value(b).data();
            self.value(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + bd[i % n])
                .collect()
        };
        self.push(Op::AddRow, vec![a, b], Tensor::new(sa, out))
    }

    pub fn unary(&mut self, op: Unary, a: Var) -> Result<Var> {
        let (node_op, f): (Op, fn(f64) -> f64) = match op {
            Unary::Tanh => (Op::Tanh, f64::tanh),
            Unary::Sigmoid => (Op::Sigmoid, sigmoid),
            Unary::Exp => (Op::Exp, f64::exp),
            Unary::Log => (Op::Log, f64::ln),
            Unary::Neg => (Op::Neg, |x| -x),
        };
        let value = self.map(a, f);
        self.push(node_op, vec![a], value)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Neg, a)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.map(a, |x| x * c);
        self.push(Op::Scale(c), vec![a], value)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(a);
        Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())
    }

    // ------------------------------------------------------------------
    // Normalisation and selection
    // ------------------------------------------------------------------

    /// Softmax over the last axis. Masked entries (`false`) come out as
    /// exactly zero and take no part in the normaliser.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or_else(|| TensorError::invalid("softmax", "rank 0"))?;
        if let Some(m) = mask {
            if m.len() != t.len() {
                return Err(TensorError::invalid(
                    "softmax",
                    format!("mask has {} entries for {} values", m.len(), t.len()),
                ));
            }
        }
        let mut out = vec![0.0; t.len()];
        for (r, row) in t.data().chunks(n).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::invalid("softmax", "every entry is masked"));
            }
            let mut z = 0.0;
            for j in (0..n).filter(|&j| keep(j)) {
                let e = (row[j] - max).exp();
                out[r * n + j] = e;
                z += e;
            }
            for j in (0..n).filter(|&j| keep(j)) {
                out[r * n + j] /= z;
            }
        }
        let shape = t.shape().to_vec();
        self.push(Op::Softmax, vec![a], Tensor::new(shape, out))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = *t.shape().last().ok_or_else(|| TensorError::invalid("log_softmax", "rank 0"))?;
        let mut out = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            out.extend(row.iter().map(|x| x - lse));
        }
        let shape = t.shape().to_vec();
        self.push(Op::LogSoftmax, vec![a], Tensor::new(shape, out))
    }

    /// From `a[B×V]` picks `a[b, idx[b]]`, giving `[B]`.
    pub fn pick(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|&i| i >= s[1]) {
            return Err(TensorError::invalid(
                "pick",
                format!("{} indices into shape {s:?}", idx.len()),
            ));
        }
        let d = self.value(a).data();
        let out = idx.iter().enumerate().map(|(b, &i)| d[b * s[1] + i]).collect();
        self.push(Op::Pick(idx.to_vec()), vec![a], Tensor::new(vec![s[0]], out))
    }

    /// Rows `ids` of `table[V×E]`, giving `[n×E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.iter().any(|&i| i >= s[0]) {
            return Err(TensorError::invalid(
                "gather_rows",
                format!("ids out of range for table {s:?}"),
            ));
        }
        let e = s[1];
        let d = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            out.extend_from_slice(&d[i * e..(i + 1) * e]);
        }
        self.push(
            Op::GatherRows(ids.to_vec()),
            vec![table],
            Tensor::new(vec![ids.len(), e], out),
        )
    }

    /// `[B×A]` to `[B×times×A]`, each row repeated `times` times.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(TensorError::invalid("repeat_rows", format!("need rank 2, got {s:?}")));
        }
        let (b, n) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(b * times * n);
        for row in d.chunks(n.max(1)).take(b) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        self.push(Op::RepeatRows(times), vec![a], Tensor::new(vec![b, times, n], out))
    }

    // ------------------------------------------------------------------
    // Structure
    // ------------------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(TensorError::invalid("concat", format!("axis {axis} for rank {}", base.len())));
        }
        let mut sizes = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !ok {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            sizes.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = sizes.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            Op::Concat { axis, sizes },
            parts.to_vec(),
            Tensor::new(shape, out),
        )
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(TensorError::invalid(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Op::Slice { axis, start }, vec![a], Tensor::new(shape, out))
    }

    pub fn split(&mut self, a: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(TensorError::invalid(
                "split",
                format!("sizes {sizes:?} do not tile axis {axis} of {s:?}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &len in sizes {
            out.push(self.slice(a, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        self.push(Op::Reshape, vec![a], value)
    }

    /// Same-length cross-correlation of each row of `signal[B×T]` with the
    /// `K` taps of every channel in `kernels[K×C]`, giving `[B×T×C]`.
    ///
    /// Taps are centred at `K/2`; for an even `K` this equals padding the
    /// kernel with one trailing zero tap. Samples outside the row are zero.
    pub fn conv1d(&mut self, signal: Var, kernels: Var) -> Result<Var> {
        let (ss, ks) = (self.shape(signal).to_vec(), self.shape(kernels).to_vec());
        if ss.len() != 2 || ks.len() != 2 {
            return Err(TensorError::Shape {
                op: "conv1d",
                lhs: ss,
                rhs: ks,
            });
        }
        let (b, t, k, c) = (ss[0], ss[1], ks[0], ks[1]);
        if t == 0 {
            return Err(TensorError::invalid("conv1d", "empty signal"));
        }
        if k == 0 {
            return Err(TensorError::invalid("conv1d", "empty kernel"));
        }
        let half = k / 2;
        let (sd, kd) = (self.value(signal).data(), self.value(kernels).data());
        let mut out = vec![0.0; b * t * c];
        for bi in 0..b {
            let row = &sd[bi * t..(bi + 1) * t];
            for ti in 0..t {
                let o = &mut out[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                for ki in 0..k {
                    let src = ti + ki;
                    if src < half || src - half >= t {
                        continue;
                    }
                    let x = row[src - half];
                    if x == 0.0 {
                        continue;
                    }
                    for (oc, kv) in o.iter_mut().zip(&kd[ki * c..(ki + 1) * c]) {
                        *oc += kv * x;
                    }
                }
            }
        }
        self.push(Op::Conv1d, vec![signal, kernels], Tensor::new(vec![b, t, c], out))
    }

    // ------------------------------------------------------------------
    // Regularisation and reductions
    // ------------------------------------------------------------------

    /// Inverted dropout. `keep_draws` yields one uniform `[0,1)` sample per
    /// element; an element survives when its draw is `>= rate`.
    pub fn dropout(
        &mut self,
        a: Var,
        rate: f64,
        training: bool,
        mut uniform: impl FnMut() -> f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(a).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if uniform() >= rate { keep } else { 0.0 })
            .collect();
        let value = {
            let t = self.value(a);
            Tensor::new(
                t.shape().to_vec(),
                t.data().iter().zip(&mask).map(|(x, m)| x * m).collect(),
            )
        };
        self.push(Op::Dropout(mask), vec![a], value)
    }

    /// Identity forward; the backward pass multiplies the gradient by `-scale`.
    pub fn gradient_reversal(&mut self, a: Var, scale: f64) -> Result<Var> {
        let value = self.value(a).clone();
        self.push(Op::Grl(scale), vec![a], value)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(TensorError::invalid("mean", "empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Propagates `d loss / d node` to every leaf that requires a gradient.
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if self.leaf_grads.len() <= id {
                    self.leaf_grads.resize(id + 1, None);
                }
                match &mut self.leaf_grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
                continue;
            }
            backprop_node(&self.nodes, node, &g, &mut grads);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let inp = &node.inputs;
    let val = |v: Var| nodes[v.0].value.data();
    let shp = |v: Var| nodes[v.0].value.shape();
    let y = node.value.data();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul => {
            let (a, b) = (inp[0], inp[1]);
            let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[1]);
            if let Some(ga) = slot(grads, nodes, a) {
                gemm_nt(g, val(b), m, n, k, ga);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                gemm_tn(val(a), g, m, k, n, gb);
            }
        }
        Op::MatMulT => {
            let (a, b) = (inp[0], inp[1]);
            let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[0]);
            if let Some(ga) = slot(grads, nodes, a) {
                gemm(g, val(b), m, n, k, ga);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                gemm_tn(g, val(a), m, n, k, gb);
            }
        }
        Op::Bmm => {
            let (a, b) = (inp[0], inp[1]);
            let (bsz, m, k, n) = (shp(a)[0], shp(a)[1], shp(a)[2], shp(b)[2]);
            if let Some(ga) = slot(grads, nodes, a) {
                let bd = val(b);
                for i in 0..bsz {
                    gemm_nt(
                        &g[i * m * n..(i + 1) * m * n],
                        &bd[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                let ad = val(a);
                for i in 0..bsz {
                    gemm_tn(
                        &ad[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                        &mut gb[i * k * n..(i + 1) * k * n],
                    );
                }
            }
        }
        Op::Add(bc) | Op::Sub(bc) => {
            let sign = if matches!(node.op, Op::Sub(_)) { -1.0 } else { 1.0 };
            let n = *node.value.shape().last().unwrap_or(&1);
            let (a, b) = (inp[0], inp[1]);
            if let Some(ga) = slot(grads, nodes, a) {
                accumulate(ga, g, *bc == Bcast::Lhs, n, 1.0);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                accumulate(gb, g, *bc == Bcast::Rhs, n, sign);
            }
        }
        Op::Mul(bc) => {
            let n = *node.value.shape().last().unwrap_or(&1);
            let (a, b) = (inp[0], inp[1]);
            let idx = |side_bc: bool, i: usize| if side_bc { i / n } else { i };
            if nodes[a.0].requires_grad {
                let bd = val(b);
                let ga = slot(grads, nodes, a).unwrap();
                for (i, gi) in g.iter().enumerate() {
                    ga[idx(*bc == Bcast::Lhs, i)] += gi * bd[idx(*bc == Bcast::Rhs, i)];
                }
            }
            if nodes[b.0].requires_grad {
                let ad = val(a);
                let gb = slot(grads, nodes, b).unwrap();
                for (i, gi) in g.iter().enumerate() {
                    gb[idx(*bc == Bcast::Rhs, i)] += gi * ad[idx(*bc == Bcast::Lhs, i)];
                }
            }
        }
        Op::AddRow => {
            let (a, b) = (inp[0], inp[1]);
            let n = shp(b)[0];
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Neg => unary_back(grads, nodes, inp[0], g, |_, gi| -gi),
        Op::Scale(c) => unary_back(grads, nodes, inp[0], g, |_, gi| c * gi),
        Op::Grl(s) => unary_back(grads, nodes, inp[0], g, |_, gi| -s * gi),
        Op::Reshape => unary_back(grads, nodes, inp[0], g, |_, gi| gi),
        Op::Tanh => unary_back(grads, nodes, inp[0], g, |i, gi| gi * (1.0 - y[i] * y[i])),
        Op::Sigmoid => unary_back(grads, nodes, inp[0], g, |i, gi| gi * y[i] * (1.0 - y[i])),
        Op::Exp => unary_back(grads, nodes, inp[0], g, |i, gi| gi * y[i]),
        Op::Log => {
            let x = val(inp[0]);
            unary_back(grads, nodes, inp[0], g, |i, gi| gi / x[i])
        }
        Op::Dropout(mask) => unary_back(grads, nodes, inp[0], g, |i, gi| gi * mask[i]),
        Op::Softmax => {
            let n = *node.value.shape().last().unwrap();
            if let Some(ga) = slot(grads, nodes, inp[0]) {
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LogSoftmax => {
            let n = *node.value.shape().last().unwrap();
            if let Some(ga) = slot(grads, nodes, inp[0]) {
                for ((gr, yr), out) in g.chunks(n).zip(y.chunks(n)).zip(ga.chunks_mut(n)) {
                    let total: f64 = gr.iter().sum();
                    for j in 0..n {
                        out[j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
        }
        Op::Pick(idx) => {
            let v = shp(inp[0])[1];
            if let Some(ga) = slot(grads, nodes, inp[0]) {
                for (b, &i) in idx.iter().enumerate() {
                    ga[b * v + i] += g[b];
                }
            }
        }
        Op::GatherRows(ids) => {
            let e = shp(inp[0])[1];
            if let Some(ga) = slot(grads, nodes, inp[0]) {
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut ga[i * e..(i + 1) * e];
                    dst.iter_mut()
                        .zip(&g[r * e..(r + 1) * e])
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::RepeatRows(times) => {
            let n = shp(inp[0])[1];
            if let Some(ga) = slot(grads, nodes, inp[0]) {
                for (r, chunk) in g.chunks(times * n).enumerate() {
                    let dst = &mut ga[r * n..(r + 1) * n];
                    for rep in chunk.chunks(n) {
                        dst.iter_mut().zip(rep).for_each(|(x, y)| *x += y);
                    }
                }
            }
        }
        Op::Concat { axis, sizes } => {
            let s = node.value.shape();
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let total: usize = sizes.iter().sum();
            let mut offset = 0;
            for (&p, &sz) in inp.iter().zip(sizes) {
                if let Some(gp) = slot(grads, nodes, p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..(o * total + offset + sz) * inner];
                        let dst = &mut gp[o * sz * inner..(o + 1) * sz * inner];
                        dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                    }
                }
                offset += sz;
            }
        }
        Op::Slice { axis, start } => {
            let s = shp(inp[0]);
            let len = node.value.shape()[*axis];
            let outer: usize = s[..*axis].iter().product();
            let inner: usize = s[axis + 1..].iter().product();
            let full = s[*axis];
            if let Some(ga) = slot(grads, nodes, inp[0]) {
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    let dst = &mut ga[base..base + len * inner];
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
                }
            }
        }
        Op::Conv1d => {
            let (sig, ker) = (inp[0], inp[1]);
            let (b, t) = (shp(sig)[0], shp(sig)[1]);
            let (k, c) = (shp(ker)[0], shp(ker)[1]);
            let half = k / 2;
            let (sd, kd) = (val(sig), val(ker));
            let want_sig = nodes[sig.0].requires_grad;
            let want_ker = nodes[ker.0].requires_grad;
            let mut gs = if want_sig { vec![0.0; b * t] } else { Vec::new() };
            let mut gk = if want_ker { vec![0.0; k * c] } else { Vec::new() };
            for bi in 0..b {
                for ti in 0..t {
                    let go = &g[(bi * t + ti) * c..(bi * t + ti + 1) * c];
                    for ki in 0..k {
                        let src = ti + ki;
                        if src < half || src - half >= t {
                            continue;
                        }
                        let si = bi * t + src - half;
                        let taps = &kd[ki * c..(ki + 1) * c];
                        if want_sig {
                            gs[si] += go.iter().zip(taps).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if want_ker {
                            let x = sd[si];
                            for (dst, gv) in gk[ki * c..(ki + 1) * c].iter_mut().zip(go) {
                                *dst += gv * x;
                            }
                        }
                    }
                }
            }
            if let Some(dst) = slot(grads, nodes, sig) {
                dst.iter_mut().zip(&gs).for_each(|(x, y)| *x += y);
            }
            if let Some(dst) = slot(grads, nodes, ker) {
                dst.iter_mut().zip(&gk).for_each(|(x, y)| *x += y);
            }
        }
        Op::Sum => unary_back(grads, nodes, inp[0], g, |_, _| g[0]),
    }
}

fn accumulate(dst: &mut [f64], g: &[f64], reduced: bool, n: usize, sign: f64) {
    if reduced {
        for (i, gi) in g.iter().enumerate() {
            dst[i / n] += sign * gi;
        }
    } else {
        dst.iter_mut().zip(g).for_each(|(d, gi)| *d += sign * gi);
    }
}

fn unary_back(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    a: Var,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if let Some(ga) = slot(grads, nodes, a) {
        let n = ga.len();
        if g.len() == n {
            for (i, (dst, &gi)) in ga.iter_mut().zip(g).enumerate() {
                *dst += f(i, gi);
            }
        } else {
            // Sum: scalar gradient fanned out to every input element.
            for (i, dst) in ga.iter_mut().enumerate() {
                *dst += f(i, g[0]);
            }
        }
    }
}
