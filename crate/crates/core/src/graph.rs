//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every operation evaluates eagerly, appends one node to the tape and keeps
//! whatever it needs for its vector-Jacobian product. Nodes are appended in
//! evaluation order, so the tape is always topologically sorted and
//! [`Graph::backward`] is a single reverse sweep that visits each recorded
//! node once.
//!
//! Broadcasting is deliberately narrow: in binary ops the smaller operand may
//! only omit (or carry singleton) *leading* extents of the larger one.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{first_non_finite, matrix_dims, Scalar, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    ScaleBy,
    AddConst,
    Exp,
    Silu,
    Sum,
    MeanAxis,
    PrefixMean,
    Softmax,
    RmsNorm,
    Embed,
    CrossEntropy,
    Dot,
    SliceCols,
    ConcatCols,
    Rope,
}

impl OpKind {
    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::ScaleBy,
        OpKind::AddConst,
        OpKind::Exp,
        OpKind::Silu,
        OpKind::Sum,
        OpKind::MeanAxis,
        OpKind::PrefixMean,
        OpKind::Softmax,
        OpKind::RmsNorm,
        OpKind::Embed,
        OpKind::CrossEntropy,
        OpKind::Dot,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::Rope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::ScaleBy => "scale_by",
            OpKind::AddConst => "add_const",
            OpKind::Exp => "exp",
            OpKind::Silu => "silu",
            OpKind::Sum => "sum",
            OpKind::MeanAxis => "mean_axis",
            OpKind::PrefixMean => "prefix_mean",
            OpKind::Softmax => "softmax",
            OpKind::RmsNorm => "rmsnorm",
            OpKind::Embed => "embed",
            OpKind::CrossEntropy => "cross_entropy",
            OpKind::Dot => "dot",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::Rope => "rope",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        OpKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which entries of the last dimension a softmax row may attend to.
#[derive(Clone, Debug, PartialEq)]
pub enum Mask {
    /// Row `i` of every trailing `[R, C]` block keeps columns `j <= i + (C - R)`.
    Causal,
    /// Explicit keep-flags; broadcast over leading extents of the input.
    Keep { shape: Vec<usize>, keep: Vec<bool> },
}

impl Mask {
    pub fn keep(shape: impl Into<Vec<usize>>, keep: Vec<bool>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != keep.len() || shape.is_empty() {
            return Err(Error::dim("mask", format!("shape {shape:?} vs {} flags", keep.len())));
        }
        Ok(Mask::Keep { shape, keep })
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize, trans_b: bool, alpha: T },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    ScaleBy { a: Var, s: Var },
    AddConst { a: Var },
    Exp { a: Var },
    Silu { a: Var },
    Sum { a: Var },
    MeanAxis { a: Var, outer: usize, len: usize, inner: usize },
    PrefixMean { a: Var, rows: usize, cols: usize },
    Softmax { a: Var },
    RmsNorm { x: Var, gain: Var, groups: usize, inv_rms: Vec<T> },
    Embed { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    Dot { a: Var, b: Var },
    SliceCols { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    Rope { a: Var, table: Arc<RopeTable<T>> },
}

impl<T: Scalar> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::Sub { .. } => OpKind::Sub,
            Op::Mul { .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::ScaleBy { .. } => OpKind::ScaleBy,
            Op::AddConst { .. } => OpKind::AddConst,
            Op::Exp { .. } => OpKind::Exp,
            Op::Silu { .. } => OpKind::Silu,
            Op::Sum { .. } => OpKind::Sum,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::PrefixMean { .. } => OpKind::PrefixMean,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::RmsNorm { .. } => OpKind::RmsNorm,
            Op::Embed { .. } => OpKind::Embed,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Dot { .. } => OpKind::Dot,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols { .. } => OpKind::ConcatCols,
            Op::Rope { .. } => OpKind::Rope,
        }
    }
}

/// Rotation angles for one (positions, width, base) combination.
struct RopeTable<T> {
    positions: Vec<usize>,
    d: usize,
    base: f64,
    cos: Vec<T>,
    sin: Vec<T>,
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recorded computation. One graph per forward/backward pass.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<OpKind>,
    rope_tables: Vec<Arc<RopeTable<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Output shape and small-operand lengths for a leading-extent broadcast.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    fn strip(s: &[usize]) -> &[usize] {
        let lead = s.iter().take_while(|&&e| e == 1).count();
        &s[lead.min(s.len().saturating_sub(1))..]
    }
    let (big, small) = if a.iter().product::<usize>() >= b.iter().product::<usize>() {
        (a, b)
    } else {
        (b, a)
    };
    let s = strip(small);
    let ok = if s == [1] {
        true
    } else {
        big.len() >= s.len() && &big[big.len() - s.len()..] == s
    };
    if !ok {
        return Err(Error::dim(op, format!("cannot broadcast {a:?} with {b:?}")));
    }
    Ok(big.to_vec())
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: None,
            rope_tables: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Corrupts the backward pass of every node of `kind` (scales its
    /// upstream gradient by 1.5). Test fixture for the gradient checker.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// took part in it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Inserts a tensor; it is trainable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor<T>) -> Result<Var> {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Inserts a copy of a parameter as a trainable leaf.
    pub fn param(&mut self, t: &Tensor<T>) -> Result<Var> {
        let value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if let Some(index) = first_non_finite(value.data()) {
            return Err(Error::NonFinite {
                stage: "forward",
                op: op.kind().name(),
                node: self.nodes.len(),
                shape: value.shape().to_vec(),
                index,
            });
        }
        value.set_requires_grad(needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[M×K] · b[K×N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, T::one())
    }

    /// `a[M×K] · b[N×K]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true, T::one())
    }

    /// `alpha · a[M×K] · b[N×K]ᵀ`, e.g. scaled attention logits.
    pub fn matmul_nt_scaled(&mut self, a: Var, b: Var, alpha: T) -> Result<Var> {
        self.matmul_impl(a, b, true, alpha)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (br, bc) = matrix_dims("matmul", self.value(b))?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::dim(
                "matmul",
                format!(
                    "inner extents differ: {:?} · {:?}{}",
                    self.shape(a),
                    self.shape(b),
                    if trans_b { "ᵀ" } else { "" }
                ),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        let b_strides = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        T::gemm(m, k, n, alpha, self.data(a), (k as isize, 1), self.data(b), b_strides, &mut out, false);
        let needs = self.needs(a) || self.needs(b);
        self.push(
            Tensor::from_parts(vec![m, n], out),
            Op::MatMul { a, b, m, k, n, trans_b, alpha },
            needs,
        )
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = op.kind().name();
        let shape = broadcast(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let n: usize = shape.iter().product();
        let (la, lb) = (da.len(), db.len());
        let out: Vec<T> = if la == n && lb == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % la], db[i % lb])).collect()
        };
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(shape, out), op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let out: Vec<T> = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Tensor::from_parts(shape, out), op, needs)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::Scale { a, c }, |x| x * c)
    }

    pub fn add_const(&mut self, a: Var, c: T) -> Result<Var> {
        self.unary(a, Op::AddConst { a }, |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp { a }, |x| x.exp())
    }

    /// `x · sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu { a }, |x| x / (T::one() + (-x).exp()))
    }

    /// Multiplies `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("scale_by", format!("scale must be scalar, got {:?}", self.shape(s))));
        }
        let c = self.data(s)[0];
        let out: Vec<T> = self.data(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(s);
        self.push(Tensor::from_parts(shape, out), Op::ScaleBy { a, s }, needs)
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: T = self.data(a).iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum { a }, needs)
    }

    /// Inner product of two equally sized tensors, as a one-element tensor.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("dot", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let s: T = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).sum();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_parts(vec![1], vec![s]), Op::Dot { a, b }, needs)
    }

    /// Mean over `axis`; the axis is removed from the shape (a rank-1 input
    /// reduces to shape `[1]`).
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("mean_axis", format!("axis {axis} out of range for {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data(a);
        let inv = T::one() / T::of(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let acc = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in acc.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in acc.iter_mut() {
                *d *= inv;
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let needs = self.needs(a);
        self.push(Tensor::from_parts(out_shape, out), Op::MeanAxis { a, outer, len, inner }, needs)
    }

    /// Running column means of a matrix: `out[i, n] = mean_{m <= i} a[m, n]`.
    pub fn prefix_mean(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = matrix_dims("prefix_mean", self.value(a))?;
        let x = self.data(a);
        let mut out = vec![T::zero(); rows * cols];
        let mut run = vec![T::zero(); cols];
        for i in 0..rows {
            let inv = T::one() / T::of((i + 1) as f64);
            let src = &x[i * cols..(i + 1) * cols];
            let dst = &mut out[i * cols..(i + 1) * cols];
            for ((r, &s), d) in run.iter_mut().zip(src).zip(dst.iter_mut()) {
                *r += s;
                *d = *r * inv;
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::from_parts(vec![rows, cols], out), Op::PrefixMean { a, rows, cols }, needs)
    }

    // ---- normalisation and attention primitives ------------------------

    /// Max-subtracted softmax over the last dimension. Masked entries are
    /// exactly zero; a row with nothing kept is an error.
    pub fn softmax(&mut self, a: Var, mask: Option<&Mask>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let cols = *shape.last().unwrap();
        let x = self.data(a);
        let rows = x.len() / cols;
        let block_rows = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        if let Some(Mask::Keep { shape: ms, keep }) = mask {
            if ms.last() != Some(&cols) || x.len() % keep.len() != 0 {
                return Err(Error::dim("softmax", format!("mask {ms:?} does not fit input {shape:?}")));
            }
        }
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let src = &x[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            match mask {
                None => softmax_row(src, dst, |_| true),
                Some(Mask::Causal) => {
                    let limit = (r % block_rows) as isize + cols as isize - block_rows as isize;
                    if limit < 0 {
                        return Err(Error::DegenerateRow { row: r });
                    }
                    let end = (limit as usize).min(cols - 1) + 1;
                    softmax_prefix(&src[..end], &mut dst[..end]);
                }
                Some(Mask::Keep { keep, .. }) => {
                    let off = (r * cols) % keep.len();
                    let k = &keep[off..off + cols];
                    if !k.iter().any(|&b| b) {
                        return Err(Error::DegenerateRow { row: r });
                    }
                    softmax_row(src, dst, |j| k[j]);
                }
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::from_parts(shape, out), Op::Softmax { a }, needs)
    }

    /// Root-mean-square normalisation of the last dimension, split into
    /// `groups` equal channel groups that are normalised independently
    /// (`groups = 1` is plain RMSNorm). `gain` holds one weight per channel.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, groups: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap();
        if groups == 0 || c % groups != 0 {
            return Err(Error::dim("rmsnorm", format!("{c} channels do not split into {groups} groups")));
        }
        if self.value(gain).numel() != c {
            return Err(Error::dim(
                "rmsnorm",
                format!("gain {:?} does not match last extent {c} of {shape:?}", self.shape(gain)),
            ));
        }
        let gs = c / groups;
        let eps = T::of(eps);
        let xs = self.data(x);
        let g = self.data(gain);
        let rows = xs.len() / c;
        let mut out = vec![T::zero(); xs.len()];
        let mut inv_rms = Vec::with_capacity(rows * groups);
        let inv_gs = T::one() / T::of(gs as f64);
        for r in 0..rows {
            for grp in 0..groups {
                let lo = r * c + grp * gs;
                let seg = &xs[lo..lo + gs];
                let ms = seg.iter().map(|&v| v * v).sum::<T>() * inv_gs;
                let inv = T::one() / (ms + eps).sqrt();
                inv_rms.push(inv);
                for (j, &v) in seg.iter().enumerate() {
                    out[lo + j] = v * inv * g[grp * gs + j];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gain);
        self.push(Tensor::from_parts(shape, out), Op::RmsNorm { x, gain, groups, inv_rms }, needs)
    }

    /// Gathers rows of `table[V×D]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = matrix_dims("embed", self.value(table))?;
        if ids.is_empty() {
            return Err(Error::dim("embed", "empty index list"));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { op: "embed", index: id, extent: v });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let needs = self.needs(table);
        self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embed { table, ids: ids.to_vec() },
            needs,
        )
    }

    /// Mean negative log-likelihood of the scored rows of `logits[N×V]`.
    /// Rows whose target is `None` are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (n, v) = matrix_dims("cross_entropy", self.value(logits))?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", format!("{n} rows but {} targets", targets.len())));
        }
        let x = self.data(logits);
        let mut probs = vec![T::zero(); n * v];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::Index { op: "cross_entropy", index: t, extent: v });
            }
            let row = &x[i * v..(i + 1) * v];
            softmax_row(row, &mut probs[i * v..(i + 1) * v], |_| true);
            total += log_sum_exp(row) - row[t].as_f64();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract("cross_entropy needs at least one scored target".into()));
        }
        let loss = T::of(total / count as f64);
        let needs = self.needs(logits);
        self.push(
            Tensor::from_parts(vec![1], vec![loss]),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count },
            needs,
        )
    }

    /// Rotary position encoding of `a[N×d]` with interleaved channel pairs
    /// `(2k, 2k+1)` rotated by `positions[i] · base^(-2k/d)`.
    pub fn rope(&mut self, a: Var, positions: &[usize], base: f64) -> Result<Var> {
        let (n, d) = matrix_dims("rope", self.value(a))?;
        if d % 2 != 0 {
            return Err(Error::dim("rope", format!("channel count {d} must be even")));
        }
        if positions.len() != n {
            return Err(Error::dim("rope", format!("{n} rows but {} positions", positions.len())));
        }
        let half = d / 2;
        let table = self.rope_table(positions, d, base);
        let (cos, sin) = (&table.cos, &table.sin);
        let x = self.data(a);
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            for k in 0..half {
                let (c, s) = (cos[i * half + k], sin[i * half + k]);
                let (x0, x1) = (x[i * d + 2 * k], x[i * d + 2 * k + 1]);
                out[i * d + 2 * k] = x0 * c - x1 * s;
                out[i * d + 2 * k + 1] = x0 * s + x1 * c;
            }
        }
        let needs = self.needs(a);
        self.push(Tensor::from_parts(vec![n, d], out), Op::Rope { a, table }, needs)
    }

    fn rope_table(&mut self, positions: &[usize], d: usize, base: f64) -> Arc<RopeTable<T>> {
        if let Some(t) = self.rope_tables.iter().find(|t| t.d == d && t.base == base && t.positions == positions) {
            return t.clone();
        }
        let half = d / 2;
        let freqs: Vec<f64> = (0..half).map(|k| base.powf(-2.0 * k as f64 / d as f64)).collect();
        let mut cos = Vec::with_capacity(positions.len() * half);
        let mut sin = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for f in &freqs {
                let theta = p as f64 * f;
                cos.push(T::of(theta.cos()));
                sin.push(T::of(theta.sin()));
            }
        }
        let t = Arc::new(RopeTable { positions: positions.to_vec(), d, base, cos, sin });
        self.rope_tables.push(t.clone());
        t
    }

    // ---- layout ---------------------------------------------------------

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix_dims("slice_cols", self.value(a))?;
        if len == 0 || start + len > c {
            return Err(Error::dim("slice_cols", format!("columns {start}..{} of {c}", start + len)));
        }
        let x = self.data(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(a);
        self.push(Tensor::from_parts(vec![r, len], out), Op::SliceCols { a, start }, needs)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no inputs"));
        };
        let (r, _) = matrix_dims("concat_cols", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = matrix_dims("concat_cols", self.value(p))?;
            if pr != r {
                return Err(Error::dim("concat_cols", format!("row counts {r} and {pr} differ")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_parts(vec![r, total], out), Op::ConcatCols { parts: parts.to_vec() }, needs)
    }

    // ---- reverse sweep --------------------------------------------------

    /// Populates gradients of the scalar `loss` with respect to every node
    /// that depends on a trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(mut g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Some(bad) = first_non_finite(&g) {
                return Err(Error::NonFinite {
                    stage: "backward",
                    op: node.op.kind().name(),
                    node: idx,
                    shape: node.value.shape().to_vec(),
                    index: bad,
                });
            }
            if node.needs_grad {
                if self.fault == Some(node.op.kind()) {
                    let k = T::of(1.5);
                    let mut bad = g.clone();
                    bad.iter_mut().for_each(|v| *v *= k);
                    self.vjp(idx, &bad, &mut grads);
                } else {
                    self.vjp(idx, &g, &mut grads);
                }
            } else {
                g.clear();
            }
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn vjp(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        // Inputs always precede `idx` on the tape, so their buffers never
        // alias `g`.
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, nodes[$v.0].value.numel(), $v)
            };
        }
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n, trans_b, alpha } => {
                if needs(a) {
                    let bd = self.data(b);
                    let strides = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    T::gemm(m, n, k, alpha, g, (n as isize, 1), bd, strides, acc!(a), true);
                }
                if needs(b) {
                    let ad = self.data(a);
                    if trans_b {
                        T::gemm(n, m, k, alpha, g, (1, n as isize), ad, (k as isize, 1), acc!(b), true);
                    } else {
                        T::gemm(k, m, n, alpha, ad, (1, k as isize), g, (n as isize, 1), acc!(b), true);
                    }
                }
            }
            &Op::Add { a, b } | &Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) { -T::one() } else { T::one() };
                if needs(a) {
                    reduce_into(acc!(a), g, T::one());
                }
                if needs(b) {
                    reduce_into(acc!(b), g, sign);
                }
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let (la, lb) = (ad.len(), bd.len());
                if needs(a) {
                    let ga = acc!(a);
                    for (i, &gi) in g.iter().enumerate() {
                        ga[i % la] += gi * bd[i % lb];
                    }
                }
                if needs(b) {
                    let gb = acc!(b);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % lb] += gi * ad[i % la];
                    }
                }
            }
            &Op::Scale { a, c } => {
                for (d, &gi) in acc!(a).iter_mut().zip(g) {
                    *d += gi * c;
                }
            }
            &Op::ScaleBy { a, s } => {
                let c = self.data(s)[0];
                if needs(a) {
                    for (d, &gi) in acc!(a).iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
                if needs(s) {
                    let dot: T = self.data(a).iter().zip(g).map(|(&x, &gi)| x * gi).sum();
                    acc!(s)[0] += dot;
                }
            }
            &Op::AddConst { a } => {
                for (d, &gi) in acc!(a).iter_mut().zip(g) {
                    *d += gi;
                }
            }
            &Op::Exp { a } => {
                for ((d, &gi), &yi) in acc!(a).iter_mut().zip(g).zip(y) {
                    *d += gi * yi;
                }
            }
            &Op::Silu { a } => {
                let x = self.data(a);
                for ((d, &gi), &xi) in acc!(a).iter_mut().zip(g).zip(x) {
                    let s = T::one() / (T::one() + (-xi).exp());
                    *d += gi * s * (T::one() + xi * (T::one() - s));
                }
            }
            &Op::Sum { a } => {
                for d in acc!(a).iter_mut() {
                    *d += g[0];
                }
            }
            &Op::Dot { a, b } => {
                if needs(a) {
                    for (d, &v) in acc!(a).iter_mut().zip(self.data(b)) {
                        *d += g[0] * v;
                    }
                }
                if needs(b) {
                    for (d, &v) in acc!(b).iter_mut().zip(self.data(a)) {
                        *d += g[0] * v;
                    }
                }
            }
            &Op::MeanAxis { a, outer, len, inner } => {
                let inv = T::one() / T::of(len as f64);
                let ga = acc!(a);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s * inv;
                        }
                    }
                }
            }
            &Op::PrefixMean { a, rows, cols } => {
                let ga = acc!(a);
                let mut run = vec![T::zero(); cols];
                for i in (0..rows).rev() {
                    let inv = T::one() / T::of((i + 1) as f64);
                    for j in 0..cols {
                        run[j] += g[i * cols + j] * inv;
                        ga[i * cols + j] += run[j];
                    }
                }
            }
            &Op::Softmax { a } => {
                let cols = *node.value.shape().last().unwrap();
                let ga = acc!(a);
                for r in 0..y.len() / cols {
                    let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for ((d, &p), &q) in ga[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
                        *d += p * (q - dot);
                    }
                }
            }
            Op::RmsNorm { x, gain, groups, inv_rms } => {
                let (x, gain) = (*x, *gain);
                let xs = self.data(x);
                let gw = self.data(gain);
                let c = gw.len();
                let gs = c / groups;
                let inv_gs = T::one() / T::of(gs as f64);
                let mut dgain = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xs.len()];
                for r in 0..xs.len() / c {
                    for grp in 0..*groups {
                        let lo = r * c + grp * gs;
                        let inv = inv_rms[r * groups + grp];
                        let mut proj = T::zero();
                        for j in 0..gs {
                            let xhat = xs[lo + j] * inv;
                            let gy = g[lo + j];
                            dgain[grp * gs + j] += gy * xhat;
                            proj += gy * gw[grp * gs + j] * xhat;
                        }
                        proj *= inv_gs;
                        for j in 0..gs {
                            let xhat = xs[lo + j] * inv;
                            dx[lo + j] = inv * (g[lo + j] * gw[grp * gs + j] - xhat * proj);
                        }
                    }
                }
                if needs(x) {
                    for (d, v) in acc!(x).iter_mut().zip(dx) {
                        *d += v;
                    }
                }
                if needs(gain) {
                    for (d, v) in acc!(gain).iter_mut().zip(dgain) {
                        *d += v;
                    }
                }
            }
            Op::Embed { table, ids } => {
                let d = self.shape(*table)[1];
                let gt = acc!(*table);
                for (i, &id) in ids.iter().enumerate() {
                    for (dst, &s) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[i * d..(i + 1) * d]) {
                        *dst += s;
                    }
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / T::of(*count as f64);
                let gl = acc!(*logits);
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..v {
                        gl[i * v + j] += probs[i * v + j] * scale;
                    }
                    gl[i * v + t] -= scale;
                }
            }
            &Op::SliceCols { a, start } => {
                let c = self.shape(a)[1];
                let len = node.value.shape()[1];
                let ga = acc!(a);
                for i in 0..g.len() / len {
                    for j in 0..len {
                        ga[i * c + start + j] += g[i * len + j];
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if needs(p) {
                        let gp = acc!(p);
                        for i in 0..g.len() / total {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Rope { a, table } => {
                let (cos, sin) = (&table.cos, &table.sin);
                let d = self.shape(*a)[1];
                let half = d / 2;
                let ga = acc!(*a);
                for i in 0..g.len() / d {
                    for k in 0..half {
                        let (c, s) = (cos[i * half + k], sin[i * half + k]);
                        let (g0, g1) = (g[i * d + 2 * k], g[i * d + 2 * k + 1]);
                        ga[i * d + 2 * k] += g0 * c + g1 * s;
                        ga[i * d + 2 * k + 1] += -g0 * s + g1 * c;
                    }
                }
            }
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], numel: usize, v: Var) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); numel])
}

/// Adds `sign · g` into `dst`, summing over broadcast repeats.
fn reduce_into<T: Scalar>(dst: &mut [T], g: &[T], sign: T) {
    let l = dst.len();
    if l == g.len() {
        for (d, &v) in dst.iter_mut().zip(g) {
            *d += sign * v;
        }
    } else {
        for (i, &v) in g.iter().enumerate() {
            dst[i % l] += sign * v;
        }
    }
}

fn softmax_row<T: Scalar>(src: &[T], dst: &mut [T], keep: impl Fn(usize) -> bool) {
    let mut max = T::neg_infinity();
    for (j, &v) in src.iter().enumerate() {
        if keep(j) && v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for (j, (d, &v)) in dst.iter_mut().zip(src).enumerate() {
        *d = if keep(j) { (v - max).exp() } else { T::zero() };
        sum += *d;
    }
    let inv = T::one() / sum;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

fn softmax_prefix<T: Scalar>(src: &[T], dst: &mut [T]) {
    let max = src.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = (v - max).exp();
        sum += *d;
    }
    let inv = T::one() / sum;
    for d in dst.iter_mut() {
        *d *= inv;
    }
}

pub(crate) fn log_sum_exp<T: Scalar>(row: &[T]) -> f64 {
    let max = row.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v.as_f64() - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let i = g.constant(Tensor::eye(2)).unwrap();
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

        let x = g.constant(t(&[1, 1], &[2.0])).unwrap();
        let y = g.constant(t(&[1, 1], &[3.0])).unwrap();
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::zeros([2, 3])).unwrap();
        let b = g.constant(Tensor::zeros([2, 3])).unwrap();
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[1, 3], &[0.0, 0.0, 0.0])).unwrap();
        let s = g.softmax(a, None).unwrap();
        for &v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let b = g.constant(t(&[1, 2], &[0.0, 2f64.ln()])).unwrap();
        let s = g.softmax(b, None).unwrap();
        let d = g.value(s).data();
        assert!((d[0] - 1.0 / 3.0).abs() < 1e-15 && (d[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_masks_are_exact_zeros() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_f64([3, 3], &[1.0, 5.0, 9.0, 2.0, 3.0, 7.0, 0.0, 1.0, 2.0]).unwrap()).unwrap();
        let s = g.softmax(a, Some(&Mask::Causal)).unwrap();
        let d = g.value(s).data();
        assert_eq!(&d[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(d[5], 0.0);
        for r in 0..3 {
            let sum: f32 = d[r * 3..r * 3 + 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fully_masked_row_is_degenerate() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros([2, 2])).unwrap();
        let m = Mask::keep([2, 2], vec![true, false, false, false]).unwrap();
        assert!(matches!(g.softmax(a, Some(&m)), Err(Error::DegenerateRow { row: 1 })));
    }

    #[test]
    fn mean_axis_columns() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(t(&[2, 2], &[1.0, 0.0, 0.5, 0.5])).unwrap();
        let m = g.mean_axis(a, 0).unwrap();
        assert_eq!(g.shape(m), &[2]);
        assert_eq!(g.value(m).data(), &[0.75, 0.25]);
    }

    #[test]
    fn elementwise_identities() {
        let mut g = Graph::<f64>::new();
        let z = g.constant(Tensor::zeros([2, 3])).unwrap();
        let e = g.exp(z).unwrap();
        assert!(g.value(e).data().iter().all(|&v| v == 1.0));
        let x = g.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.25, -1.0])).unwrap();
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn broadcast_only_leading_extents() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::ones([2, 3])).unwrap();
        let row = g.constant(t(&[3], &[1.0, 2.0, 3.0])).unwrap();
        let lead = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let col = g.constant(t(&[2, 1], &[1.0, 2.0])).unwrap();
        let s = g.add(a, row).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0, 4.0, 2.0, 3.0, 4.0]);
        assert!(g.sub(lead, a).is_ok());
        assert!(matches!(g.mul(a, col), Err(Error::Dimension { .. })));
    }

    #[test]
    fn backward_closed_forms() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad()).unwrap();
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.grad(s).unwrap(), &[1.0]);

        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]).with_grad()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::<f64>::ones([2]).with_grad()).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn forward_overflow_is_reported() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::full([2], 200.0f32)).unwrap();
        let err = g.exp(x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp", stage: "forward", .. }), "{err}");
    }

    #[test]
    fn embed_rejects_bad_index() {
        let mut g = Graph::<f64>::new();
        let e = g.constant(Tensor::eye(3)).unwrap();
        let r = g.embed(e, &[0]).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 0.0, 0.0]);
        assert!(matches!(g.embed(e, &[3]), Err(Error::Index { index: 3, extent: 3, .. })));
    }

    #[test]
    fn untouched_constants_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let c = g.constant(Tensor::ones([2])).unwrap();
        let x = g.leaf(Tensor::<f64>::ones([2]).with_grad()).unwrap();
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0]);
    }
}
