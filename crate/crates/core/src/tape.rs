//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! Every differentiable operation appends a node holding its output value and
//! the references it needs for the vector-Jacobian product. Nodes are stored
//! in execution order, so inputs always precede their consumers and a single
//! reverse sweep visits each node once.
//!
//! `requires_grad` propagates forward: a node needs a gradient iff one of its
//! inputs does. Backward skips everything else, which is what keeps frozen
//! weights cheap during adapter fine-tuning.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, PrefixNorm};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization applied by [`Tape::prefix_attention`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnNorm {
    /// Separate softmaxes; prompt block scaled by `gates[index]`.
    Gated { gates: Var, index: usize },
    /// Joint softmax over prompts and words, no gate.
    Joint,
}

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    BroadcastAddRow { x: Var, row: Var },
    Softmax(Var),
    RmsNorm { x: Var, w: Var, inv: Vec<T> },
    Rope { x: Var, positions: Vec<usize>, head_dim: usize },
    Gather { table: Var, ids: Vec<usize> },
    PrefixAttn {
        scores: Var,
        prompt_len: usize,
        visible: Vec<usize>,
        norm: AttnNorm,
        prompt_probs: Vec<T>,
    },
    MeanRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<T>,
        count: usize,
    },
}

#[derive(Clone, Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-owner recording of one forward pass.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<T>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`; exactly zero when `v` is not
    /// on a differentiable path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Borrow the raw buffer when one was materialized.
    pub fn raw(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Vec<T> {
        let n: usize = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![T::zero(); n])
    }
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [r, c] => (*r, *c),
        [c] => (1, *c),
        _ => (1, shape.iter().product()),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Debug fault injection: multiplies every leaf gradient by `factor`.
    /// Exists so gradient checks can be shown to fail on a broken backward.
    pub fn with_fault(mut self, factor: T) -> Self {
        self.fault = Some(factor);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.matrix_dims(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul")?;
        let (k2, n) = self.mat(b, "matmul")?;
        if k != k2 {
            return dim_err("matmul", self.shape(a), self.shape(b));
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], c)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.mat(a, "matmul_nt")?;
        let (n, k2) = self.mat(b, "matmul_nt")?;
        if k != k2 {
            return dim_err("matmul_nt", self.shape(a), self.shape(b));
        }
        let mut c = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(&mut c, self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], c)?;
        Ok(self.push(t, Op::MatMulNT(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return dim_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| kernels::silu(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(t, Op::Silu(a), &[a])
    }

    /// Stack matrices along the row (token) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_rows", &[], &[]);
        };
        let (_, cols) = self.mat(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.mat(p, "concat_rows")?;
            if c != cols {
                return dim_err("concat_rows", self.shape(first), self.shape(p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "slice_rows")?;
        if start + len > r {
            return dim_err("slice_rows", self.shape(x), &[start, len]);
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::new(vec![len, c], data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    /// Join matrices side by side along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat_cols", &[], &[]);
        };
        let (rows, _) = self.mat(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.mat(p, "concat_cols")?;
            if r != rows {
                return dim_err("concat_cols", self.shape(first), self.shape(p));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "slice_cols")?;
        if start + len > c {
            return dim_err("slice_cols", self.shape(x), &[start, len]);
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::new(vec![r, len], data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    /// Add a `[1×C]` row to every row of `x`.
    pub fn broadcast_add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "broadcast_add_row")?;
        let (rr, rc) = dims2(self.shape(row));
        if rr != 1 || rc != c {
            return dim_err("broadcast_add_row", self.shape(x), self.shape(row));
        }
        let rowv = self.value(row).data();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for (d, &v) in data[i * c..(i + 1) * c].iter_mut().zip(rowv) {
                *d += v;
            }
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::BroadcastAddRow { x, row }, &[x, row]))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "softmax_rows")?;
        if c == 0 {
            return dim_err("softmax_rows", self.shape(x), &[1]);
        }
        if !self.value(x).all_finite() {
            return Err(Error::NonFinite("softmax_rows"));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c) {
            kernels::softmax_in_place(row);
        }
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// `y = x / sqrt(mean(x²) + eps) ⊙ w`, row-wise.
    pub fn rmsnorm(&mut self, x: Var, w: Var, eps: T) -> Result<Var> {
        let (r, c) = self.mat(x, "rmsnorm")?;
        if self.value(w).len() != c {
            return dim_err("rmsnorm", self.shape(x), self.shape(w));
        }
        let (out, inv) = kernels::rmsnorm_rows(self.value(x).data(), self.value(w).data(), eps, c);
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::RmsNorm { x, w, inv }, &[x, w]))
    }

    /// Rotary position embedding applied independently to each `head_dim`
    /// block of the columns; row `i` is rotated by `positions[i]`.
    pub fn rope(&mut self, x: Var, positions: &[usize], head_dim: usize) -> Result<Var> {
        let (r, c) = self.mat(x, "rope")?;
        if head_dim == 0 || head_dim % 2 != 0 || c % head_dim != 0 {
            return Err(Error::Config(format!(
                "rotary embedding needs an even head_dim dividing the width, got head_dim={head_dim}, width={c}"
            )));
        }
        if positions.len() != r {
            return dim_err("rope", self.shape(x), &[positions.len()]);
        }
        let mut data = self.value(x).data().to_vec();
        kernels::rope_rows(&mut data, c, head_dim, positions, 1.0);
        let t = Tensor::new(vec![r, c], data)?;
        Ok(self.push(
            t,
            Op::Rope {
                x,
                positions: positions.to_vec(),
                head_dim,
            },
            &[x],
        ))
    }

    /// Row lookup `out[i] = table[ids[i]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, c) = self.mat(table, "gather_rows")?;
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocabulary { id, vocab: v });
            }
            data.extend_from_slice(&src[id * c..(id + 1) * c]);
        }
        let t = Tensor::new(vec![ids.len(), c], data)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Attention weights from a score matrix whose first `prompt_len` columns
    /// score prompt keys and whose remaining columns score word keys.
    ///
    /// Row `i` sees word keys `0..visible(i)` where, when `causal`, the last
    /// query row sees every word key and earlier rows one fewer each; without
    /// `causal` every row sees all word keys.
    pub fn prefix_attention(
        &mut self,
        scores: Var,
        prompt_len: usize,
        causal: bool,
        norm: AttnNorm,
    ) -> Result<Var> {
        let (rows, width) = self.mat(scores, "prefix_attention")?;
        if prompt_len > width {
            return dim_err("prefix_attention", self.shape(scores), &[prompt_len]);
        }
        let words = width - prompt_len;
        if causal && rows > words {
            return dim_err("prefix_attention", self.shape(scores), &[rows, words]);
        }
        if !self.value(scores).all_finite() {
            return Err(Error::NonFinite("prefix_attention"));
        }
        let gate_norm = match norm {
            AttnNorm::Gated { gates, index } => {
                let g = self.value(gates);
                if index >= g.len() {
                    return dim_err("prefix_attention gate", g.shape(), &[index]);
                }
                PrefixNorm::Gated(g.data()[index])
            }
            AttnNorm::Joint => PrefixNorm::Joint,
        };
        let visible: Vec<usize> = (0..rows)
            .map(|i| if causal { words - rows + i + 1 } else { words })
            .collect();
        let src = self.value(scores).data();
        let mut weights = vec![T::zero(); rows * width];
        let mut prompt_probs = vec![T::zero(); rows * prompt_len];
        for i in 0..rows {
            kernels::prefix_weights_row(
                &src[i * width..(i + 1) * width],
                prompt_len,
                visible[i],
                gate_norm,
                &mut weights[i * width..(i + 1) * width],
                &mut prompt_probs[i * prompt_len..(i + 1) * prompt_len],
            );
        }
        let t = Tensor::new(vec![rows, width], weights)?;
        let mut inputs = vec![scores];
        if let AttnNorm::Gated { gates, .. } = norm {
            inputs.push(gates);
        }
        Ok(self.push(
            t,
            Op::PrefixAttn {
                scores,
                prompt_len,
                visible,
                norm,
                prompt_probs,
            },
            &inputs,
        ))
    }

    /// Column means, `[R×C] → [1×C]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.mat(x, "mean_rows")?;
        if r == 0 {
            return dim_err("mean_rows", self.shape(x), &[1]);
        }
        let mut data = vec![T::zero(); c];
        for row in self.value(x).data().chunks_exact(c) {
            for (d, &v) in data.iter_mut().zip(row) {
                *d += v;
            }
        }
        let inv = T::one() / T::of(r as f64);
        data.iter_mut().for_each(|d| *d *= inv);
        let t = Tensor::new(vec![1, c], data)?;
        Ok(self.push(t, Op::MeanRows(x), &[x]))
    }

    /// Mean negative log-likelihood over rows whose target is not
    /// `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        let (t_len, v) = self.mat(logits, "cross_entropy")?;
        if targets.len() != t_len {
            return dim_err("cross_entropy", self.shape(logits), &[targets.len()]);
        }
        if !self.value(logits).all_finite() {
            return Err(Error::NonFinite("cross_entropy"));
        }
        let src = self.value(logits).data();
        let mut probs = src.to_vec();
        let mut nll = T::zero();
        let mut count = 0usize;
        for ((row, logit_row), &tgt) in probs.chunks_exact_mut(v).zip(src.chunks_exact(v)).zip(targets) {
            kernels::softmax_in_place(row);
            if tgt == ignore_index {
                continue;
            }
            if tgt >= v {
                return Err(Error::Vocabulary { id: tgt, vocab: v });
            }
            let max = logit_row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = logit_row.iter().fold(T::zero(), |s, &x| s + (x - max).exp()).ln() + max;
            nll += lse - logit_row[tgt];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let loss = nll / T::of(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            &[logits],
        ))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return dim_err("backward", self.shape(loss), &[1]);
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        if let Some(f) = self.fault {
            for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
                if let (Op::Leaf, Some(g)) = (&node.op, g) {
                    g.iter_mut().for_each(|x| *x *= f);
                }
            }
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.value.len()]))
    }

    fn backprop_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = out.cols();
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(da, g, self.value(*b).data(), m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(db, self.value(*a).data(), g, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                // c = a·bᵀ, a:[m×k], b:[n×k]
                let (m, k) = dims2(self.shape(*a));
                let n = out.cols();
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_acc(da, g, self.value(*b).data(), m, n, k);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(db, g, self.value(*a).data(), m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(bv) {
                        *d += gi * bi;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(av) {
                        *d += gi * ai;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(d) = self.slot(grads, *a) {
                    d.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *s);
                }
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                if let Some(d) = self.slot(grads, *a) {
                    for ((d, &gi), &x) in d.iter_mut().zip(g).zip(av) {
                        let s = kernels::sigmoid(x);
                        *d += gi * s * (T::one() + x * (T::one() - s));
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(d) = self.slot(grads, p) {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(x, &y)| *x += y);
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                if let Some(d) = self.slot(grads, *x) {
                    d[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if let Some(d) = self.slot(grads, p) {
                        for i in 0..rows {
                            let src = &g[i * total + off..i * total + off + w];
                            d[i * w..(i + 1) * w].iter_mut().zip(src).for_each(|(a, &b)| *a += b);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.value(*x).cols();
                let w = out.cols();
                if let Some(d) = self.slot(grads, *x) {
                    for (i, gr) in g.chunks_exact(w.max(1)).enumerate().take(out.rows()) {
                        d[i * c + start..i * c + start + w]
                            .iter_mut()
                            .zip(gr)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::BroadcastAddRow { x, row } => {
                if let Some(d) = self.slot(grads, *x) {
                    d.iter_mut().zip(g).for_each(|(a, &b)| *a += b);
                }
                let c = out.cols();
                if let Some(d) = self.slot(grads, *row) {
                    for gr in g.chunks_exact(c) {
                        d.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.cols();
                if let Some(d) = self.slot(grads, *x) {
                    for ((dr, yr), gr) in d.chunks_exact_mut(c).zip(out.data().chunks_exact(c)).zip(g.chunks_exact(c)) {
                        kernels::softmax_backward_acc(dr, yr, gr);
                    }
                }
            }
            Op::RmsNorm { x, w, inv } => {
                let c = out.cols();
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let cf = T::of(c as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, &ir) in inv.iter().enumerate() {
                        let xr = &xv[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let s = xr
                            .iter()
                            .zip(gr)
                            .zip(wv)
                            .fold(T::zero(), |s, ((&xi, &gi), &wi)| s + xi * gi * wi);
                        let coef = ir * ir * ir * s / cf;
                        for (j, d) in dx[r * c..(r + 1) * c].iter_mut().enumerate() {
                            *d += ir * wv[j] * gr[j] - xr[j] * coef;
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *w) {
                    for (r, &ir) in inv.iter().enumerate() {
                        let xr = &xv[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        for ((d, &xi), &gi) in dw.iter_mut().zip(xr).zip(gr) {
                            *d += gi * xi * ir;
                        }
                    }
                }
            }
            Op::Rope { x, positions, head_dim } => {
                let c = out.cols();
                if let Some(d) = self.slot(grads, *x) {
                    let mut back = g.to_vec();
                    kernels::rope_rows(&mut back, c, *head_dim, positions, -1.0);
                    d.iter_mut().zip(&back).for_each(|(a, &b)| *a += b);
                }
            }
            Op::Gather { table, ids } => {
                let c = out.cols();
                if let Some(d) = self.slot(grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        d[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::PrefixAttn {
                scores,
                prompt_len,
                visible,
                norm,
                prompt_probs,
            } => self.backprop_prefix(out, g, *scores, *prompt_len, visible, *norm, prompt_probs, grads),
            Op::MeanRows(x) => {
                let c = out.cols();
                let r = self.value(*x).rows();
                let inv = T::one() / T::of(r as f64);
                if let Some(d) = self.slot(grads, *x) {
                    for dr in d.chunks_exact_mut(c) {
                        dr.iter_mut().zip(g).for_each(|(a, &b)| *a += b * inv);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / T::of(*count as f64);
                if let Some(d) = self.slot(grads, *logits) {
                    for (i, &tgt) in targets.iter().enumerate() {
                        if tgt == *ignore_index {
                            continue;
                        }
                        let dr = &mut d[i * v..(i + 1) * v];
                        for (dj, &pj) in dr.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *dj += pj * scale;
                        }
                        dr[tgt] -= scale;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_prefix(
        &self,
        out: &Tensor<T>,
        g: &[T],
        scores: Var,
        prompt_len: usize,
        visible: &[usize],
        norm: AttnNorm,
        prompt_probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let width = out.cols();
        let weights = out.data();
        match norm {
            AttnNorm::Gated { gates, index } => {
                let gate = self.value(gates).data()[index];
                if let Some(ds) = self.slot(grads, scores) {
                    let mut dp = vec![T::zero(); prompt_len];
                    for (i, &vis) in visible.iter().enumerate() {
                        let row = i * width;
                        let pp = &prompt_probs[i * prompt_len..(i + 1) * prompt_len];
                        for (d, &gi) in dp.iter_mut().zip(&g[row..row + prompt_len]) {
                            *d = gi * gate;
                        }
                        kernels::softmax_backward_acc(&mut ds[row..row + prompt_len], pp, &dp);
                        let (w0, w1) = (row + prompt_len, row + prompt_len + vis);
                        kernels::softmax_backward_acc(&mut ds[w0..w1], &weights[w0..w1], &g[w0..w1]);
                    }
                }
                if let Some(dg) = self.slot(grads, gates) {
                    let mut acc = T::zero();
                    for i in 0..visible.len() {
                        let row = i * width;
                        let pp = &prompt_probs[i * prompt_len..(i + 1) * prompt_len];
                        acc += kernels::dot(&g[row..row + prompt_len], pp);
                    }
                    dg[index] += acc;
                }
            }
            AttnNorm::Joint => {
                if let Some(ds) = self.slot(grads, scores) {
                    for (i, &vis) in visible.iter().enumerate() {
                        let (a, b) = (i * width, i * width + prompt_len + vis);
                        kernels::softmax_backward_acc(&mut ds[a..b], &weights[a..b], &g[a..b]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m64(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::<f64>::new();
        let i2 = t.constant(Tensor::eye(2));
        let p = t.matmul(i2, i2).unwrap();
        assert_eq!(t.value(p), &Tensor::eye(2));

        let a = t.constant(m64(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = t.constant(m64(&[&[1.0], &[1.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 7.0]);

        let z = t.constant(Tensor::zeros(&[3, 2]));
        let zc = t.matmul(z, a).unwrap();
        assert!(t.value(zc).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f32>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { lhs, rhs, .. } if lhs == vec![2, 3] && rhs == vec![2, 3]));
    }

    #[test]
    fn softmax_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(m64(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]]));
        let y = t.softmax_rows(x).unwrap();
        let d = t.value(y).data();
        assert_eq!(&d[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((d[4] - 0.25).abs() < 1e-15 && (d[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let mut t = Tape::<f32>::new();
        let x = t.constant(Tensor::new(vec![1, 2], vec![f32::NAN, 0.0]).unwrap());
        assert!(matches!(t.softmax_rows(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn rmsnorm_examples() {
        let mut t = Tape::<f64>::new();
        let ones = t.constant(Tensor::full(&[4], 1.0));
        let x = t.constant(Tensor::full(&[1, 4], 1.0));
        let y = t.rmsnorm(x, ones, 1e-12).unwrap();
        assert!(t.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-9));

        let z = t.constant(Tensor::zeros(&[1, 4]));
        let yz = t.rmsnorm(z, ones, 1e-6).unwrap();
        assert!(t.value(yz).data().iter().all(|&v| v == 0.0));

        let w2 = t.constant(Tensor::full(&[2], 1.0));
        let x34 = t.constant(m64(&[&[3.0, 4.0]]));
        let y34 = t.rmsnorm(x34, w2, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((t.value(y34).data()[0] - 3.0 / r).abs() < 1e-15);
        assert!((t.value(y34).data()[1] - 4.0 / r).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut t = Tape::<f64>::new();
        let u = t.constant(Tensor::zeros(&[1, 4]));
        let l = t.cross_entropy(u, &[2], usize::MAX).unwrap();
        assert!((t.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        let x = t.constant(m64(&[&[0.0, 3f64.ln()]]));
        let l = t.cross_entropy(x, &[0], usize::MAX).unwrap();
        assert!((t.value(l).data()[0] - 4f64.ln()).abs() < 1e-15);

        let sharp = t.constant(m64(&[&[60.0, 0.0, 0.0]]));
        let l = t.cross_entropy(sharp, &[0], usize::MAX).unwrap();
        assert!(t.value(l).data()[0] < 1e-20);

        assert!(matches!(t.cross_entropy(sharp, &[9], 9), Err(Error::EmptyLoss)));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_count() {
        let mut t = Tape::<f64>::new();
        let x = t.param(m64(&[&[0.0, 3f64.ln()], &[1.0, 1.0], &[0.0, 0.0]]));
        let l = t.cross_entropy(x, &[0, 7, 1], 7).unwrap();
        let g = t.backward(l).unwrap().wrt(x);
        let want = [(0.25 - 1.0) / 2.0, 0.75 / 2.0, 0.0, 0.0, 0.25, -0.25];
        for (a, b) in g.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{:?}", g);
        }
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::<f32>::new();
        let p = t.constant(Tensor::zeros(&[5, 3]));
        let w = t.constant(Tensor::full(&[7, 3], 1.0));
        let c = t.concat_rows(&[p, w]).unwrap();
        assert_eq!(t.shape(c), &[12, 3]);
        let back = t.slice_rows(c, 5, 7).unwrap();
        assert_eq!(t.value(back), t.value(w));

        let z = t.constant(Tensor::zeros(&[1, 1]));
        let s = t.silu(z);
        assert_eq!(t.value(s).data(), &[0.0]);

        let pr = t.constant(Tensor::full(&[5, 3], 2.5));
        let v0 = t.constant(Tensor::zeros(&[1, 3]));
        let fused = t.broadcast_add_row(pr, v0).unwrap();
        assert_eq!(t.value(fused), t.value(pr));

        let bad = t.constant(Tensor::zeros(&[1, 4]));
        assert!(t.broadcast_add_row(pr, bad).is_err());
        assert!(t.concat_rows(&[p, bad]).is_err());
        assert!(t.add(p, w).is_err());
    }

    #[test]
    fn gradient_is_zero_off_the_loss_path() {
        let mut t = Tape::<f64>::new();
        let a = t.param(Tensor::full(&[1, 2], 1.5));
        let unused = t.param(Tensor::full(&[1, 2], 3.0));
        let _dead = t.scale(unused, 2.0);
        let s = t.softmax_rows(a).unwrap();
        let l = t.cross_entropy(s, &[0], usize::MAX).unwrap();
        let grads = t.backward(l).unwrap();
        assert!(grads.wrt(unused).data().iter().all(|&x| x == 0.0));
        assert_eq!(grads.wrt(unused).shape(), &[1, 2]);
    }

    #[test]
    fn gated_prefix_with_zero_gate_blocks_prompt_gradient() {
        let mut t = Tape::<f64>::new();
        let s = t.param(m64(&[&[0.4, -0.3, 0.2, 0.9], &[0.1, 0.5, -0.7, 0.3]]));
        let gates = t.param(Tensor::zeros(&[1, 1]));
        let w = t.prefix_attention(s, 2, true, AttnNorm::Gated { gates, index: 0 }).unwrap();
        let wd = t.value(w).data().to_vec();
        // row 0 sees one word, row 1 sees two
        assert_eq!(&wd[..4], &[0.0, 0.0, 1.0, 0.0]);
        let v = t.constant(m64(&[&[1.0], &[2.0], &[3.0], &[4.0]]));
        let o = t.matmul(w, v).unwrap();
        let sq = t.mul(o, o).unwrap();
        let flat = t.mean_rows(sq).unwrap();
        let grads = t.backward(flat).unwrap();
        let ds = grads.wrt(s);
        assert_eq!(ds.data()[0], 0.0);
        assert_eq!(ds.data()[1], 0.0);
        assert_eq!(ds.data()[4], 0.0);
        assert_eq!(ds.data()[5], 0.0);
        assert_ne!(grads.wrt(gates).data()[0], 0.0);
    }
}
