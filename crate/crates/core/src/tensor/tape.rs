use super::kernels;
use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: S },
    AddScalar { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Reshape { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Gelu { x: Var },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    SigmoidPair { x: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, count: usize },
    GatherRows { x: Var, index: Vec<Option<usize>> },
    ScatterRows { base: Var, src: Var, index: Vec<Option<usize>> },
    ConcatRows { parts: Vec<Var> },
    SelectRows { on: Var, off: Var, mask: Vec<bool> },
    ZeroRows { x: Var, keep: Vec<bool> },
    StCombine { layer_out: Var, x: Var, gate: Option<Var>, mask: Vec<bool> },
    StraightThrough { soft: Var },
    MeanColumn { x: Var, col: usize },
    Attention { q: Var, k: Var, v: Var, rows: Vec<usize>, seq_len: usize, n_heads: usize, probs: Vec<S>, offsets: Vec<usize> },
    Highway { f: Var, carry: Var, gate: Var },
}

impl<S> Op<S> {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { a, .. } | Op::AddScalar { a } | Op::Sum { a } | Op::Mean { a } | Op::Reshape { a } => vec![*a],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Gelu { x } | Op::Relu { x } | Op::Sigmoid { x } | Op::Softmax { x } | Op::SigmoidPair { x } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::GatherRows { x, .. } | Op::ZeroRows { x, .. } | Op::MeanColumn { x, .. } => vec![*x],
            Op::ScatterRows { base, src, .. } => vec![*base, *src],
            Op::ConcatRows { parts } => parts.clone(),
            Op::SelectRows { on, off, .. } => vec![*on, *off],
            Op::StCombine { layer_out, x, gate, .. } => {
                let mut v = vec![*layer_out, *x];
                v.extend(gate.iter().copied());
                v
            }
            Op::StraightThrough { soft } => vec![*soft],
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Highway { f, carry, gate } => vec![*f, *carry, *gate],
        }
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    retain: bool,
}

/// Append-only record of a forward computation.
///
/// Records are topologically ordered by construction (inputs always precede
/// the record that uses them). [`Tape::backward`] walks them once in reverse.
/// The tape stays usable after a backward pass: a second call adds into the
/// retained gradients, so callers zero them with [`Tape::zero_grad`] between
/// independent losses. Gradients are retained for leaves and for any node
/// marked with [`Tape::retain_grad`].
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn acc<S: Scalar>(slot: &mut Option<Vec<S>>, contrib: &[S]) {
    match slot {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(g, &c)| *g += c),
        None => *slot = Some(contrib.to_vec()),
    }
}

fn acc_owned<S: Scalar>(slot: &mut Option<Vec<S>>, contrib: Vec<S>) {
    match slot {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(g, &c)| *g += c),
        None => *slot = Some(contrib),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_with(value, op, requires_grad)
    }

    fn push_with(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad, retain: false });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input (parameter or probed tensor).
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        let v = self.push_with(value, Op::Leaf, true);
        self.nodes[v.0].retain = true;
        v
    }

    /// A non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_with(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul { a, b }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, self.shape(a), self.shape(b));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale { a, c })
    }

    pub fn add_scalar(&mut self, a: Var, c: S) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar { a })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: S = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: S = t.data().iter().copied().sum::<S>() / S::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean { a })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return shape_err("layer_norm", self.shape(x), self.shape(gain));
        }
        let xt = self.value(x);
        let mut y = vec![S::zero(); xt.len()];
        let mut xhat = vec![S::zero(); xt.len()];
        let inv_std = kernels::layer_norm_rows(
            xt.data(),
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            &mut y,
            &mut xhat,
        );
        let out = Tensor::from_parts(xt.shape().to_vec(), y);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push(out, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid { x })
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let c = xt.cols();
        let mut out = vec![S::zero(); xt.len()];
        for (src, dst) in xt.data().chunks(c).zip(out.chunks_mut(c)) {
            kernels::softmax_row(src, dst);
        }
        let out = Tensor::from_parts(xt.shape().to_vec(), out);
        self.push(out, Op::Softmax { x })
    }

    /// For `x: [N, 2]`, returns `[1 - s, s]` rows with `s = sigmoid(x[:, 1])`.
    pub fn sigmoid_pair(&mut self, x: Var) -> Result<Var> {
        let xt = self.value(x);
        if xt.cols() != 2 {
            return shape_err("sigmoid_pair", xt.shape(), &[2]);
        }
        let mut out = vec![S::zero(); xt.len()];
        for (src, dst) in xt.data().chunks(2).zip(out.chunks_mut(2)) {
            let s = kernels::sigmoid(src[1]);
            dst[0] = S::one() - s;
            dst[1] = s;
        }
        let out = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(out, Op::SigmoidPair { x }))
    }

    /// Mean over masked rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lt = self.value(logits);
        let (rows, v) = (lt.rows(), lt.cols());
        if targets.len() != rows || mask.len() != rows {
            return shape_err("cross_entropy_mean", lt.shape(), &[targets.len()]);
        }
        if let Some(&bad) = targets.iter().zip(mask).find(|(&t, &m)| m && t >= v).map(|(t, _)| t) {
            return Err(Error::Input(format!("target id {bad} outside vocabulary of {v}")));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut total = S::zero();
        for r in 0..rows {
            if mask[r] {
                let row = lt.row(r);
                total += kernels::log_sum_exp(row) - row[targets[r]];
            }
        }
        let loss = total / S::of(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), count },
        ))
    }

    /// Rows of a 2-D view of `x`; `None` entries produce zero padding rows.
    pub fn gather_rows(&mut self, x: Var, index: &[Option<usize>]) -> Result<Var> {
        let xt = self.value(x);
        let (rows, d) = (xt.rows(), xt.cols());
        if index.is_empty() {
            return Err(Error::Tensor("gather_rows with no indices".into()));
        }
        let mut out = vec![S::zero(); index.len() * d];
        for (i, idx) in index.iter().enumerate() {
            if let Some(r) = *idx {
                if r >= rows {
                    return Err(Error::Input(format!("row {r} out of range for {rows} rows")));
                }
                out[i * d..(i + 1) * d].copy_from_slice(xt.row(r));
            }
        }
        let out = Tensor::from_parts(vec![index.len(), d], out);
        Ok(self.push(out, Op::GatherRows { x, index: index.to_vec() }))
    }

    /// Copy of `base` with row `index[i]` replaced by row `i` of `src`.
    pub fn scatter_rows(&mut self, base: Var, src: Var, index: &[Option<usize>]) -> Result<Var> {
        let (bt, st) = (self.value(base), self.value(src));
        let d = bt.cols();
        if st.cols() != d || st.rows() != index.len() {
            return shape_err("scatter_rows", bt.shape(), st.shape());
        }
        let mut out = bt.data().to_vec();
        for (i, idx) in index.iter().enumerate() {
            if let Some(r) = *idx {
                if r >= bt.rows() {
                    return Err(Error::Input(format!("row {r} out of range for {} rows", bt.rows())));
                }
                out[r * d..(r + 1) * d].copy_from_slice(st.row(i));
            }
        }
        let out = Tensor::from_parts(bt.shape().to_vec(), out);
        Ok(self.push(out, Op::ScatterRows { base, src, index: index.to_vec() }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Tensor("concat of nothing".into()))?;
        let d = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != d {
                return shape_err("concat_rows", self.shape(first), t.shape());
            }
            data.extend_from_slice(t.data());
        }
        let rows = data.len() / d;
        Ok(self.push(Tensor::from_parts(vec![rows, d], data), Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Row-wise select: `on` where `mask` is set, `off` elsewhere.
    pub fn select_rows(&mut self, on: Var, off: Var, mask: &[bool]) -> Result<Var> {
        self.same_shape("select_rows", on, off)?;
        let (a, b) = (self.value(on), self.value(off));
        let d = a.cols();
        if mask.len() != a.rows() {
            return shape_err("select_rows", a.shape(), &[mask.len()]);
        }
        let mut out = b.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * d..(r + 1) * d].copy_from_slice(a.row(r));
            }
        }
        let out = Tensor::from_parts(a.shape().to_vec(), out);
        Ok(self.push(out, Op::SelectRows { on, off, mask: mask.to_vec() }))
    }

    /// Rows of `x` where `keep` is set, exact zeros elsewhere.
    pub fn zero_rows(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let xt = self.value(x);
        let d = xt.cols();
        if keep.len() != xt.rows() {
            return shape_err("zero_rows", xt.shape(), &[keep.len()]);
        }
        let mut out = xt.data().to_vec();
        for (r, &k) in keep.iter().enumerate() {
            if !k {
                out[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = S::zero());
            }
        }
        let out = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(out, Op::ZeroRows { x, keep: keep.to_vec() }))
    }

    /// Straight-through gated combine of a wrapped layer with its input.
    ///
    /// The forward value is `layer_out` on rows with `mask` set and `x`
    /// elsewhere, bit for bit. The backward pass treats the rows as having been
    /// scaled by `gate[:, 1]` (active) or `gate[:, 0]` (skipped) whose forward
    /// value is one, so the gate receives the soft-path gradient.
    pub fn st_combine(&mut self, layer_out: Var, x: Var, gate: Option<Var>, mask: &[bool]) -> Result<Var> {
        self.same_shape("st_combine", layer_out, x)?;
        let rows = self.value(x).rows();
        if mask.len() != rows {
            return shape_err("st_combine", self.shape(x), &[mask.len()]);
        }
        if let Some(g) = gate {
            if self.shape(g) != [rows, 2] {
                return shape_err("st_combine", &[rows, 2], self.shape(g));
            }
        }
        let (lo, xt) = (self.value(layer_out), self.value(x));
        let d = xt.cols();
        let mut out = xt.data().to_vec();
        for (r, &m) in mask.iter().enumerate() {
            if m {
                out[r * d..(r + 1) * d].copy_from_slice(lo.row(r));
            }
        }
        let out = Tensor::from_parts(xt.shape().to_vec(), out);
        Ok(self.push(out, Op::StCombine { layer_out, x, gate, mask: mask.to_vec() }))
    }

    /// Forward value `hard`; gradient passes unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Tensor<S>, soft: Var) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return shape_err("straight_through", hard.shape(), self.shape(soft));
        }
        Ok(self.push(hard, Op::StraightThrough { soft }))
    }

    /// Mean of column `col` of a 2-D view.
    pub fn mean_column(&mut self, x: Var, col: usize) -> Result<Var> {
        let xt = self.value(x);
        if col >= xt.cols() {
            return shape_err("mean_column", xt.shape(), &[col]);
        }
        let s: S = (0..xt.rows()).map(|r| xt.row(r)[col]).sum();
        let m = s / S::of(xt.rows() as f64);
        Ok(self.push(Tensor::scalar(m), Op::MeanColumn { x, col }))
    }

    /// Causal multi-head attention for a subset of query rows.
    ///
    /// `k` and `v` hold one row per token of a `[batch, seq_len]` grid,
    /// flattened. Query row `i` belongs to token `rows[i]` and attends to every
    /// token of its own sequence at positions up to and including its own.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, rows: &[usize], seq_len: usize, n_heads: usize) -> Result<Var> {
        self.same_shape("attention", k, v)?;
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let d = kt.cols();
        if qt.cols() != d || qt.rows() != rows.len() || d % n_heads != 0 || kt.rows() % seq_len != 0 {
            return shape_err("attention", qt.shape(), kt.shape());
        }
        let mut offsets = Vec::with_capacity(rows.len() + 1);
        let mut total = 0;
        for &r in rows {
            if r >= kt.rows() {
                return Err(Error::Input(format!("query token {r} out of range")));
            }
            offsets.push(total);
            total += (r % seq_len + 1) * n_heads;
        }
        offsets.push(total);
        let mut probs = vec![S::zero(); total];
        let mut out = vec![S::zero(); rows.len() * d];
        for (i, &r) in rows.iter().enumerate() {
            let start = r - r % seq_len;
            let end = r + 1;
            kernels::attend(
                qt.row(i),
                &kt.data()[start * d..end * d],
                &vt.data()[start * d..end * d],
                n_heads,
                &mut probs[offsets[i]..offsets[i + 1]],
                &mut out[i * d..(i + 1) * d],
            );
        }
        let out = Tensor::from_parts(vec![rows.len(), d], out);
        Ok(self.push(
            out,
            Op::Attention { q, k, v, rows: rows.to_vec(), seq_len, n_heads, probs, offsets },
        ))
    }

    /// `f * gate + carry * (1 - gate)` with `gate: [N, 1]` broadcast over columns.
    pub fn highway(&mut self, f: Var, carry: Var, gate: Var) -> Result<Var> {
        self.same_shape("highway", f, carry)?;
        let rows = self.value(f).rows();
        if self.value(gate).len() != rows {
            return shape_err("highway", self.shape(f), self.shape(gate));
        }
        let (ft, ct, gt) = (self.value(f), self.value(carry), self.value(gate));
        let d = ft.cols();
        let mut out = vec![S::zero(); ft.len()];
        for r in 0..rows {
            let t = gt.data()[r];
            for j in 0..d {
                out[r * d + j] = ft.data()[r * d + j] * t + ct.data()[r * d + j] * (S::one() - t);
            }
        }
        let out = Tensor::from_parts(ft.shape().to_vec(), out);
        Ok(self.push(out, Op::Highway { f, carry, gate }))
    }

    // ---- reverse pass ----

    /// Reverse pass from a scalar `loss`, adding into retained gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Tensor(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            if self.nodes[i].retain {
                match &mut self.grads[i] {
                    Some(t) => t.data_mut().iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => self.grads[i] = Some(Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)),
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if rg(*a) {
                    let bt = kernels::transpose(tb.data(), k, n);
                    acc_owned(&mut grads[a.0], kernels::matmul(g, &bt, m, n, k));
                }
                if rg(*b) {
                    let at = kernels::transpose(ta.data(), m, k);
                    acc_owned(&mut grads[b.0], kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    acc(&mut grads[a.0], g);
                }
                if rg(*b) {
                    acc(&mut grads[b.0], g);
                }
            }
            Op::Sub { a, b } => {
                if rg(*a) {
                    acc(&mut grads[a.0], g);
                }
                if rg(*b) {
                    acc_owned(&mut grads[b.0], g.iter().map(|&x| -x).collect());
                }
            }
            Op::Mul { a, b } => {
                if rg(*a) {
                    let c: Vec<S> = g.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect();
                    acc_owned(&mut grads[a.0], c);
                }
                if rg(*b) {
                    let c: Vec<S> = g.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                    acc_owned(&mut grads[b.0], c);
                }
            }
            Op::Scale { a, c } => acc_owned(&mut grads[a.0], g.iter().map(|&x| x * *c).collect()),
            Op::AddScalar { a } | Op::Reshape { a } | Op::StraightThrough { soft: a } => acc(&mut grads[a.0], g),
            Op::Sum { a } => {
                let n = val(*a).len();
                acc_owned(&mut grads[a.0], vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = val(*a).len();
                acc_owned(&mut grads[a.0], vec![g[0] / S::of(n as f64); n]);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = val(*gain).data();
                let d = gv.len();
                let rows = xhat.len() / d;
                if rg(*x) {
                    let dn = S::of(d as f64);
                    let mut dx = vec![S::zero(); xhat.len()];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut s1 = S::zero();
                        let mut s2 = S::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            dx[r * d + j] = inv_std[r] / dn * (dn * dh - s1 - hr[j] * s2);
                        }
                    }
                    acc_owned(&mut grads[x.0], dx);
                }
                if rg(*gain) {
                    let mut dg = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    acc_owned(&mut grads[gain.0], dg);
                }
                if rg(*bias) {
                    let mut db = vec![S::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    acc_owned(&mut grads[bias.0], db);
                }
            }
            Op::Gelu { x } => {
                let c = g.iter().zip(val(*x).data()).map(|(&g, &v)| g * kernels::gelu_grad(v)).collect();
                acc_owned(&mut grads[x.0], c);
            }
            Op::Relu { x } => {
                let c = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| if v > S::zero() { g } else { S::zero() })
                    .collect();
                acc_owned(&mut grads[x.0], c);
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let c = g.iter().zip(y).map(|(&g, &s)| g * s * (S::one() - s)).collect();
                acc_owned(&mut grads[x.0], c);
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let cdim = node.value.cols();
                let mut dx = vec![S::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(cdim).zip(g.chunks(cdim)).zip(dx.chunks_mut(cdim)) {
                    let dot: S = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..cdim {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc_owned(&mut grads[x.0], dx);
            }
            Op::SigmoidPair { x } => {
                let y = node.value.data();
                let mut dx = vec![S::zero(); y.len()];
                for r in 0..y.len() / 2 {
                    let s = y[2 * r + 1];
                    dx[2 * r + 1] = (g[2 * r + 1] - g[2 * r]) * s * (S::one() - s);
                }
                acc_owned(&mut grads[x.0], dx);
            }
            Op::CrossEntropy { logits, targets, mask, count } => {
                let lt = val(*logits);
                let v = lt.cols();
                let scale = g[0] / S::of(*count as f64);
                let mut dl = vec![S::zero(); lt.len()];
                for r in 0..lt.rows() {
                    if !mask[r] {
                        continue;
                    }
                    let dr = &mut dl[r * v..(r + 1) * v];
                    kernels::softmax_row(lt.row(r), dr);
                    dr[targets[r]] -= S::one();
                    dr.iter_mut().for_each(|x| *x = *x * scale);
                }
                acc_owned(&mut grads[logits.0], dl);
            }
            Op::GatherRows { x, index } => {
                let xt = val(*x);
                let d = xt.cols();
                let mut dx = vec![S::zero(); xt.len()];
                for (i, idx) in index.iter().enumerate() {
                    if let Some(r) = *idx {
                        for j in 0..d {
                            dx[r * d + j] += g[i * d + j];
                        }
                    }
                }
                acc_owned(&mut grads[x.0], dx);
            }
            Op::ScatterRows { base, src, index } => {
                let d = node.value.cols();
                if rg(*base) {
                    let mut db = g.to_vec();
                    for r in index.iter().flatten() {
                        db[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = S::zero());
                    }
                    acc_owned(&mut grads[base.0], db);
                }
                if rg(*src) {
                    let mut ds = vec![S::zero(); index.len() * d];
                    for (i, idx) in index.iter().enumerate() {
                        if let Some(r) = *idx {
                            ds[i * d..(i + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
                        }
                    }
                    acc_owned(&mut grads[src.0], ds);
                }
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).len();
                    if rg(p) {
                        acc(&mut grads[p.0], &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SelectRows { on, off, mask } => {
                let d = node.value.cols();
                let split = |want: bool| {
                    let mut out = g.to_vec();
                    for (r, &m) in mask.iter().enumerate() {
                        if m != want {
                            out[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = S::zero());
                        }
                    }
                    out
                };
                if rg(*on) {
                    acc_owned(&mut grads[on.0], split(true));
                }
                if rg(*off) {
                    acc_owned(&mut grads[off.0], split(false));
                }
            }
            Op::ZeroRows { x, keep } => {
                let d = node.value.cols();
                let mut dx = g.to_vec();
                for (r, &k) in keep.iter().enumerate() {
                    if !k {
                        dx[r * d..(r + 1) * d].iter_mut().for_each(|v| *v = S::zero());
                    }
                }
                acc_owned(&mut grads[x.0], dx);
            }
            Op::StCombine { layer_out, x, gate, mask } => {
                let d = node.value.cols();
                let (lo, xt) = (val(*layer_out), val(*x));
                if rg(*layer_out) || rg(*x) {
                    let mut dlo = vec![S::zero(); g.len()];
                    let mut dx = vec![S::zero(); g.len()];
                    for (r, &m) in mask.iter().enumerate() {
                        let dst = if m { &mut dlo } else { &mut dx };
                        dst[r * d..(r + 1) * d].copy_from_slice(&g[r * d..(r + 1) * d]);
                    }
                    if rg(*layer_out) {
                        acc_owned(&mut grads[layer_out.0], dlo);
                    }
                    if rg(*x) {
                        acc_owned(&mut grads[x.0], dx);
                    }
                }
                if let Some(gv) = gate {
                    if rg(*gv) {
                        let mut dg = vec![S::zero(); mask.len() * 2];
                        for (r, &m) in mask.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let src = if m { lo.row(r) } else { xt.row(r) };
                            let dot: S = gr.iter().zip(src).map(|(&a, &b)| a * b).sum();
                            dg[2 * r + usize::from(m)] = dot;
                        }
                        acc_owned(&mut grads[gv.0], dg);
                    }
                }
            }
            Op::MeanColumn { x, col } => {
                let xt = val(*x);
                let c = xt.cols();
                let mut dx = vec![S::zero(); xt.len()];
                let share = g[0] / S::of(xt.rows() as f64);
                for r in 0..xt.rows() {
                    dx[r * c + col] = share;
                }
                acc_owned(&mut grads[x.0], dx);
            }
            Op::Attention { q, k, v, rows, seq_len, n_heads, probs, offsets } => {
                let (qt, kt, vt) = (val(*q), val(*k), val(*v));
                let d = kt.cols();
                let hd = d / n_heads;
                let scale = S::one() / S::of(hd as f64).sqrt();
                let mut dq = vec![S::zero(); qt.len()];
                let mut dk = vec![S::zero(); kt.len()];
                let mut dv = vec![S::zero(); vt.len()];
                for (i, &r) in rows.iter().enumerate() {
                    let start = r - r % seq_len;
                    let len = r - start + 1;
                    let p = &probs[offsets[i]..offsets[i + 1]];
                    let go = &g[i * d..(i + 1) * d];
                    let qi = qt.row(i);
                    let mut dp = vec![S::zero(); len];
                    for h in 0..*n_heads {
                        let ph = &p[h * len..(h + 1) * len];
                        let goh = &go[h * hd..(h + 1) * hd];
                        let mut dot = S::zero();
                        for j in 0..len {
                            let vj = &vt.data()[(start + j) * d + h * hd..(start + j) * d + (h + 1) * hd];
                            let mut s = S::zero();
                            for c in 0..hd {
                                s = s + goh[c] * vj[c];
                            }
                            dp[j] = s;
                            dot += ph[j] * s;
                        }
                        for j in 0..len {
                            let row = start + j;
                            let ds = ph[j] * (dp[j] - dot) * scale;
                            for c in 0..hd {
                                let col = h * hd + c;
                                dq[i * d + col] += ds * kt.data()[row * d + col];
                                dk[row * d + col] += ds * qi[col];
                                dv[row * d + col] += ph[j] * goh[c];
                            }
                        }
                    }
                }
                if rg(*q) {
                    acc_owned(&mut grads[q.0], dq);
                }
                if rg(*k) {
                    acc_owned(&mut grads[k.0], dk);
                }
                if rg(*v) {
                    acc_owned(&mut grads[v.0], dv);
                }
            }
            Op::Highway { f, carry, gate } => {
                let (ft, ct, gt) = (val(*f), val(*carry), val(*gate));
                let d = ft.cols();
                let rows = ft.rows();
                if rg(*f) {
                    let mut df = vec![S::zero(); g.len()];
                    for r in 0..rows {
                        let t = gt.data()[r];
                        for j in 0..d {
                            df[r * d + j] = g[r * d + j] * t;
                        }
                    }
                    acc_owned(&mut grads[f.0], df);
                }
                if rg(*carry) {
                    let mut dc = vec![S::zero(); g.len()];
                    for r in 0..rows {
                        let t = S::one() - gt.data()[r];
                        for j in 0..d {
                            dc[r * d + j] = g[r * d + j] * t;
                        }
                    }
                    acc_owned(&mut grads[carry.0], dc);
                }
                if rg(*gate) {
                    let mut dt = vec![S::zero(); rows];
                    for r in 0..rows {
                        let mut s = S::zero();
                        for j in 0..d {
                            s += g[r * d + j] * (ft.data()[r * d + j] - ct.data()[r * d + j]);
                        }
                        dt[r] = s;
                    }
                    acc_owned(&mut grads[gate.0], dt);
                }
            }
        }
    }
}
