//! Operation recording and reverse-mode gradient propagation.
//!
//! A [`Tape`] owns every value produced during one forward pass. Each
//! operation appends a node holding its output and enough context to
//! compute input gradients; [`Tape::backward`] walks the nodes in reverse
//! recording order. Values are reference counted so parameter tensors can
//! be placed on a tape without copying.

use std::ops::Range;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

pub(crate) enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Arc<Tensor<F>>),
    Scale(Var, F),
    Act(Var, Activation),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<Option<usize>>),
    ScatterRows(Var, Var, Vec<usize>),
    SegmentSum(Var, Vec<Range<usize>>),
    SegmentMean(Var, Vec<Range<usize>>),
    SegmentMax(Var, Vec<usize>),
    Softmax(Var),
    SegmentSoftmax(Var, Vec<Range<usize>>),
    BlockSoftmax(Var, usize),
    Transpose(Var),
    SumAll(Var),
    SoftmaxCrossEntropy(Var, Arc<Tensor<F>>, Arc<Tensor<F>>),
}

struct Node<F> {
    value: Arc<Tensor<F>>,
    op: Op<F>,
    requires_grad: bool,
    tag: Option<usize>,
}

/// Records a forward computation for later differentiation.
///
/// Confined to one thread; build a fresh tape for each forward pass.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    // persistent gradient slots of leaf nodes; accumulate across backward calls
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_matrix<F: Scalar>(op: &'static str, a: &Tensor<F>, b: &Tensor<F>) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(TensorError::dims(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn check_ranges(op: &str, ranges: &[Range<usize>], rows: usize) -> Result<()> {
    for r in ranges {
        if r.start > r.end || r.end > rows {
            return Err(TensorError::Argument(format!(
                "{op}: segment {r:?} outside {rows} rows"
            )));
        }
    }
    Ok(())
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        #[cfg(debug_assertions)]
        self.debug_check_finite(&value, &op);
        self.push_arc(Arc::new(value), op, requires_grad, None)
    }

    fn push_arc(
        &mut self,
        value: Arc<Tensor<F>>,
        op: Op<F>,
        requires_grad: bool,
        tag: Option<usize>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            tag,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    #[cfg(debug_assertions)]
    fn debug_check_finite(&self, value: &Tensor<F>, op: &Op<F>) {
        if value.is_finite() {
            return;
        }
        let inputs_finite = op_inputs(op).iter().all(|v| self.value(*v).is_finite());
        assert!(
            !inputs_finite,
            "non-finite output from finite inputs at node {}",
            self.nodes.len()
        );
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push_arc(Arc::new(value), Op::Leaf, requires_grad, None)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    /// Records a shared tensor (typically a model parameter) tagged with an
    /// external identifier, so its gradient can be collected after
    /// [`backward`](Self::backward).
    pub fn param(&mut self, value: Arc<Tensor<F>>, tag: usize, requires_grad: bool) -> Var {
        self.push_arc(value, Op::Leaf, requires_grad, Some(tag))
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Gradients of tagged leaves, in recording order.
    pub fn tagged_grads(&self) -> impl Iterator<Item = (usize, &Tensor<F>)> {
        self.nodes
            .iter()
            .zip(&self.grads)
            .filter_map(|(n, g)| Some((n.tag?, g.as_ref()?)))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if k != bv.rows() {
            return Err(TensorError::dims("matmul", av.shape(), bv.shape()));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            av.data(),
            false,
            bv.data(),
            false,
            F::zero(),
            &mut out,
        );
        let t = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let c = xv.cols();
        if bv.len() != c {
            return Err(TensorError::dims("add_bias", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            out.row_mut(r)
                .iter_mut()
                .zip(bv.data())
                .for_each(|(o, &bb)| *o = *o + bb);
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), rg))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        op: Op<F>,
        f: fn(F, F) -> F,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_matrix(name, av, bv)?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise product with a constant tensor (no gradient to `c`).
    pub fn mul_const(&mut self, x: Var, c: Arc<Tensor<F>>) -> Result<Var> {
        let xv = self.value(x);
        same_matrix("mul_const", xv, &c)?;
        let data = xv
            .data()
            .iter()
            .zip(c.data())
            .map(|(&a, &b)| a * b)
            .collect();
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::MulConst(x, c), rg))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x).map(|v| match kind {
            Activation::Sigmoid => sigmoid(v),
            Activation::Tanh => v.tanh(),
            // NaN passes through so divergence stays visible downstream
            Activation::Relu => {
                if v < F::zero() {
                    F::zero()
                } else {
                    v
                }
            }
        });
        let rg = self.rg(&[x]);
        self.push(t, Op::Act(x, kind), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Argument("concat of nothing".into()))?;
        let rows = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(TensorError::dims(
                    "concat_cols",
                    self.value(*first).shape(),
                    v.shape(),
                ));
            }
            total += v.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Argument("concat of nothing".into()))?;
        let cols = self.value(*first).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = self.value(*p);
            if v.cols() != cols {
                return Err(TensorError::dims(
                    "concat_rows",
                    self.value(*first).shape(),
                    v.shape(),
                ));
            }
            rows += v.rows();
            out.extend_from_slice(v.data());
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let rg = self.rg(parts);
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xv = self.value(x);
        if start + width > xv.cols() {
            return Err(TensorError::Argument(format!(
                "slice {start}..{} of {} columns",
                start + width,
                xv.cols()
            )));
        }
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..start + width]);
        }
        let t = Tensor::new(vec![rows, width], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SliceCols(x, start), rg))
    }

    /// Selects rows by index; `None` yields a zero row.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<Option<usize>>) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = (xv.rows(), xv.cols());
        let mut out = vec![F::zero(); idx.len() * cols];
        for (o, i) in idx.iter().enumerate() {
            if let Some(i) = *i {
                if i >= rows {
                    return Err(TensorError::Argument(format!("row {i} out of {rows}")));
                }
                out[o * cols..(o + 1) * cols].copy_from_slice(xv.row(i));
            }
        }
        let t = Tensor::new(vec![idx.len(), cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::GatherRows(x, idx), rg))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids.iter().map(|&i| Some(i)).collect())
    }

    /// Copy of `base` with rows `idx[j]` replaced by row `j` of `src`.
    /// Indices must be distinct.
    pub fn scatter_rows(&mut self, base: Var, idx: Vec<usize>, src: Var) -> Result<Var> {
        let (bv, sv) = (self.value(base), self.value(src));
        if bv.cols() != sv.cols() || sv.rows() != idx.len() {
            return Err(TensorError::dims("scatter_rows", bv.shape(), sv.shape()));
        }
        let mut seen = vec![false; bv.rows()];
        let mut out = bv.clone();
        for (j, &i) in idx.iter().enumerate() {
            if i >= seen.len() || seen[i] {
                return Err(TensorError::Argument(format!(
                    "scatter index {i} invalid or repeated"
                )));
            }
            seen[i] = true;
            out.row_mut(i).copy_from_slice(sv.row(j));
        }
        let rg = self.rg(&[base, src]);
        Ok(self.push(out, Op::ScatterRows(base, src, idx), rg))
    }

    pub fn segment_sum(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let xv = self.value(x);
        check_ranges("segment_sum", &segments, xv.rows())?;
        let cols = xv.cols();
        let mut out = vec![F::zero(); segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            let o = &mut out[s * cols..(s + 1) * cols];
            for r in seg.clone() {
                o.iter_mut().zip(xv.row(r)).for_each(|(a, &b)| *a = *a + b);
            }
        }
        let t = Tensor::new(vec![segments.len(), cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SegmentSum(x, segments), rg))
    }

    /// Row mean within each segment; empty segments are rejected.
    pub fn segment_mean(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let xv = self.value(x);
        check_ranges("segment_mean", &segments, xv.rows())?;
        if segments.iter().any(|s| s.is_empty()) {
            return Err(TensorError::Argument("mean over an empty segment".into()));
        }
        let cols = xv.cols();
        let mut out = vec![F::zero(); segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            let o = &mut out[s * cols..(s + 1) * cols];
            for r in seg.clone() {
                o.iter_mut().zip(xv.row(r)).for_each(|(a, &b)| *a = *a + b);
            }
            let inv = F::one() / F::from_usize(seg.len()).unwrap();
            o.iter_mut().for_each(|a| *a = *a * inv);
        }
        let t = Tensor::new(vec![segments.len(), cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SegmentMean(x, segments), rg))
    }

    /// Columnwise max within each segment; ties route gradient to the first row.
    pub fn segment_max(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let xv = self.value(x);
        check_ranges("segment_max", &segments, xv.rows())?;
        if segments.iter().any(|s| s.is_empty()) {
            return Err(TensorError::Argument("max over an empty segment".into()));
        }
        let cols = xv.cols();
        let mut out = vec![F::zero(); segments.len() * cols];
        let mut arg = vec![0usize; segments.len() * cols];
        for (s, seg) in segments.iter().enumerate() {
            for c in 0..cols {
                let mut best = seg.start;
                let mut bv = xv.get(best, c);
                for r in seg.start + 1..seg.end {
                    let v = xv.get(r, c);
                    if v > bv || (v.is_nan() && !bv.is_nan()) {
                        bv = v;
                        best = r;
                    }
                }
                out[s * cols + c] = bv;
                arg[s * cols + c] = best;
            }
        }
        let t = Tensor::new(vec![segments.len(), cols], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::SegmentMax(x, arg), rg))
    }

    /// Row-wise softmax, stabilized by max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    /// Softmax along `axis` of a matrix: 1 (or -1) normalizes each row, 0 each column.
    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        let rank = self.value(x).shape().len();
        match (rank, axis) {
            (1, 0) | (1, -1) | (2, 1) | (2, -1) => Ok(self.softmax_rows(x)),
            (2, 0) => {
                let rows = self.value(x).rows();
                self.segment_softmax(x, vec![0..rows])
            }
            _ => Err(TensorError::Argument(format!(
                "softmax axis {axis} invalid for rank {rank}"
            ))),
        }
    }

    /// Softmax down each column, separately within each row segment.
    pub fn segment_softmax(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let xv = self.value(x);
        check_ranges("segment_softmax", &segments, xv.rows())?;
        let cols = xv.cols();
        let mut out = xv.clone();
        let mut buf = Vec::new();
        for seg in &segments {
            for c in 0..cols {
                buf.clear();
                buf.extend(seg.clone().map(|r| xv.get(r, c)));
                softmax_in_place(&mut buf);
                for (k, r) in seg.clone().enumerate() {
                    out.data_mut()[r * cols + c] = buf[k];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SegmentSoftmax(x, segments), rg))
    }

    /// Splits each row into `blocks` equal-width blocks and normalizes
    /// across blocks at every within-block coordinate.
    pub fn block_softmax(&mut self, x: Var, blocks: usize) -> Result<Var> {
        let xv = self.value(x);
        let cols = xv.cols();
        if blocks == 0 || !cols.is_multiple_of(blocks) {
            return Err(TensorError::Argument(format!(
                "{cols} columns do not split into {blocks} blocks"
            )));
        }
        let w = cols / blocks;
        let mut out = xv.clone();
        let mut buf = vec![F::zero(); blocks];
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for j in 0..w {
                for (b, slot) in buf.iter_mut().enumerate() {
                    *slot = row[b * w + j];
                }
                softmax_in_place(&mut buf);
                for (b, &v) in buf.iter().enumerate() {
                    row[b * w + j] = v;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::BlockSoftmax(x, blocks), rg))
    }

    /// Jointly normalizes a group of same-shaped gate tensors so that,
    /// at every coordinate, the group's values sum to one.
    pub fn group_softmax(&mut self, gates: &[Var]) -> Result<Vec<Var>> {
        let first = gates
            .first()
            .ok_or_else(|| TensorError::Argument("group_softmax of an empty gate list".into()))?;
        let shape = self.value(*first).shape().to_vec();
        for g in gates {
            if self.value(*g).shape() != shape.as_slice() {
                return Err(TensorError::dims(
                    "group_softmax",
                    &shape,
                    self.value(*g).shape(),
                ));
            }
        }
        let w = self.value(*first).cols();
        let joined = self.concat_cols(gates)?;
        let normed = self.block_softmax(joined, gates.len())?;
        (0..gates.len())
            .map(|k| self.slice_cols(normed, k * w, w))
            .collect()
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let t = self.value(x).transpose();
        let rg = self.rg(&[x]);
        self.push(t, Op::Transpose(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::vector(&[s]), Op::SumAll(x), rg)
    }

    /// Max over all rows.
    pub fn max_pool(&mut self, x: Var) -> Result<Var> {
        let rows = self.value(x).rows();
        self.segment_max(x, vec![0..rows])
    }

    /// Mean over the rows whose mask entry is true.
    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let rows = self.value(x).rows();
        if mask.len() != rows {
            return Err(TensorError::Argument(format!(
                "mask of length {} for {rows} rows",
                mask.len()
            )));
        }
        let keep: Vec<Option<usize>> = (0..rows).filter(|&r| mask[r]).map(Some).collect();
        if keep.is_empty() {
            return Err(TensorError::Argument(
                "pooling over a fully masked input".into(),
            ));
        }
        let n = keep.len();
        let kept = self.gather_rows(x, keep)?;
        self.segment_mean(kept, vec![0..n])
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)`.
    /// Identity when not training or when `rate` is zero.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        rng: &mut R,
        training: bool,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Argument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - rate));
        let shape = self.value(x).shape().to_vec();
        let n = self.value(x).len();
        let mask = (0..n)
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let mask = Arc::new(Tensor::new(shape, mask)?);
        self.mul_const(x, mask)
    }

    /// Mean cross-entropy of row-wise softmax over `logits` against gold
    /// labels, with optional uniform label smoothing.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        gold: &[usize],
        smoothing: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (rows, classes) = (lv.rows(), lv.cols());
        if gold.len() != rows {
            return Err(TensorError::Argument(format!(
                "{} labels for {rows} rows",
                gold.len()
            )));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(TensorError::Argument(format!(
                "smoothing {smoothing} outside [0, 1)"
            )));
        }
        let mut probs = lv.clone();
        let mut target = Tensor::zeros(&[rows, classes]);
        let floor = F::from_f64_lossy(1e-12_f64.ln());
        let mut total = F::zero();
        for (r, &g) in gold.iter().enumerate() {
            if g >= classes {
                return Err(TensorError::Argument(format!(
                    "label {g} outside {classes} classes"
                )));
            }
            let t = target.row_mut(r);
            smoothed_target(t, g, smoothing);
            let row = lv.row(r);
            let lse = log_sum_exp(row);
            let mut loss = F::zero();
            for c in 0..classes {
                let logp = row[c] - lse;
                let logp = if logp < floor { floor } else { logp };
                loss = loss - t[c] * logp;
            }
            total = total + loss;
            softmax_in_place(probs.row_mut(r));
        }
        let mean = total / F::from_usize(rows.max(1)).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::vector(&[mean]),
            Op::SoftmaxCrossEntropy(logits, Arc::new(probs), Arc::new(target)),
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Propagates gradients from a scalar `loss` to every leaf that
    /// requires them. Leaf gradients accumulate across calls until
    /// [`zero_grads`](Self::zero_grads).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Argument(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut tmp: Vec<Option<Tensor<F>>> = (0..=loss.0).map(|_| None).collect();
        tmp[loss.0] = Some(Tensor::full(self.value(loss).shape(), F::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = tmp[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.backward_node(i, &g, &mut tmp);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, tmp: &mut [Option<Tensor<F>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, grad: Tensor<F>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut tmp[v.0] {
                Some(acc) => acc.add_assign(&grad),
                slot @ None => *slot = Some(grad),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                if self.requires_grad(*a) {
                    let mut ga = vec![F::zero(); m * k];
                    F::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        false,
                        bv.data(),
                        true,
                        F::zero(),
                        &mut ga,
                    );
                    send(*a, Tensor::new(av.shape().to_vec(), ga).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![F::zero(); k * n];
                    F::gemm(
                        k,
                        m,
                        n,
                        av.data(),
                        true,
                        g.data(),
                        false,
                        F::zero(),
                        &mut gb,
                    );
                    send(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                if self.requires_grad(*b) {
                    let bv = self.value(*b);
                    let mut gb = vec![F::zero(); bv.len()];
                    for r in 0..g.rows() {
                        gb.iter_mut().zip(g.row(r)).for_each(|(a, &v)| *a = *a + v);
                    }
                    send(*b, Tensor::new(bv.shape().to_vec(), gb).unwrap());
                }
                send(*x, g.clone());
            }
            Op::Add(a, b) => {
                send(*a, reshaped(g, self.value(*a)));
                send(*b, reshaped(g, self.value(*b)));
            }
            Op::Sub(a, b) => {
                send(*a, reshaped(g, self.value(*a)));
                send(*b, reshaped(&g.map(|v| -v), self.value(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    send(*a, zip_map(g, bv, av.shape(), |x, y| x * y));
                }
                if self.requires_grad(*b) {
                    send(*b, zip_map(g, av, bv.shape(), |x, y| x * y));
                }
            }
            Op::MulConst(x, c) => {
                send(*x, zip_map(g, c, self.value(*x).shape(), |a, b| a * b));
            }
            Op::Scale(x, s) => {
                let s = *s;
                send(*x, g.map(|v| v * s));
            }
            Op::Act(x, kind) => {
                let grad = match kind {
                    Activation::Sigmoid => {
                        zip_map(g, out, out.shape(), |g, y| g * y * (F::one() - y))
                    }
                    Activation::Tanh => zip_map(g, out, out.shape(), |g, y| g * (F::one() - y * y)),
                    Activation::Relu => zip_map(g, self.value(*x), out.shape(), |g, v| {
                        if v > F::zero() {
                            g
                        } else {
                            F::zero()
                        }
                    }),
                };
                send(*x, grad);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let w = pv.cols();
                    if self.requires_grad(*p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..g.rows() {
                            d.extend_from_slice(&g.row(r)[start..start + w]);
                        }
                        send(*p, Tensor::new(pv.shape().to_vec(), d).unwrap());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let pv = self.value(*p);
                    let n = pv.len();
                    if self.requires_grad(*p) {
                        let d = g.data()[start..start + n].to_vec();
                        send(*p, Tensor::new(pv.shape().to_vec(), d).unwrap());
                    }
                    start += n;
                }
            }
            Op::SliceCols(x, start) => {
                let xv = self.value(*x);
                let (cols, w) = (xv.cols(), g.cols());
                let mut d = Tensor::zeros(xv.shape());
                for r in 0..g.rows() {
                    d.data_mut()[r * cols + start..r * cols + start + w].copy_from_slice(g.row(r));
                }
                send(*x, d);
            }
            Op::GatherRows(x, idx) => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (o, i) in idx.iter().enumerate() {
                    if let Some(i) = *i {
                        d.row_mut(i)
                            .iter_mut()
                            .zip(g.row(o))
                            .for_each(|(a, &v)| *a = *a + v);
                    }
                }
                send(*x, d);
            }
            Op::ScatterRows(base, src, idx) => {
                if self.requires_grad(*base) {
                    let mut d = reshaped(g, self.value(*base));
                    for &i in idx {
                        d.row_mut(i).fill(F::zero());
                    }
                    send(*base, d);
                }
                if self.requires_grad(*src) {
                    let sv = self.value(*src);
                    let mut d = Vec::with_capacity(sv.len());
                    for &i in idx {
                        d.extend_from_slice(g.row(i));
                    }
                    send(*src, Tensor::new(sv.shape().to_vec(), d).unwrap());
                }
            }
            Op::SegmentSum(x, segs) | Op::SegmentMean(x, segs) => {
                let mean = matches!(node.op, Op::SegmentMean(..));
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (s, seg) in segs.iter().enumerate() {
                    let scale = if mean {
                        F::one() / F::from_usize(seg.len()).unwrap()
                    } else {
                        F::one()
                    };
                    for r in seg.clone() {
                        d.row_mut(r)
                            .iter_mut()
                            .zip(g.row(s))
                            .for_each(|(a, &v)| *a = *a + v * scale);
                    }
                }
                send(*x, d);
            }
            Op::SegmentMax(x, arg) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut d = Tensor::zeros(xv.shape());
                for (k, &r) in arg.iter().enumerate() {
                    let c = k % cols;
                    let slot = &mut d.data_mut()[r * cols + c];
                    *slot = *slot + g.data()[k];
                }
                send(*x, d);
            }
            Op::Softmax(x) => {
                let mut d = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dot: F = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.row_mut(r)
                        .iter_mut()
                        .zip(y.iter().zip(gr))
                        .for_each(|(o, (&yy, &gg))| *o = yy * (gg - dot));
                }
                send(*x, d);
            }
            Op::SegmentSoftmax(x, segs) => {
                let cols = out.cols();
                let mut d = Tensor::zeros(out.shape());
                for seg in segs {
                    for c in 0..cols {
                        let dot: F = seg.clone().map(|r| out.get(r, c) * g.get(r, c)).sum();
                        for r in seg.clone() {
                            d.data_mut()[r * cols + c] = out.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                }
                send(*x, d);
            }
            Op::BlockSoftmax(x, blocks) => {
                let w = out.cols() / blocks;
                let mut d = Tensor::zeros(out.shape());
                for r in 0..out.rows() {
                    let (y, gr) = (out.row(r), g.row(r));
                    let dr = d.row_mut(r);
                    for j in 0..w {
                        let dot: F = (0..*blocks).map(|b| y[b * w + j] * gr[b * w + j]).sum();
                        for b in 0..*blocks {
                            let k = b * w + j;
                            dr[k] = y[k] * (gr[k] - dot);
                        }
                    }
                }
                send(*x, d);
            }
            Op::Transpose(x) => {
                let xv = self.value(*x);
                send(*x, reshaped(&g.transpose(), xv));
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                send(*x, Tensor::full(xv.shape(), g.data()[0]));
            }
            Op::SoftmaxCrossEntropy(x, probs, target) => {
                let rows = probs.rows().max(1);
                let scale = g.data()[0] / F::from_usize(rows).unwrap();
                let d = zip_map(probs, target, probs.shape(), |p, t| (p - t) * scale);
                send(*x, d);
            }
        }
    }
}

#[cfg(debug_assertions)]
fn op_inputs<F>(op: &Op<F>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b) | Op::AddBias(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            vec![*a, *b]
        }
        Op::ScatterRows(a, b, _) => vec![*a, *b],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
        Op::MulConst(x, _)
        | Op::Scale(x, _)
        | Op::Act(x, _)
        | Op::SliceCols(x, _)
        | Op::GatherRows(x, _)
        | Op::SegmentSum(x, _)
        | Op::SegmentMean(x, _)
        | Op::SegmentMax(x, _)
        | Op::Softmax(x)
        | Op::SegmentSoftmax(x, _)
        | Op::BlockSoftmax(x, _)
        | Op::Transpose(x)
        | Op::SumAll(x)
        | Op::SoftmaxCrossEntropy(x, _, _) => vec![*x],
    }
}

fn reshaped<F: Scalar>(g: &Tensor<F>, like: &Tensor<F>) -> Tensor<F> {
    Tensor::new(like.shape().to_vec(), g.data().to_vec()).expect("gradient matches input size")
}

fn zip_map<F: Scalar>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    shape: &[usize],
    f: impl Fn(F, F) -> F,
) -> Tensor<F> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("elementwise sizes agree")
}

pub(crate) fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

pub(crate) fn log_sum_exp<F: Scalar>(xs: &[F]) -> F {
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<F>().ln()
}

/// Stable in-place softmax of a slice.
pub fn softmax_in_place<F: Scalar>(xs: &mut [F]) {
    let m = xs.iter().copied().fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        total = total + *x;
    }
    for x in xs.iter_mut() {
        *x = *x / total;
    }
}

/// `(1 - eps)` on the gold class plus `eps / classes` everywhere.
pub fn smoothed_target<F: Scalar>(out: &mut [F], gold: usize, eps: f64) {
    let k = out.len() as f64;
    for (c, t) in out.iter_mut().enumerate() {
        let v = eps / k + if c == gold { 1.0 - eps } else { 0.0 };
        *t = F::from_f64_lossy(v);
    }
}
