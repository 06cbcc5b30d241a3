//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as it executes; [`Tape::backward`]
//! walks the record once in reverse, accumulating adjoints. The op set is
//! exactly what the attention model needs (dense matmul, activations,
//! gathers, subset softmax, edge-weighted aggregation, and a clamped NLL
//! loss), nothing speculative. Values are checked for finiteness after
//! every operation so a NaN is reported at the op that produced it rather
//! than at the loss.
//!
//! [`grad_check`] validates any tape-built scalar function against central
//! finite differences, and doubles as the harness for testing the op set
//! itself.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{matmul, Tensor};

/// Handle to a value on the tape. Only tape methods create these, so an id
/// always refers to an earlier node of the same tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct VarId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Matmul(VarId, VarId),
    Transpose(VarId),
    Add(VarId, VarId),
    Mul(VarId, VarId),
    ScalarMul(VarId, f64),
    Hcat(Vec<VarId>),
    GatherRows(VarId, Arc<Vec<usize>>),
    LeakyRelu(VarId, f64),
    Elu(VarId),
    SoftmaxSubset(VarId, Arc<Vec<usize>>),
    BlockSoftmax(VarId, Arc<Vec<usize>>),
    WeightedEdgeSum {
        alpha: VarId,
        z: VarId,
        src: Arc<Vec<usize>>,
        dst: Arc<Vec<usize>>,
    },
    MeanOverRows(VarId),
    SumAll(VarId),
    NllClamped {
        probs: VarId,
        label: usize,
    },
}

struct TapeNode {
    value: Tensor,
    trainable: bool,
    op: Op,
}

/// Probabilities below this are clamped before the log in the NLL loss.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Adjoints of trainable nodes after a backward pass, indexed by [`VarId`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `id`, or `None` when the node is not trainable or the
    /// loss does not depend on it (a zero gradient).
    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, trainable: bool, what: &str) -> Result<VarId> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "{what} produced a non-finite value at tape node {}",
                self.nodes.len()
            )));
        }
        self.nodes.push(TapeNode {
            value,
            trainable,
            op,
        });
        Ok(VarId(self.nodes.len() - 1))
    }

    /// Constant input; no gradient is kept for it.
    pub fn leaf(&mut self, value: Tensor) -> Result<VarId> {
        self.push(value, Op::Leaf, false, "leaf")
    }

    /// Trainable input; `backward` will report its gradient.
    pub fn param(&mut self, value: Tensor) -> Result<VarId> {
        self.push(value, Op::Param, true, "param")
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let v = matmul(self.value(a), self.value(b))?;
        self.push(v, Op::Matmul(a, b), false, "matmul")
    }

    pub fn transpose(&mut self, a: VarId) -> Result<VarId> {
        let v = self.value(a).transposed();
        self.push(v, Op::Transpose(a), false, "transpose")
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "add {}x{} with {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let vals = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(ta.rows(), ta.cols(), vals)?;
        self.push(v, Op::Add(a, b), false, "add")
    }

    /// Elementwise (Hadamard) product of two same-shaped tensors.
    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!(
                "mul {}x{} with {}x{}",
                ta.rows(),
                ta.cols(),
                tb.rows(),
                tb.cols()
            )));
        }
        let vals = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(ta.rows(), ta.cols(), vals)?;
        self.push(v, Op::Mul(a, b), false, "mul")
    }

    pub fn scalar_mul(&mut self, a: VarId, c: f64) -> Result<VarId> {
        let ta = self.value(a);
        let vals = ta.values().iter().map(|x| x * c).collect();
        let v = Tensor::new(ta.rows(), ta.cols(), vals)?;
        self.push(v, Op::ScalarMul(a, c), false, "scalar_mul")
    }

    /// Horizontal concatenation: same row counts, columns appended in order.
    pub fn hcat(&mut self, parts: &[VarId]) -> Result<VarId> {
        if parts.is_empty() {
            return Err(Error::Shape("hcat of nothing".into()));
        }
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(Error::Shape(format!(
                    "hcat row mismatch: {} vs {rows}",
                    t.rows()
                )));
            }
            cols += t.cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let t = &self.nodes[p.0].value;
                let pc = t.cols();
                out.values_mut()[r * cols + off..r * cols + off + pc]
                    .copy_from_slice(t.row_slice(r));
                off += pc;
            }
        }
        self.push(out, Op::Hcat(parts.to_vec()), false, "hcat")
    }

    /// Row lookup: `out[r] = a[indices[r]]`. Indices may repeat; the
    /// backward pass scatter-adds.
    pub fn gather_rows(&mut self, a: VarId, indices: Arc<Vec<usize>>) -> Result<VarId> {
        let ta = self.value(a);
        if indices.is_empty() {
            return Err(Error::Shape("gather of no rows".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::Shape(format!(
                "gather index {bad} out of range for {} rows",
                ta.rows()
            )));
        }
        let cols = ta.cols();
        let mut out = Tensor::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            out.values_mut()[r * cols..(r + 1) * cols].copy_from_slice(ta.row_slice(i));
        }
        self.push(out, Op::GatherRows(a, indices), false, "gather_rows")
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> Result<VarId> {
        if !slope.is_finite() {
            return Err(Error::InvalidConfig(format!("leaky_relu slope {slope}")));
        }
        let ta = self.value(a);
        let vals = ta
            .values()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let v = Tensor::new(ta.rows(), ta.cols(), vals)?;
        self.push(v, Op::LeakyRelu(a, slope), false, "leaky_relu")
    }

    pub fn elu(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let vals = ta
            .values()
            .iter()
            .map(|&x| if x > 0.0 { x } else { x.exp() - 1.0 })
            .collect();
        let v = Tensor::new(ta.rows(), ta.cols(), vals)?;
        self.push(v, Op::Elu(a), false, "elu")
    }

    /// Softmax over a subset of a vector's entries. Entries outside the
    /// subset are exactly zero in the result, and their adjoints are exactly
    /// zero in the backward pass: excluded positions never influence the
    /// computation in either direction.
    pub fn softmax_subset(&mut self, a: VarId, subset: Arc<Vec<usize>>) -> Result<VarId> {
        let ta = self.value(a);
        if !ta.is_vector() {
            return Err(Error::Shape(format!(
                "softmax_subset needs a vector, got {}x{}",
                ta.rows(),
                ta.cols()
            )));
        }
        let len = ta.len();
        if subset.is_empty() {
            return Err(Error::Shape("softmax over empty subset".into()));
        }
        let mut seen = vec![false; len];
        for &i in subset.iter() {
            if i >= len {
                return Err(Error::Shape(format!(
                    "subset index {i} out of range for length {len}"
                )));
            }
            if seen[i] {
                return Err(Error::Shape(format!("subset index {i} repeated")));
            }
            seen[i] = true;
        }
        let mut out = Tensor::zeros(ta.rows(), ta.cols());
        softmax_indexed(ta.values(), &subset, out.values_mut());
        self.push(out, Op::SoftmaxSubset(a, subset), false, "softmax_subset")
    }

    /// Independent softmaxes over contiguous blocks of a column vector.
    /// `offsets` are block boundaries: `offsets[b]..offsets[b+1]` is block
    /// `b`; they must start at 0, end at the length, and be strictly
    /// increasing.
    pub fn block_softmax(&mut self, a: VarId, offsets: Arc<Vec<usize>>) -> Result<VarId> {
        let ta = self.value(a);
        if ta.cols() != 1 {
            return Err(Error::Shape(format!(
                "block_softmax needs a column vector, got {}x{}",
                ta.rows(),
                ta.cols()
            )));
        }
        validate_offsets(&offsets, ta.rows())?;
        let mut out = Tensor::zeros(ta.rows(), 1);
        for b in offsets.windows(2) {
            softmax_dense(&ta.values()[b[0]..b[1]], &mut out.values_mut()[b[0]..b[1]]);
        }
        self.push(out, Op::BlockSoftmax(a, offsets), false, "block_softmax")
    }

    /// Edge-weighted row aggregation: `out[src[e]] += alpha[e] * z[dst[e]]`
    /// over all edges, with `out` having `n` rows. This is one attention
    /// head's message pass in a single op.
    pub fn weighted_edge_sum(
        &mut self,
        alpha: VarId,
        z: VarId,
        n: usize,
        src: Arc<Vec<usize>>,
        dst: Arc<Vec<usize>>,
    ) -> Result<VarId> {
        let (ta, tz) = (self.value(alpha), self.value(z));
        if ta.cols() != 1 {
            return Err(Error::Shape(format!(
                "edge weights must be a column vector, got {}x{}",
                ta.rows(),
                ta.cols()
            )));
        }
        let e = ta.rows();
        if src.len() != e || dst.len() != e {
            return Err(Error::Shape(format!(
                "{e} edge weights for {} sources / {} destinations",
                src.len(),
                dst.len()
            )));
        }
        if n == 0 {
            return Err(Error::Shape("aggregation over zero rows".into()));
        }
        if let Some(&bad) = src.iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("source index {bad} out of range {n}")));
        }
        if let Some(&bad) = dst.iter().find(|&&j| j >= tz.rows()) {
            return Err(Error::Shape(format!(
                "destination index {bad} out of range {}",
                tz.rows()
            )));
        }
        let cols = tz.cols();
        let mut out = Tensor::zeros(n, cols);
        {
            let zv = tz.values();
            let av = ta.values();
            let ov = out.values_mut();
            for ei in 0..e {
                let w = av[ei];
                let zrow = &zv[dst[ei] * cols..(dst[ei] + 1) * cols];
                let orow = &mut ov[src[ei] * cols..(src[ei] + 1) * cols];
                for (o, &zx) in orow.iter_mut().zip(zrow) {
                    *o += w * zx;
                }
            }
        }
        self.push(
            out,
            Op::WeightedEdgeSum {
                alpha,
                z,
                src,
                dst,
            },
            false,
            "weighted_edge_sum",
        )
    }

    /// Column means: n x d collapses to 1 x d.
    pub fn mean_over_rows(&mut self, a: VarId) -> Result<VarId> {
        let ta = self.value(a);
        let (n, d) = ta.shape();
        let mut out = Tensor::zeros(1, d);
        for r in 0..n {
            for (o, &x) in out.values_mut().iter_mut().zip(ta.row_slice(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / n as f64;
        for o in out.values_mut() {
            *o *= inv;
        }
        self.push(out, Op::MeanOverRows(a), false, "mean_over_rows")
    }

    pub fn sum_all(&mut self, a: VarId) -> Result<VarId> {
        let s: f64 = self.value(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), false, "sum_all")
    }

    /// Negative log-likelihood of the true class:
    /// `-ln(max(probs[label], PROB_CLAMP))`. `probs` must be a vector.
    pub fn nll_clamped(&mut self, probs: VarId, label: usize) -> Result<VarId> {
        let tp = self.value(probs);
        if !tp.is_vector() {
            return Err(Error::Shape(format!(
                "nll needs a probability vector, got {}x{}",
                tp.rows(),
                tp.cols()
            )));
        }
        if label >= tp.len() {
            return Err(Error::Shape(format!(
                "label {label} out of range for {} classes",
                tp.len()
            )));
        }
        let p = tp.values()[label].max(PROB_CLAMP);
        self.push(
            Tensor::scalar(-p.ln()),
            Op::NllClamped { probs, label },
            false,
            "nll_clamped",
        )
    }

    /// Reverse pass from a scalar loss. Returns the gradients of every
    /// trainable node; adjoint buffers for intermediates are dropped as
    /// soon as they have been propagated.
    pub fn backward(&self, loss: VarId) -> Result<Gradients> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.shape() != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got {}x{}",
                loss_node.value.rows(),
                loss_node.value.cols()
            )));
        }
        let mut adjoints: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        adjoints.resize_with(loss.0 + 1, || None);
        adjoints[loss.0] = Some(Tensor::scalar(1.0));
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);

        for id in (0..=loss.0).rev() {
            let Some(g) = adjoints[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if node.trainable {
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "gradient of tape node {id} is not finite"
                    )));
                }
                grads[id] = Some(g.clone());
            }
            self.propagate(id, &node.op, &g, &mut adjoints)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(
        &self,
        adjoints: &mut [Option<Tensor>],
        target: VarId,
        update: impl FnOnce(&mut Tensor),
    ) {
        let slot = &mut adjoints[target.0];
        if slot.is_none() {
            let t = &self.nodes[target.0].value;
            *slot = Some(Tensor::zeros(t.rows(), t.cols()));
        }
        update(slot.as_mut().expect("just filled"));
    }

    fn propagate(
        &self,
        id: usize,
        op: &Op,
        g: &Tensor,
        adjoints: &mut [Option<Tensor>],
    ) -> Result<()> {
        match op {
            Op::Leaf | Op::Param => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let da = matmul_nt(g, tb);
                self.accumulate(adjoints, *a, |acc| add_into(acc, &da));
                let db = matmul_tn(ta, g);
                self.accumulate(adjoints, *b, |acc| add_into(acc, &db));
            }
            Op::Transpose(a) => {
                let gt = g.transposed();
                self.accumulate(adjoints, *a, |acc| add_into(acc, &gt));
            }
            Op::Add(a, b) => {
                self.accumulate(adjoints, *a, |acc| add_into(acc, g));
                self.accumulate(adjoints, *b, |acc| add_into(acc, g));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(adjoints, *a, |acc| {
                    for ((o, &gx), &bx) in
                        acc.values_mut().iter_mut().zip(g.values()).zip(tb.values())
                    {
                        *o += gx * bx;
                    }
                });
                self.accumulate(adjoints, *b, |acc| {
                    for ((o, &gx), &ax) in
                        acc.values_mut().iter_mut().zip(g.values()).zip(ta.values())
                    {
                        *o += gx * ax;
                    }
                });
            }
            Op::ScalarMul(a, c) => {
                let c = *c;
                self.accumulate(adjoints, *a, |acc| {
                    for (o, &gx) in acc.values_mut().iter_mut().zip(g.values()) {
                        *o += c * gx;
                    }
                });
            }
            Op::Hcat(parts) => {
                let rows = g.rows();
                let gcols = g.cols();
                let mut off = 0;
                for &p in parts {
                    let pc = self.value(p).cols();
                    self.accumulate(adjoints, p, |acc| {
                        for r in 0..rows {
                            let src = &g.values()[r * gcols + off..r * gcols + off + pc];
                            let dst = &mut acc.values_mut()[r * pc..(r + 1) * pc];
                            for (o, &gx) in dst.iter_mut().zip(src) {
                                *o += gx;
                            }
                        }
                    });
                    off += pc;
                }
            }
            Op::GatherRows(a, indices) => {
                let cols = g.cols();
                self.accumulate(adjoints, *a, |acc| {
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g.values()[r * cols..(r + 1) * cols];
                        let dst = &mut acc.values_mut()[i * cols..(i + 1) * cols];
                        for (o, &gx) in dst.iter_mut().zip(src) {
                            *o += gx;
                        }
                    }
                });
            }
            Op::LeakyRelu(a, slope) => {
                let ta = self.value(*a);
                let slope = *slope;
                self.accumulate(adjoints, *a, |acc| {
                    for ((o, &gx), &x) in
                        acc.values_mut().iter_mut().zip(g.values()).zip(ta.values())
                    {
                        *o += gx * if x > 0.0 { 1.0 } else { slope };
                    }
                });
            }
            Op::Elu(a) => {
                // For x <= 0 the output is exp(x) - 1, so the local
                // derivative is output + 1.
                let out = &self.nodes[id].value;
                self.accumulate(adjoints, *a, |acc| {
                    for ((o, &gx), &y) in
                        acc.values_mut().iter_mut().zip(g.values()).zip(out.values())
                    {
                        *o += gx * if y > 0.0 { 1.0 } else { y + 1.0 };
                    }
                });
            }
            Op::SoftmaxSubset(a, subset) => {
                let y = &self.nodes[id].value;
                self.accumulate(adjoints, *a, |acc| {
                    softmax_backward_indexed(y.values(), g.values(), subset, acc.values_mut());
                });
            }
            Op::BlockSoftmax(a, offsets) => {
                let y = &self.nodes[id].value;
                self.accumulate(adjoints, *a, |acc| {
                    for b in offsets.windows(2) {
                        softmax_backward_dense(
                            &y.values()[b[0]..b[1]],
                            &g.values()[b[0]..b[1]],
                            &mut acc.values_mut()[b[0]..b[1]],
                        );
                    }
                });
            }
            Op::WeightedEdgeSum {
                alpha,
                z,
                src,
                dst,
            } => {
                let (ta, tz) = (self.value(*alpha), self.value(*z));
                let cols = tz.cols();
                self.accumulate(adjoints, *alpha, |acc| {
                    for ei in 0..src.len() {
                        let grow = &g.values()[src[ei] * cols..(src[ei] + 1) * cols];
                        let zrow = &tz.values()[dst[ei] * cols..(dst[ei] + 1) * cols];
                        let dot: f64 = grow.iter().zip(zrow).map(|(a, b)| a * b).sum();
                        acc.values_mut()[ei] += dot;
                    }
                });
                self.accumulate(adjoints, *z, |acc| {
                    for ei in 0..src.len() {
                        let w = ta.values()[ei];
                        let grow = &g.values()[src[ei] * cols..(src[ei] + 1) * cols];
                        let zrow = &mut acc.values_mut()[dst[ei] * cols..(dst[ei] + 1) * cols];
                        for (o, &gx) in zrow.iter_mut().zip(grow) {
                            *o += w * gx;
                        }
                    }
                });
            }
            Op::MeanOverRows(a) => {
                let n = self.value(*a).rows();
                let inv = 1.0 / n as f64;
                let cols = g.cols();
                self.accumulate(adjoints, *a, |acc| {
                    for r in 0..n {
                        let dst = &mut acc.values_mut()[r * cols..(r + 1) * cols];
                        for (o, &gx) in dst.iter_mut().zip(g.values()) {
                            *o += gx * inv;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let gx = g.values()[0];
                self.accumulate(adjoints, *a, |acc| {
                    for o in acc.values_mut() {
                        *o += gx;
                    }
                });
            }
            Op::NllClamped { probs, label } => {
                let p = self.value(*probs).values()[*label];
                let gx = g.values()[0];
                // Below the clamp the loss is constant, so the gradient is
                // exactly zero there.
                if p > PROB_CLAMP {
                    self.accumulate(adjoints, *probs, |acc| {
                        acc.values_mut()[*label] += gx * (-1.0 / p);
                    });
                } else {
                    self.accumulate(adjoints, *probs, |_| {});
                }
            }
        }
        Ok(())
    }
}

fn validate_offsets(offsets: &[usize], len: usize) -> Result<()> {
    let ok = offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().expect("nonempty") == len
        && offsets.windows(2).all(|w| w[0] < w[1]);
    if ok {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "block offsets {offsets:?} do not partition 0..{len}"
        )))
    }
}

fn add_into(acc: &mut Tensor, delta: &Tensor) {
    for (o, &d) in acc.values_mut().iter_mut().zip(delta.values()) {
        *o += d;
    }
}

/// `a @ b^T` without materializing the transpose.
fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.shape();
    let n = b.rows();
    debug_assert_eq!(b.cols(), k);
    let mut out = Tensor::zeros(m, n);
    for i in 0..m {
        let arow = a.row_slice(i);
        let orow = &mut out.values_mut()[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = b.row_slice(j);
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    }
    out
}

/// `a^T @ b` without materializing the transpose.
fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = a.shape();
    let n = b.cols();
    debug_assert_eq!(b.rows(), m);
    let mut out = Tensor::zeros(k, n);
    for i in 0..m {
        let arow = a.row_slice(i);
        let brow = b.row_slice(i);
        for (p, &apx) in arow.iter().enumerate() {
            if apx == 0.0 {
                continue;
            }
            let orow = &mut out.values_mut()[p * n..(p + 1) * n];
            for (o, &bx) in orow.iter_mut().zip(brow) {
                *o += apx * bx;
            }
        }
    }
    out
}

/// Max-subtracted softmax over a dense slice.
fn softmax_dense(vals: &[f64], out: &mut [f64]) {
    let m = vals.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(vals) {
        let e = (v - m).exp();
        *o = e;
        s += e;
    }
    let inv = 1.0 / s;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn softmax_backward_dense(y: &[f64], g: &[f64], dx: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &yi), &gi) in dx.iter_mut().zip(y).zip(g) {
        *o += yi * (gi - dot);
    }
}

/// Max-subtracted softmax over selected indices; untouched positions stay
/// as they are (callers pass a zeroed buffer).
fn softmax_indexed(vals: &[f64], idx: &[usize], out: &mut [f64]) {
    let m = idx
        .iter()
        .fold(f64::NEG_INFINITY, |a, &i| a.max(vals[i]));
    let mut s = 0.0;
    for &i in idx {
        let e = (vals[i] - m).exp();
        out[i] = e;
        s += e;
    }
    let inv = 1.0 / s;
    for &i in idx {
        out[i] *= inv;
    }
}

fn softmax_backward_indexed(y: &[f64], g: &[f64], idx: &[usize], dx: &mut [f64]) {
    let dot: f64 = idx.iter().map(|&i| y[i] * g[i]).sum();
    for &i in idx {
        dx[i] += y[i] * (g[i] - dot);
    }
}

/// Largest relative error between tape gradients and central finite
/// differences of `build`, over every coordinate of every parameter.
///
/// `build` must assemble the same scalar loss every time it is called with
/// the same parameter values; this is verified by evaluating twice and
/// comparing bits, and violated determinism is an error. `epsilon` is the
/// FD step, accepted in `[1e-7, 1e-4]`. The relative error of a coordinate
/// is `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)`.
pub fn grad_check<F>(build: F, params: &[Tensor], epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if !(1e-7..=1e-4).contains(&epsilon) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step {epsilon} outside [1e-7, 1e-4]"
        )));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids = values
            .iter()
            .map(|v| tape.param(v.clone()))
            .collect::<Result<Vec<_>>>()?;
        let loss = build(&mut tape, &ids)?;
        tape.value(loss).scalar_value()
    };

    let base = eval(params)?;
    let again = eval(params)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministic);
    }

    let mut tape = Tape::new();
    let ids = params
        .iter()
        .map(|v| tape.param(v.clone()))
        .collect::<Result<Vec<_>>>()?;
    let loss = build(&mut tape, &ids)?;
    if tape.value(loss).shape() != (1, 1) {
        return Err(Error::Shape("grad_check loss must be scalar".into()));
    }
    let grads = tape.backward(loss)?;

    let mut work: Vec<Tensor> = params.to_vec();
    let mut max_rel: f64 = 0.0;
    for (pi, param) in params.iter().enumerate() {
        let zero;
        let g_ad = match grads.get(ids[pi]) {
            Some(g) => g,
            None => {
                zero = Tensor::zeros(param.rows(), param.cols());
                &zero
            }
        };
        for ci in 0..param.len() {
            let orig = param.values()[ci];
            work[pi].values_mut()[ci] = orig + epsilon;
            let f_plus = eval(&work)?;
            work[pi].values_mut()[ci] = orig - epsilon;
            let f_minus = eval(&work)?;
            work[pi].values_mut()[ci] = orig;
            let g_fd = (f_plus - f_minus) / (2.0 * epsilon);
            let g = g_ad.values()[ci];
            let rel = (g - g_fd).abs() / (g.abs() + g_fd.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::distributions::{Distribution, Uniform};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let u = Uniform::new_inclusive(-1.0, 1.0);
        let vals = (0..rows * cols).map(|_| u.sample(rng)).collect();
        Tensor::new(rows, cols, vals).unwrap()
    }

    #[test]
    fn forward_values_match_hand_results() {
        let mut tape = Tape::new();
        let a = tape
            .param(Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let b = tape
            .leaf(Tensor::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap())
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).values(), &[2.0, 1.0, 4.0, 3.0]);
        let s = tape.sum_all(c).unwrap();
        assert_eq!(tape.value(s).scalar_value().unwrap(), 10.0);
    }

    #[test]
    fn matmul_gradients_match_hand_results() {
        // loss = sum(A @ B): dA = row sums of B broadcast, dB = col sums of A.
        let mut tape = Tape::new();
        let a = tape
            .param(Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap())
            .unwrap();
        let b = tape
            .param(Tensor::new(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap())
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        let loss = tape.sum_all(c).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(
            grads.get(a).unwrap().values(),
            &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]
        );
        assert_eq!(
            grads.get(b).unwrap().values(),
            &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]
        );
    }

    #[test]
    fn non_finite_forward_is_reported_at_the_op() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::scalar(1e308)).unwrap();
        let b = tape.scalar_mul(a, 10.0);
        assert_eq!(b.unwrap_err().code(), "numeric");
    }

    #[test]
    fn leaf_rejects_nan() {
        let mut tape = Tape::new();
        assert!(tape.leaf(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn softmax_subset_zeroes_excluded_entries_exactly() {
        let mut tape = Tape::new();
        let x = tape
            .param(Tensor::row_vector(vec![5.0, 1.0, -2.0, 40.0]).unwrap())
            .unwrap();
        let subset = Arc::new(vec![0, 1, 2]);
        let y = tape.softmax_subset(x, subset).unwrap();
        let v = tape.value(y).values().to_vec();
        assert_eq!(v[3], 0.0, "excluded entry must be exactly zero");
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        // The huge excluded logit must not have influenced the rest.
        assert!(v[0] > 0.9);
        let s = tape.sum_all(y).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().values()[3], 0.0);
    }

    #[test]
    fn softmax_subset_is_stable_for_large_logits() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::row_vector(vec![1e4, 1e4 + 1.0]).unwrap())
            .unwrap();
        let y = tape.softmax_subset(x, Arc::new(vec![0, 1])).unwrap();
        let v = tape.value(y).values();
        assert!((v[0] + v[1] - 1.0).abs() < 1e-12);
        assert!(v[1] > v[0]);
    }

    #[test]
    fn block_softmax_normalizes_each_block() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(Tensor::column_vector(vec![1.0, 2.0, 3.0, -1.0, 0.0]).unwrap())
            .unwrap();
        let y = tape.block_softmax(x, Arc::new(vec![0, 3, 5])).unwrap();
        let v = tape.value(y).values();
        assert!((v[0] + v[1] + v[2] - 1.0).abs() < 1e-12);
        assert!((v[3] + v[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn block_softmax_rejects_bad_offsets() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::column_vector(vec![0.0; 4]).unwrap()).unwrap();
        for bad in [vec![0, 4, 4], vec![1, 4], vec![0, 3]] {
            assert!(tape.block_softmax(x, Arc::new(bad)).is_err());
        }
    }

    #[test]
    fn weighted_edge_sum_matches_dense_masked_product() {
        // alpha as a dense matrix A (zero off-edges): out = A @ Z.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = random_tensor(&mut rng, 3, 2);
        let src = Arc::new(vec![0, 0, 1, 2, 2]);
        let dst = Arc::new(vec![0, 2, 1, 0, 2]);
        let alpha_vals = vec![0.5, 0.5, 1.0, 0.25, 0.75];
        let mut dense = Tensor::zeros(3, 3);
        for e in 0..5 {
            dense.set(src[e], dst[e], alpha_vals[e]);
        }
        let expect = matmul(&dense, &z).unwrap();

        let mut tape = Tape::new();
        let alpha = tape
            .leaf(Tensor::column_vector(alpha_vals).unwrap())
            .unwrap();
        let zv = tape.leaf(z).unwrap();
        let out = tape.weighted_edge_sum(alpha, zv, 3, src, dst).unwrap();
        assert!(tape.value(out).max_abs_diff(&expect).unwrap() < 1e-15);
    }

    #[test]
    fn nll_matches_hand_value_and_gradient() {
        let mut tape = Tape::new();
        let p = tape
            .param(Tensor::row_vector(vec![0.2, 0.5, 0.3]).unwrap())
            .unwrap();
        let loss = tape.nll_clamped(p, 1).unwrap();
        assert!((tape.value(loss).scalar_value().unwrap() - 0.5f64.ln().abs()).abs() < 1e-15);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().values(), &[0.0, -2.0, 0.0]);
    }

    #[test]
    fn nll_clamps_tiny_probabilities() {
        let mut tape = Tape::new();
        let p = tape
            .param(Tensor::row_vector(vec![0.0, 1.0]).unwrap())
            .unwrap();
        let loss = tape.nll_clamped(p, 0).unwrap();
        let v = tape.value(loss).scalar_value().unwrap();
        assert!((v - (-PROB_CLAMP.ln())).abs() < 1e-9);
        // Clamped region has zero gradient.
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(p).unwrap().values(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(2, 2)).unwrap();
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn grad_check_validates_epsilon_domain() {
        let build = |tape: &mut Tape, ids: &[VarId]| tape.sum_all(ids[0]);
        let params = [Tensor::scalar(1.0)];
        assert!(grad_check(build, &params, 1e-3).is_err());
        assert!(grad_check(build, &params, 1e-8).is_err());
        assert!(grad_check(build, &params, 1e-5).is_ok());
    }

    #[test]
    fn grad_check_detects_nondeterminism() {
        use std::cell::Cell;
        let counter = Cell::new(0.0f64);
        let build = move |tape: &mut Tape, ids: &[VarId]| {
            counter.set(counter.get() + 1.0);
            let c = tape.leaf(Tensor::scalar(counter.get()))?;
            let x = tape.sum_all(ids[0])?;
            let prod = tape.mul(x, c)?;
            tape.sum_all(prod)
        };
        let e = grad_check(build, &[Tensor::scalar(2.0)], 1e-5).unwrap_err();
        assert_eq!(e.code(), "non-deterministic");
    }

    #[test]
    fn grad_check_passes_on_composite_expression() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = vec![
            random_tensor(&mut rng, 3, 4),
            random_tensor(&mut rng, 4, 2),
            random_tensor(&mut rng, 3, 2),
        ];
        let build = |tape: &mut Tape, ids: &[VarId]| {
            let prod = tape.matmul(ids[0], ids[1])?;
            let act = tape.elu(prod)?;
            let mixed = tape.mul(act, ids[2])?;
            let lr = tape.leaky_relu(mixed, 0.2)?;
            let m = tape.mean_over_rows(lr)?;
            tape.sum_all(m)
        };
        let err = grad_check(build, &params, 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn grad_check_covers_attention_style_graph() {
        // gather -> hcat -> matmul -> leaky_relu -> block_softmax ->
        // weighted_edge_sum -> mean: the exact op chain of one head.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = vec![random_tensor(&mut rng, 4, 3), random_tensor(&mut rng, 6, 1)];
        let src = Arc::new(vec![0, 0, 1, 1, 2, 2, 3, 3]);
        let dst = Arc::new(vec![0, 1, 1, 2, 2, 3, 3, 0]);
        let offsets = Arc::new(vec![0, 2, 4, 6, 8]);
        let build = move |tape: &mut Tape, ids: &[VarId]| {
            let z = ids[0];
            let zsrc = tape.gather_rows(z, src.clone())?;
            let zdst = tape.gather_rows(z, dst.clone())?;
            let cat = tape.hcat(&[zsrc, zdst])?;
            let raw = tape.matmul(cat, ids[1])?;
            let logits = tape.leaky_relu(raw, 0.2)?;
            let alpha = tape.block_softmax(logits, offsets.clone())?;
            let agg = tape.weighted_edge_sum(alpha, z, 4, src.clone(), dst.clone())?;
            let act = tape.elu(agg)?;
            let m = tape.mean_over_rows(act)?;
            tape.sum_all(m)
        };
        let err = grad_check(build, &params, 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gradients_match_finite_differences(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = vec![
                random_tensor(&mut rng, 2, 3),
                random_tensor(&mut rng, 3, 3),
                random_tensor(&mut rng, 2, 3),
            ];
            let build = |tape: &mut Tape, ids: &[VarId]| {
                let prod = tape.matmul(ids[0], ids[1])?;
                let t = tape.transpose(prod)?;
                let tt = tape.transpose(t)?;
                let sum = tape.add(tt, ids[2])?;
                let act = tape.leaky_relu(sum, 0.2)?;
                let sm = tape.mean_over_rows(act)?;
                tape.sum_all(sm)
            };
            let err = grad_check(build, &params, 1e-5).unwrap();
            prop_assert!(err < 1e-6, "relative error {}", err);
        }
    }
}
