//! Masked multi-head graph attention.
//!
//! One head transforms node features with a learned matrix, scores every
//! kept edge (i, j) by a LeakyReLU of a learned combination of the two
//! endpoint embeddings (source first), normalizes scores per source node
//! with a softmax restricted to that node's neighborhood, and aggregates
//! neighbor embeddings with the resulting weights. Nodes outside a
//! neighborhood are excluded from the summation itself, not zeroed after
//! the fact, so their attention values and adjoints are exactly zero.
//!
//! Hidden layers run their heads independently and concatenate the
//! activated outputs; the final layer averages head outputs before the
//! activation.

use std::sync::Arc;

use rand::distributions::{Distribution, Uniform};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::knn::SparseGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadCombine {
    /// Concatenate per-head outputs (activation applied per head first).
    Concat,
    /// Average per-head outputs, then apply the activation once.
    Average,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Identity,
}

fn apply_activation(tape: &mut Tape, x: VarId, act: Activation) -> Result<VarId> {
    match act {
        Activation::Elu => tape.elu(x),
        Activation::Identity => Ok(x),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub in_dim: usize,
    pub out_dim: usize,
    pub heads: usize,
    pub combine: HeadCombine,
    pub activation: Activation,
    pub leaky_slope: f64,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.heads == 0 {
            return Err(Error::InvalidConfig(format!(
                "layer dims and head count must be nonzero: in {}, out {}, heads {}",
                self.in_dim, self.out_dim, self.heads
            )));
        }
        if !self.leaky_slope.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "leaky slope {} not finite",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Node embedding width this layer produces.
    pub fn output_dim(&self) -> usize {
        match self.combine {
            HeadCombine::Concat => self.heads * self.out_dim,
            HeadCombine::Average => self.out_dim,
        }
    }
}

/// Learned parameters of one attention head: the feature transform `q`
/// (out_dim x in_dim) and the edge scorer `a` (2 * out_dim x 1).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub q: Tensor,
    pub a: Tensor,
}

impl AttentionHead {
    /// Uniform init on ±sqrt(6 / (fan_in + fan_out)) per tensor.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let q_bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let a_bound = (6.0 / (2 * out_dim + 1) as f64).sqrt();
        let qu = Uniform::new_inclusive(-q_bound, q_bound);
        let au = Uniform::new_inclusive(-a_bound, a_bound);
        let q_vals = (0..out_dim * in_dim).map(|_| qu.sample(rng)).collect();
        let a_vals = (0..2 * out_dim).map(|_| au.sample(rng)).collect();
        AttentionHead {
            q: Tensor::new(out_dim, in_dim, q_vals).expect("nonzero dims"),
            a: Tensor::new(2 * out_dim, 1, a_vals).expect("nonzero dims"),
        }
    }
}

/// Tape handles for one head's parameters.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub q: VarId,
    pub a: VarId,
}

/// Flattened edge list of a sparse graph. Edges are grouped by source node
/// in ascending order, destinations ascending within each group, so block
/// `offsets[i]..offsets[i+1]` holds node `i`'s neighborhood.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeIndex {
    n: usize,
    src: Arc<Vec<usize>>,
    dst: Arc<Vec<usize>>,
    offsets: Arc<Vec<usize>>,
}

impl EdgeIndex {
    pub fn from_graph(graph: &SparseGraph) -> Self {
        EdgeIndex::from_neighbor_lists(graph.neighbor_lists()).expect("validated by SparseGraph")
    }

    /// Lists must be ascending and nonempty, one per node.
    pub fn from_neighbor_lists(lists: &[Vec<usize>]) -> Result<Self> {
        let n = lists.len();
        if n == 0 {
            return Err(Error::InsufficientNodes { needed: 1, got: 0 });
        }
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        for (i, list) in lists.iter().enumerate() {
            if list.is_empty() {
                return Err(Error::Contract(format!("node {i} has an empty neighborhood")));
            }
            if !list.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Contract(format!(
                    "neighbor list of node {i} is not strictly ascending"
                )));
            }
            for &j in list {
                if j >= n {
                    return Err(Error::Contract(format!(
                        "node {i} references {j}, outside 0..{n}"
                    )));
                }
                src.push(i);
                dst.push(j);
            }
            offsets.push(src.len());
        }
        Ok(EdgeIndex {
            n,
            src: Arc::new(src),
            dst: Arc::new(dst),
            offsets: Arc::new(offsets),
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.src.len()
    }

    pub fn src(&self) -> &[usize] {
        &self.src
    }

    pub fn dst(&self) -> &[usize] {
        &self.dst
    }

    /// Block boundaries per source node; length `n + 1`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

fn check_head_shapes(tape: &Tape, h: VarId, head: &HeadVars) -> Result<(usize, usize)> {
    let (q_rows, q_cols) = tape.value(head.q).shape();
    let h_cols = tape.value(h).cols();
    if q_cols != h_cols {
        return Err(Error::Shape(format!(
            "head transform expects {q_cols} input features, node features have {h_cols}"
        )));
    }
    let a_shape = tape.value(head.a).shape();
    if a_shape != (2 * q_rows, 1) {
        return Err(Error::Shape(format!(
            "edge scorer is {}x{}, expected {}x1",
            a_shape.0,
            a_shape.1,
            2 * q_rows
        )));
    }
    Ok((q_rows, q_cols))
}

/// Transformed node embeddings `z = h q^T` (n x out_dim).
fn head_transform(tape: &mut Tape, h: VarId, head: &HeadVars) -> Result<VarId> {
    let qt = tape.transpose(head.q)?;
    tape.matmul(h, qt)
}

fn logits_from_z(
    tape: &mut Tape,
    z: VarId,
    head: &HeadVars,
    edges: &EdgeIndex,
    slope: f64,
) -> Result<VarId> {
    // a^T [z_i || z_j] = (a_src . z_i) + (a_dst . z_j), so the two dot
    // products are taken per node once and gathered per edge, instead of
    // materializing a 2 * out_dim row per edge.
    let f = tape.value(z).cols();
    let a_src = tape.gather_rows(head.a, Arc::new((0..f).collect()))?;
    let a_dst = tape.gather_rows(head.a, Arc::new((f..2 * f).collect()))?;
    let s = tape.matmul(z, a_src)?;
    let d = tape.matmul(z, a_dst)?;
    let s_e = tape.gather_rows(s, edges.src.clone())?;
    let d_e = tape.gather_rows(d, edges.dst.clone())?;
    let raw = tape.add(s_e, d_e)?;
    tape.leaky_relu(raw, slope)
}

/// Unnormalized edge scores: for each edge (i, j),
/// `LeakyReLU(a^T [q h_i || q h_j])`, source embedding first. One score per
/// edge, in edge order.
pub fn attention_logits(
    tape: &mut Tape,
    h: VarId,
    head: &HeadVars,
    edges: &EdgeIndex,
    slope: f64,
) -> Result<VarId> {
    check_node_count(tape, h, edges)?;
    check_head_shapes(tape, h, head)?;
    let z = head_transform(tape, h, head)?;
    logits_from_z(tape, z, head, edges, slope)
}

/// Attention coefficients: per-source-node softmax over that node's
/// neighborhood block. Each block sums to 1; edges never compete across
/// blocks.
pub fn masked_attention(tape: &mut Tape, logits: VarId, edges: &EdgeIndex) -> Result<VarId> {
    if tape.value(logits).shape() != (edges.edge_count(), 1) {
        return Err(Error::Shape(format!(
            "logits are {}x{}, expected {}x1",
            tape.value(logits).rows(),
            tape.value(logits).cols(),
            edges.edge_count()
        )));
    }
    tape.block_softmax(logits, edges.offsets.clone())
}

/// Neighborhood-weighted aggregation for one head:
/// `out[i] = act(sum over j in N_i of alpha_ij * q h_j)`.
pub fn aggregate(
    tape: &mut Tape,
    alpha: VarId,
    h: VarId,
    head: &HeadVars,
    edges: &EdgeIndex,
    activation: Activation,
) -> Result<VarId> {
    check_node_count(tape, h, edges)?;
    check_head_shapes(tape, h, head)?;
    let z = head_transform(tape, h, head)?;
    let agg = tape.weighted_edge_sum(alpha, z, edges.n, edges.src.clone(), edges.dst.clone())?;
    apply_activation(tape, agg, activation)
}

fn check_node_count(tape: &Tape, h: VarId, edges: &EdgeIndex) -> Result<()> {
    let rows = tape.value(h).rows();
    if rows != edges.n {
        return Err(Error::Shape(format!(
            "{rows} feature rows for a graph of {} nodes",
            edges.n
        )));
    }
    Ok(())
}

/// One full attention layer over all heads. Per-head work shares the
/// transformed embeddings between scoring and aggregation; combination
/// follows `cfg.combine` (see module docs for activation placement).
pub fn multi_head(
    tape: &mut Tape,
    h: VarId,
    heads: &[HeadVars],
    edges: &EdgeIndex,
    cfg: &LayerConfig,
) -> Result<VarId> {
    cfg.validate()?;
    if heads.len() != cfg.heads {
        return Err(Error::Shape(format!(
            "{} head parameter sets for {} heads",
            heads.len(),
            cfg.heads
        )));
    }
    check_node_count(tape, h, edges)?;
    let h_cols = tape.value(h).cols();
    if h_cols != cfg.in_dim {
        return Err(Error::Shape(format!(
            "layer expects {} input features, got {h_cols}",
            cfg.in_dim
        )));
    }
    let mut outputs = Vec::with_capacity(heads.len());
    for head in heads {
        let (q_rows, _) = check_head_shapes(tape, h, head)?;
        if q_rows != cfg.out_dim {
            return Err(Error::Shape(format!(
                "head produces {q_rows} features, layer is configured for {}",
                cfg.out_dim
            )));
        }
        let z = head_transform(tape, h, head)?;
        let logits = logits_from_z(tape, z, head, edges, cfg.leaky_slope)?;
        let alpha = tape.block_softmax(logits, edges.offsets.clone())?;
        let agg =
            tape.weighted_edge_sum(alpha, z, edges.n, edges.src.clone(), edges.dst.clone())?;
        outputs.push(agg);
    }
    match cfg.combine {
        HeadCombine::Concat => {
            let mut activated = Vec::with_capacity(outputs.len());
            for out in outputs {
                activated.push(apply_activation(tape, out, cfg.activation)?);
            }
            tape.hcat(&activated)
        }
        HeadCombine::Average => {
            let mut acc = outputs[0];
            for &out in &outputs[1..] {
                acc = tape.add(acc, out)?;
            }
            let mean = tape.scalar_mul(acc, 1.0 / outputs.len() as f64)?;
            apply_activation(tape, mean, cfg.activation)
        }
    }
}
