//! K-nearest-neighbor sparsification of the correlation matrix.
//!
//! Each node keeps its `k` strongest outgoing correlations plus itself;
//! everything else is cut. The surviving edges are then *reweighted*: the
//! per-row scale parameters are recomputed over the selected neighbors only
//! (self excluded), so the kept weights are measured on the local
//! neighborhood's scale rather than the whole image's.

use crate::error::{Error, Result};
use crate::graph::{coord_affinity, pixel_affinity, CorrelationMatrix, Node, SCALE_FLOOR};
use crate::tensor::Tensor;

/// Candidate neighbors of `self_index` ranked by descending weight, ties
/// broken by ascending index. `self_index` itself is never a candidate.
pub fn rank_edges(weights_row: &[f64], self_index: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..weights_row.len())
        .filter(|&j| j != self_index)
        .collect();
    idx.sort_by(|&a, &b| weights_row[b].total_cmp(&weights_row[a]).then(a.cmp(&b)));
    idx
}

/// Selected neighborhoods: `N_i = {i} + top-k by rank_edges`, each list
/// sorted ascending. `k` must lie in `[1, n-1]`.
pub fn select_neighbors(w: &CorrelationMatrix, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = w.n();
    if n < 2 {
        return Err(Error::InsufficientNodes { needed: 2, got: n });
    }
    if k < 1 || k > n - 1 {
        return Err(Error::InvalidConfig(format!(
            "k must lie in [1, {}] for {n} nodes, got {k}",
            n - 1
        )));
    }
    let mut lists = Vec::with_capacity(n);
    for i in 0..n {
        let ranked = rank_edges(w.weights().row_slice(i), i);
        let mut list: Vec<usize> = ranked[..k].to_vec();
        list.push(i);
        list.sort_unstable();
        lists.push(list);
    }
    Ok(lists)
}

fn validate_lists(neighbor_lists: &[Vec<usize>], n: usize) -> Result<()> {
    if neighbor_lists.len() != n {
        return Err(Error::Contract(format!(
            "{} neighbor lists for {n} nodes",
            neighbor_lists.len()
        )));
    }
    for (i, list) in neighbor_lists.iter().enumerate() {
        if !list.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Contract(format!(
                "neighbor list of node {i} is not strictly ascending"
            )));
        }
        if list.last().is_some_and(|&j| j >= n) {
            return Err(Error::Contract(format!(
                "neighbor list of node {i} references a node outside 0..{n}"
            )));
        }
        if !list.binary_search(&i).is_ok() {
            return Err(Error::Contract(format!(
                "neighbor list of node {i} is missing the self-loop"
            )));
        }
    }
    Ok(())
}

/// Recomputes edge weights over the selected neighborhoods. Scales are the
/// mean distances to the *selected* neighbors (self excluded), floored at
/// [`SCALE_FLOOR`]; entries outside `N_i` are zero. The self-loop lands at
/// `gamma + (1 - gamma) / 2` exactly.
pub fn reweight(
    nodes: &[Node],
    neighbor_lists: &[Vec<usize>],
    gamma: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let n = nodes.len();
    validate_lists(neighbor_lists, n)?;
    let mut out = Tensor::zeros(n, n);
    for (i, list) in neighbor_lists.iter().enumerate() {
        let mut sum_d = 0.0;
        let mut sum_f = 0.0;
        let mut count = 0usize;
        for &j in list {
            if j == i {
                continue;
            }
            let ddx = nodes[i].centroid.0 - nodes[j].centroid.0;
            let ddy = nodes[i].centroid.1 - nodes[j].centroid.1;
            sum_d += (ddx * ddx + ddy * ddy).sqrt();
            sum_f += (nodes[i].mean_intensity - nodes[j].mean_intensity).abs();
            count += 1;
        }
        if count == 0 {
            return Err(Error::Contract(format!(
                "node {i} has no neighbors besides itself"
            )));
        }
        let dx = (sum_d / count as f64).max(SCALE_FLOOR);
        let df = (sum_f / count as f64).max(SCALE_FLOOR);
        for &j in list {
            let c = coord_affinity(nodes[i].centroid, nodes[j].centroid, dx);
            let p = pixel_affinity(nodes[i].mean_intensity, nodes[j].mean_intensity, df);
            out.set(i, j, gamma * c + (1.0 - gamma) * p);
        }
    }
    if !out.is_finite() {
        return Err(Error::Numeric("reweighted matrix not finite".into()));
    }
    Ok(out)
}

/// 0/1 mask with `mask[i][j] = 1` exactly when `j` is in `N_i`.
pub fn binary_mask(neighbor_lists: &[Vec<usize>], n: usize) -> Result<Tensor> {
    validate_lists(neighbor_lists, n)?;
    let mut mask = Tensor::zeros(n, n);
    for (i, list) in neighbor_lists.iter().enumerate() {
        for &j in list {
            mask.set(i, j, 1.0);
        }
    }
    Ok(mask)
}

/// Sparsified graph: neighborhoods, reweighted adjacency, and binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n: usize,
    k: usize,
    gamma: f64,
    neighbor_lists: Vec<Vec<usize>>,
    weights: Tensor,
    mask: Tensor,
}

impl SparseGraph {
    /// Assembles and validates a graph from parts. Used by the builder and
    /// by the cache loader; enforces every structural invariant.
    pub fn from_parts(
        k: usize,
        gamma: f64,
        neighbor_lists: Vec<Vec<usize>>,
        weights: Tensor,
    ) -> Result<Self> {
        let n = neighbor_lists.len();
        if n < 2 {
            return Err(Error::InsufficientNodes { needed: 2, got: n });
        }
        if k < 1 || k > n - 1 {
            return Err(Error::InvalidConfig(format!(
                "k must lie in [1, {}] for {n} nodes, got {k}",
                n - 1
            )));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in [0, 1], got {gamma}"
            )));
        }
        validate_lists(&neighbor_lists, n)?;
        let expected = k.min(n - 1) + 1;
        for (i, list) in neighbor_lists.iter().enumerate() {
            if list.len() != expected {
                return Err(Error::Contract(format!(
                    "node {i} has {} neighbors, expected {expected}",
                    list.len()
                )));
            }
        }
        if weights.shape() != (n, n) {
            return Err(Error::Shape(format!(
                "weights are {}x{}, expected {n}x{n}",
                weights.rows(),
                weights.cols()
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let v = weights.get(i, j);
                let selected = neighbor_lists[i].binary_search(&j).is_ok();
                if selected && !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Contract(format!(
                        "selected edge ({i}, {j}) has non-positive weight {v}"
                    )));
                }
                if !selected && v != 0.0 {
                    return Err(Error::Contract(format!(
                        "unselected edge ({i}, {j}) has weight {v}, expected 0"
                    )));
                }
            }
        }
        let mask = binary_mask(&neighbor_lists, n)?;
        Ok(SparseGraph {
            n,
            k,
            gamma,
            neighbor_lists,
            weights,
            mask,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Neighborhood of node `i`, ascending, self included.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_lists[i]
    }

    pub fn neighbor_lists(&self) -> &[Vec<usize>] {
        &self.neighbor_lists
    }

    /// Reweighted adjacency matrix; zero outside the neighborhoods.
    pub fn adjacency(&self) -> &Tensor {
        &self.weights
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    /// Directed edges including self-loops: `n * (min(k, n-1) + 1)`.
    pub fn edge_count(&self) -> usize {
        self.neighbor_lists.iter().map(Vec::len).sum()
    }

    /// Kept fraction of each row: `(min(k, n-1) + 1) / n`.
    pub fn row_density(&self) -> f64 {
        (self.k.min(self.n - 1) + 1) as f64 / self.n as f64
    }
}

/// Full sparsification pipeline: select, reweight, mask, validate.
pub fn build_sparse_graph(nodes: &[Node], w: &CorrelationMatrix, k: usize) -> Result<SparseGraph> {
    if nodes.len() != w.n() {
        return Err(Error::Contract(format!(
            "{} nodes but correlation matrix is {}x{}",
            nodes.len(),
            w.n(),
            w.n()
        )));
    }
    let lists = select_neighbors(w, k)?;
    let weights = reweight(nodes, &lists, w.gamma())?;
    SparseGraph::from_parts(k, w.gamma(), lists, weights)
}
