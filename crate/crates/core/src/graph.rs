//! Image-to-graph conversion and the joint correlation matrix.
//!
//! An image becomes a set of nodes (grid patches by default, k-means
//! superpixels optionally). Every ordered node pair gets a correlation
//! weight mixing two terms:
//!
//! * a coordinate affinity `exp(-|p_i - p_j|^2 / dx_i^2)` that decays with
//!   distance between normalized centroids, and
//! * a pixel affinity `1 / (1 + exp(-(|f_i - f_j| / df_i^2)^2))` that grows
//!   from 0.5 toward 1 as mean intensities diverge,
//!
//! blended as `gamma * coord + (1 - gamma) * pixel`. The scale parameters
//! `dx_i`, `df_i` are per-row means of the distances from node `i` to every
//! other node, so the matrix is directed: row `i` is measured on node `i`'s
//! own scale.

use crate::error::{Error, Result};
use crate::image::SonarImage;
use crate::tensor::Tensor;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Features per node: mean intensity, intensity std, normalized centroid x, y.
pub const FEATURE_DIM: usize = 4;

/// Scale parameters are floored here so degenerate node sets (all nodes at
/// one point, or all with equal intensity) stay finite instead of dividing
/// by zero.
pub const SCALE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    /// Normalized centroid in [0, 1]^2, pixel-center convention.
    pub centroid: (f64, f64),
    /// Mean intensity of the node's pixels; drives the pixel affinity.
    pub mean_intensity: f64,
    /// `[mean, std, centroid_x, centroid_y]`, see [`FEATURE_DIM`].
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeSet {
    nodes: Vec<Node>,
    source_width: usize,
    source_height: usize,
}

impl NodeSet {
    pub fn new(nodes: Vec<Node>, source_width: usize, source_height: usize) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::InsufficientNodes { needed: 1, got: 0 });
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.id != i {
                return Err(Error::Contract(format!(
                    "node ids must be contiguous from zero, slot {i} holds id {}",
                    n.id
                )));
            }
            if n.features.len() != FEATURE_DIM {
                return Err(Error::Contract(format!(
                    "node {i} has {} features, expected {FEATURE_DIM}",
                    n.features.len()
                )));
            }
        }
        Ok(NodeSet {
            nodes,
            source_width,
            source_height,
        })
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn source_dims(&self) -> (usize, usize) {
        (self.source_width, self.source_height)
    }

    /// n x FEATURE_DIM matrix of node features, the model input.
    pub fn feature_matrix(&self) -> Tensor {
        let mut t = Tensor::zeros(self.nodes.len(), FEATURE_DIM);
        for (i, n) in self.nodes.iter().enumerate() {
            for (j, &f) in n.features.iter().enumerate() {
                t.set(i, j, f);
            }
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeScheme {
    /// Regular grid of `cols x rows` patches; patch boundaries at
    /// `floor(index * extent / count)`. Nodes are emitted row-major.
    Grid { cols: usize, rows: usize },
    /// Seeded k-means over per-pixel `(intensity, x, y)` triples with
    /// normalized coordinates. Runs a fixed number of Lloyd iterations;
    /// clusters left empty by the final assignment are dropped and the
    /// survivors renumbered compactly.
    Superpixels {
        count: usize,
        iterations: usize,
        seed: u64,
    },
}

/// Maps pixel coordinates onto the unit square.
pub fn normalize_coords(x: f64, y: f64, x_max: f64, y_max: f64) -> Result<(f64, f64)> {
    if !(x_max > 0.0) {
        return Err(Error::DegenerateAxis(format!("x_max = {x_max}")));
    }
    if !(y_max > 0.0) {
        return Err(Error::DegenerateAxis(format!("y_max = {y_max}")));
    }
    Ok((x / x_max, y / y_max))
}

pub fn extract_nodes(image: &SonarImage, scheme: &NodeScheme) -> Result<NodeSet> {
    match *scheme {
        NodeScheme::Grid { cols, rows } => extract_grid(image, cols, rows),
        NodeScheme::Superpixels {
            count,
            iterations,
            seed,
        } => extract_superpixels(image, count, iterations, seed),
    }
}

fn extract_grid(image: &SonarImage, cols: usize, rows: usize) -> Result<NodeSet> {
    let (w, h) = (image.width(), image.height());
    if cols == 0 || rows == 0 {
        return Err(Error::InvalidConfig(format!(
            "grid must have at least one cell per axis, got {cols}x{rows}"
        )));
    }
    if cols > w || rows > h {
        return Err(Error::InvalidConfig(format!(
            "grid {cols}x{rows} exceeds image {w}x{h}: every patch needs at least one pixel"
        )));
    }
    let mut nodes = Vec::with_capacity(cols * rows);
    for gy in 0..rows {
        let y0 = gy * h / rows;
        let y1 = (gy + 1) * h / rows;
        for gx in 0..cols {
            let x0 = gx * w / cols;
            let x1 = (gx + 1) * w / cols;
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    let v = image.get(x, y);
                    sum += v;
                    sum_sq += v * v;
                }
            }
            let count = ((x1 - x0) * (y1 - y0)) as f64;
            let mean = sum / count;
            let var = (sum_sq / count - mean * mean).max(0.0);
            // Patch centroid = mean of pixel centers, which for a full
            // rectangle is the midpoint of its bounds.
            let centroid = normalize_coords(
                (x0 + x1) as f64 / 2.0,
                (y0 + y1) as f64 / 2.0,
                w as f64,
                h as f64,
            )?;
            nodes.push(Node {
                id: nodes.len(),
                centroid,
                mean_intensity: mean,
                features: vec![mean, var.sqrt(), centroid.0, centroid.1],
            });
        }
    }
    NodeSet::new(nodes, w, h)
}

fn extract_superpixels(
    image: &SonarImage,
    count: usize,
    iterations: usize,
    seed: u64,
) -> Result<NodeSet> {
    let (w, h) = (image.width(), image.height());
    let total = w * h;
    if count == 0 {
        return Err(Error::InvalidConfig("superpixel count must be nonzero".into()));
    }
    if count > total {
        return Err(Error::InvalidConfig(format!(
            "cannot seed {count} superpixels from {total} pixels"
        )));
    }
    // Per-pixel samples: (intensity, normalized center x, normalized center y).
    let mut points = Vec::with_capacity(total);
    for y in 0..h {
        for x in 0..w {
            let (cx, cy) =
                normalize_coords(x as f64 + 0.5, y as f64 + 0.5, w as f64, h as f64)?;
            points.push([image.get(x, y), cx, cy]);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = rand::seq::index::sample(&mut rng, total, count);
    let mut centers: Vec<[f64; 3]> = init.iter().map(|i| points[i]).collect();

    let dist_sq = |p: &[f64; 3], c: &[f64; 3]| -> f64 {
        let d0 = p[0] - c[0];
        let d1 = p[1] - c[1];
        let d2 = p[2] - c[2];
        d0 * d0 + d1 * d1 + d2 * d2
    };
    let assign = |centers: &[[f64; 3]], labels: &mut [usize]| {
        for (pi, p) in points.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (ci, c) in centers.iter().enumerate() {
                let d = dist_sq(p, c);
                // Strict comparison keeps ties on the lowest center index.
                if d < best_d {
                    best_d = d;
                    best = ci;
                }
            }
            labels[pi] = best;
        }
    };

    let mut labels = vec![0usize; total];
    for _ in 0..iterations {
        assign(&centers, &mut labels);
        let mut sums = vec![[0.0f64; 3]; count];
        let mut counts = vec![0usize; count];
        for (pi, &l) in labels.iter().enumerate() {
            for d in 0..3 {
                sums[l][d] += points[pi][d];
            }
            counts[l] += 1;
        }
        for c in 0..count {
            if counts[c] > 0 {
                for d in 0..3 {
                    centers[c][d] = sums[c][d] / counts[c] as f64;
                }
            }
            // An empty cluster keeps its previous center; it may still be
            // dropped after the final assignment below.
        }
    }
    assign(&centers, &mut labels);

    // Build nodes from non-empty clusters, renumbered compactly in center order.
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (pi, &l) in labels.iter().enumerate() {
        members[l].push(pi);
    }
    let mut nodes = Vec::new();
    for member in members.iter().filter(|m| !m.is_empty()) {
        let inv = 1.0 / member.len() as f64;
        let mut mean = 0.0;
        let mut sum_sq = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        for &pi in member {
            let [v, px, py] = points[pi];
            mean += v;
            sum_sq += v * v;
            cx += px;
            cy += py;
        }
        mean *= inv;
        cx *= inv;
        cy *= inv;
        let var = (sum_sq * inv - mean * mean).max(0.0);
        nodes.push(Node {
            id: nodes.len(),
            centroid: (cx, cy),
            mean_intensity: mean,
            features: vec![mean, var.sqrt(), cx, cy],
        });
    }
    NodeSet::new(nodes, w, h)
}

/// Per-row scale parameters: for each node `i`, the mean centroid distance
/// and mean absolute intensity difference to every other node, floored at
/// [`SCALE_FLOOR`]. Needs at least two nodes.
pub fn row_scale_params(nodes: &[Node]) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = nodes.len();
    if n < 2 {
        return Err(Error::InsufficientNodes { needed: 2, got: n });
    }
    let inv = 1.0 / (n - 1) as f64;
    let mut dx = Vec::with_capacity(n);
    let mut df = Vec::with_capacity(n);
    for i in 0..n {
        let mut sum_d = 0.0;
        let mut sum_f = 0.0;
        for j in 0..n {
            if j == i {
                continue;
            }
            let ddx = nodes[i].centroid.0 - nodes[j].centroid.0;
            let ddy = nodes[i].centroid.1 - nodes[j].centroid.1;
            sum_d += (ddx * ddx + ddy * ddy).sqrt();
            sum_f += (nodes[i].mean_intensity - nodes[j].mean_intensity).abs();
        }
        dx.push((sum_d * inv).max(SCALE_FLOOR));
        df.push((sum_f * inv).max(SCALE_FLOOR));
    }
    Ok((dx, df))
}

/// `exp(-|p_i - p_j|^2 / dx^2)`: 1 at zero distance, decaying with distance
/// on scale `dx`.
pub fn coord_affinity(p_i: (f64, f64), p_j: (f64, f64), delta_x: f64) -> f64 {
    let ddx = p_i.0 - p_j.0;
    let ddy = p_i.1 - p_j.1;
    (-(ddx * ddx + ddy * ddy) / (delta_x * delta_x)).exp()
}

/// `1 / (1 + exp(-(|f_i - f_j| / df^2)^2))`: 0.5 at equal intensity, rising
/// toward 1 as intensities diverge. Note the scale enters squared.
pub fn pixel_affinity(f_i: f64, f_j: f64, delta_f: f64) -> f64 {
    let t = (f_i - f_j).abs() / (delta_f * delta_f);
    1.0 / (1.0 + (-(t * t)).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationMatrix {
    n: usize,
    gamma: f64,
    weights: Tensor,
    delta_x: Vec<f64>,
    delta_f: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Dense n x n weight matrix. Directed: row `i` uses node `i`'s scales.
    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn delta_x(&self) -> &[f64] {
        &self.delta_x
    }

    pub fn delta_f(&self) -> &[f64] {
        &self.delta_f
    }
}

/// Builds the dense correlation matrix
/// `W[i][j] = gamma * coord_affinity + (1 - gamma) * pixel_affinity`.
pub fn correlation_matrix(nodes: &[Node], gamma: f64) -> Result<CorrelationMatrix> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::InvalidConfig(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let (delta_x, delta_f) = row_scale_params(nodes)?;
    let n = nodes.len();
    let mut weights = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let c = coord_affinity(nodes[i].centroid, nodes[j].centroid, delta_x[i]);
            let p = pixel_affinity(
                nodes[i].mean_intensity,
                nodes[j].mean_intensity,
                delta_f[i],
            );
            weights.set(i, j, gamma * c + (1.0 - gamma) * p);
        }
    }
    if !weights.is_finite() {
        return Err(Error::Numeric("correlation matrix not finite".into()));
    }
    Ok(CorrelationMatrix {
        n,
        gamma,
        weights,
        delta_x,
        delta_f,
    })
}
