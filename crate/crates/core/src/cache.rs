//! On-disk cache for built graphs.
//!
//! Building a graph from an image is the expensive step of the pipeline, so
//! the result (node set plus sparsified graph) can be cached as a small text
//! file and reloaded exactly. Floats are serialized with 17 significant
//! decimal digits, which round-trips every finite `f64` bit-exactly.
//!
//! Format, line by line, all fields space-separated:
//!
//! ```text
//! sigat-graph v1
//! dims <width> <height>
//! gamma <g>
//! k <k>
//! nodes <n>
//! node <id> <cx> <cy> <mean> <n_features> <f...>   (n lines, id ascending)
//! edges <m>
//! edge <src> <dst> <weight>                        (m lines, (src, dst) ascending)
//! ```
//!
//! Edges are the selected neighborhoods only (self-loops included); the
//! dense adjacency is reconstructed with zeros elsewhere. The loader
//! re-validates every structural invariant, so a corrupted file fails with
//! a diagnostic naming the line or the offending node.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{Node, NodeSet, FEATURE_DIM};
use crate::knn::SparseGraph;
use crate::tensor::Tensor;

const MAGIC: &str = "sigat-graph";
const VERSION: &str = "v1";

/// `{:.16e}` prints 17 significant digits: enough to reparse any finite
/// `f64` to the identical bit pattern.
fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn cache_graph(nodes: &NodeSet, graph: &SparseGraph, path: &Path) -> Result<()> {
    if nodes.len() != graph.n() {
        return Err(Error::Contract(format!(
            "{} nodes but graph has {}",
            nodes.len(),
            graph.n()
        )));
    }
    let (w, h) = nodes.source_dims();
    let mut out = String::new();
    out.push_str(&format!("{MAGIC} {VERSION}\n"));
    out.push_str(&format!("dims {w} {h}\n"));
    out.push_str(&format!("gamma {}\n", fmt_f64(graph.gamma())));
    out.push_str(&format!("k {}\n", graph.k()));
    out.push_str(&format!("nodes {}\n", nodes.len()));
    for node in nodes.nodes() {
        out.push_str(&format!(
            "node {} {} {} {} {}",
            node.id,
            fmt_f64(node.centroid.0),
            fmt_f64(node.centroid.1),
            fmt_f64(node.mean_intensity),
            node.features.len()
        ));
        for &f in &node.features {
            out.push(' ');
            out.push_str(&fmt_f64(f));
        }
        out.push('\n');
    }
    out.push_str(&format!("edges {}\n", graph.edge_count()));
    for (src, list) in graph.neighbor_lists().iter().enumerate() {
        for &dst in list {
            out.push_str(&format!(
                "edge {src} {dst} {}\n",
                fmt_f64(graph.adjacency().get(src, dst))
            ));
        }
    }
    fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Cursor over the file's lines that attributes every failure to a
/// 1-based line number.
struct Cursor<'a> {
    path: String,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    current: usize,
}

impl<'a> Cursor<'a> {
    fn new(path: &Path, text: &'a str) -> Self {
        Cursor {
            path: path.display().to_string(),
            lines: text.lines().enumerate(),
            current: 0,
        }
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.clone(),
            line: self.current,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, line)) => {
                self.current = i + 1;
                Ok(line)
            }
            None => {
                self.current += 1;
                Err(self.fail("unexpected end of file"))
            }
        }
    }

    /// Next line split into fields, where field 0 must equal `tag`.
    fn tagged(&mut self, tag: &str, expected_fields: usize) -> Result<Vec<&'a str>> {
        let fields: Vec<&str> = self.next_line()?.split_whitespace().collect();
        if fields.first() != Some(&tag) {
            return Err(self.fail(format!(
                "expected a {tag:?} line, got {:?}",
                fields.first().copied().unwrap_or("")
            )));
        }
        if fields.len() != expected_fields {
            return Err(self.fail(format!(
                "{tag:?} line has {} fields, expected {expected_fields}",
                fields.len()
            )));
        }
        Ok(fields)
    }

    fn parse_usize(&self, s: &str, what: &str) -> Result<usize> {
        s.parse()
            .map_err(|_| self.fail(format!("{what} {s:?} is not a non-negative integer")))
    }

    fn parse_f64(&self, s: &str, what: &str) -> Result<f64> {
        let v: f64 = s
            .parse()
            .map_err(|_| self.fail(format!("{what} {s:?} is not a number")))?;
        if !v.is_finite() {
            return Err(self.fail(format!("{what} {s:?} is not finite")));
        }
        Ok(v)
    }
}

pub fn load_graph(path: &Path) -> Result<(NodeSet, SparseGraph)> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut cur = Cursor::new(path, &text);

    let header: Vec<&str> = cur.next_line()?.split_whitespace().collect();
    if header.first() != Some(&MAGIC) {
        return Err(cur.fail(format!("not a graph cache file (missing {MAGIC:?} header)")));
    }
    let found = header.get(1).copied().unwrap_or("");
    if found != VERSION {
        return Err(Error::UnsupportedVersion {
            expected: VERSION.into(),
            found: found.into(),
        });
    }

    let dims = cur.tagged("dims", 3)?;
    let width = cur.parse_usize(dims[1], "width")?;
    let height = cur.parse_usize(dims[2], "height")?;
    let gamma_line = cur.tagged("gamma", 2)?;
    let gamma = cur.parse_f64(gamma_line[1], "gamma")?;
    let k_line = cur.tagged("k", 2)?;
    let k = cur.parse_usize(k_line[1], "k")?;
    let n_line = cur.tagged("nodes", 2)?;
    let n = cur.parse_usize(n_line[1], "node count")?;

    let mut nodes = Vec::with_capacity(n);
    for i in 0..n {
        let f = cur.tagged("node", 6 + FEATURE_DIM)?;
        let id = cur.parse_usize(f[1], "node id")?;
        if id != i {
            return Err(cur.fail(format!("node id {id}, expected {i} (ids must ascend)")));
        }
        let cx = cur.parse_f64(f[2], "centroid x")?;
        let cy = cur.parse_f64(f[3], "centroid y")?;
        let mean = cur.parse_f64(f[4], "mean intensity")?;
        let n_feat = cur.parse_usize(f[5], "feature count")?;
        if n_feat != FEATURE_DIM {
            return Err(cur.fail(format!("{n_feat} features, expected {FEATURE_DIM}")));
        }
        let mut features = Vec::with_capacity(FEATURE_DIM);
        for j in 0..FEATURE_DIM {
            features.push(cur.parse_f64(f[6 + j], "feature")?);
        }
        nodes.push(Node {
            id,
            centroid: (cx, cy),
            mean_intensity: mean,
            features,
        });
    }

    let m_line = cur.tagged("edges", 2)?;
    let m = cur.parse_usize(m_line[1], "edge count")?;
    let mut neighbor_lists: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut weights = Tensor::zeros(n.max(1), n.max(1));
    let mut last: Option<(usize, usize)> = None;
    for _ in 0..m {
        let f = cur.tagged("edge", 4)?;
        let src = cur.parse_usize(f[1], "edge source")?;
        let dst = cur.parse_usize(f[2], "edge target")?;
        let w = cur.parse_f64(f[3], "edge weight")?;
        if src >= n || dst >= n {
            return Err(cur.fail(format!("edge ({src}, {dst}) outside {n} nodes")));
        }
        if let Some(prev) = last {
            if (src, dst) <= prev {
                return Err(cur.fail(format!(
                    "edge ({src}, {dst}) out of order after {prev:?}; edges must ascend by (src, dst)"
                )));
            }
        }
        last = Some((src, dst));
        neighbor_lists[src].push(dst);
        weights.set(src, dst, w);
    }
    if cur.next_line().is_ok() {
        return Err(cur.fail("trailing content after the edge list"));
    }

    let node_set = NodeSet::new(nodes, width, height)?;
    let graph = SparseGraph::from_parts(k, gamma, neighbor_lists, weights)?;
    Ok((node_set, graph))
}
