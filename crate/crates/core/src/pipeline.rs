//! End-to-end assembly: image file to training-ready graph sample.
//!
//! Thin glue over the node extractor, correlation matrix, sparsifier, and
//! model input types, shared by the CLI and the integration tests so every
//! consumer builds graphs the same way.

use std::path::Path;

use crate::error::Result;
use crate::graph::{correlation_matrix, extract_nodes, NodeScheme, NodeSet};
use crate::image::SonarImage;
use crate::knn::{build_sparse_graph, SparseGraph};
use crate::manifest::{DatasetManifest, Split};
use crate::model::GraphSample;

/// Builds the sparsified graph for one image.
pub fn build_graph(
    image: &SonarImage,
    scheme: &NodeScheme,
    gamma: f64,
    k: usize,
) -> Result<(NodeSet, SparseGraph)> {
    let nodes = extract_nodes(image, scheme)?;
    let w = correlation_matrix(nodes.nodes(), gamma)?;
    let graph = build_sparse_graph(nodes.nodes(), &w, k)?;
    Ok((nodes, graph))
}

/// Builds a labeled model input for one image.
pub fn image_to_sample(
    image: &SonarImage,
    scheme: &NodeScheme,
    gamma: f64,
    k: usize,
    label: usize,
) -> Result<GraphSample> {
    let (nodes, graph) = build_graph(image, scheme, gamma, k)?;
    GraphSample::new(nodes.feature_matrix(), &graph, label)
}

/// Loads one split of a manifest into model inputs. Relative manifest paths
/// are resolved against `root`. Labels are indices into the manifest's
/// class list.
pub fn load_split(
    root: &Path,
    manifest: &DatasetManifest,
    split: Split,
    scheme: &NodeScheme,
    gamma: f64,
    k: usize,
) -> Result<Vec<GraphSample>> {
    let mut out = Vec::new();
    for (entry, label) in manifest.split_entries(split) {
        let image = SonarImage::read_auto(&root.join(&entry.path))?;
        out.push(image_to_sample(&image, scheme, gamma, k, label)?);
    }
    Ok(out)
}
