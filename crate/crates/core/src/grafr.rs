//! Similarity-graph feature reconstruction.

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::features::{FeatureError, FeatureMatrix};

/// Floor applied to distances before inversion.
pub const DIST_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("graph needs at least 2 nodes, got {0}")]
    TooFewNodes(usize),
    #[error("data error: {0}")]
    Data(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fully connected graph over feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGraph {
    nodes: FeatureMatrix,
    /// `n × n` Euclidean distances, row-major.
    distances: Vec<f64>,
    /// `n × n` inverse distances; the diagonal is 0 and never used.
    similarities: Vec<f64>,
}

impl FeatureGraph {
    pub fn len(&self) -> usize {
        self.nodes.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> &FeatureMatrix {
        &self.nodes
    }

    pub fn distance(&self, u: usize, v: usize) -> f64 {
        self.distances[u * self.len() + v]
    }

    pub fn similarity(&self, u: usize, v: usize) -> f64 {
        self.similarities[u * self.len() + v]
    }

    /// Mean similarity of `u` to every other node.
    pub fn mean_similarity(&self, u: usize) -> f64 {
        let n = self.len();
        let row = &self.similarities[u * n..(u + 1) * n];
        let s: f64 = row.iter().enumerate().filter(|&(v, _)| v != u).map(|(_, s)| s).sum();
        s / (n - 1) as f64
    }
}

pub fn build_graph(features: &FeatureMatrix) -> Result<FeatureGraph, GraphError> {
    let n = features.rows();
    if n < 2 {
        return Err(GraphError::TooFewNodes(n));
    }
    if !features.all_finite() {
        return Err(GraphError::Data("non-finite feature value".into()));
    }
    let mut distances = vec![0.0; n * n];
    let mut similarities = vec![0.0; n * n];
    for u in 0..n {
        for v in u + 1..n {
            let d = features
                .row(u)
                .iter()
                .zip(features.row(v))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            let s = 1.0 / d.max(DIST_EPS);
            distances[u * n + v] = d;
            distances[v * n + u] = d;
            similarities[u * n + v] = s;
            similarities[v * n + u] = s;
        }
    }
    Ok(FeatureGraph { nodes: features.clone(), distances, similarities })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenSet {
    /// Node indices by descending score, ties by ascending index.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Default hidden-set size, `⌈n / 10⌉`.
pub fn default_k(n: usize) -> usize {
    n.div_ceil(10).max(1)
}

/// The `k` nodes with the highest mean similarity to all other nodes.
pub fn select_hidden(graph: &FeatureGraph, k: usize) -> Result<HiddenSet, GraphError> {
    let n = graph.len();
    if k == 0 || k > n {
        return Err(GraphError::Param(format!("k = {k} outside 1..={n}")));
    }
    let score: Vec<f64> = (0..n).map(|u| graph.mean_similarity(u)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    order.truncate(k);
    let scores = order.iter().map(|&i| score[i]).collect();
    Ok(HiddenSet { indices: order, scores })
}

/// Per-node similarity-weighted average of every other node's vector.
pub fn reconstruct(graph: &FeatureGraph) -> FeatureMatrix {
    let (n, d) = (graph.len(), graph.nodes.cols());
    let mut out = FeatureMatrix::zeros(n, d);
    for u in 0..n {
        let total: f64 = (0..n).filter(|&v| v != u).map(|v| graph.similarity(u, v)).sum();
        let row = out.row_mut(u);
        for v in (0..n).filter(|&v| v != u) {
            let w = graph.similarity(u, v) / total;
            row.iter_mut().zip(graph.nodes.row(v)).for_each(|(o, x)| *o += w * x);
        }
    }
    out
}

/// Reconstruction of rows that are not part of `graph`: each query `q` is
/// anchored in the graph over the graph's nodes plus `q`, so its row is the
/// similarity-weighted average of every graph node. Also returns each
/// query's mean similarity to the graph nodes.
pub fn reconstruct_queries(graph: &FeatureGraph, queries: &FeatureMatrix) -> Result<(FeatureMatrix, Vec<f64>), GraphError> {
    let (n, d) = (graph.len(), graph.nodes.cols());
    if queries.cols() != d {
        return Err(GraphError::Data(format!("queries have {} columns, graph nodes {d}", queries.cols())));
    }
    if !queries.all_finite() {
        return Err(GraphError::Data("non-finite feature value".into()));
    }
    let mut out = FeatureMatrix::zeros(queries.rows(), d);
    let mut mean = Vec::with_capacity(queries.rows());
    let mut sim = vec![0.0; n];
    for (q, x) in queries.iter_rows().enumerate() {
        for (v, s) in sim.iter_mut().enumerate() {
            let dist = x.iter().zip(graph.nodes.row(v)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            *s = 1.0 / dist.max(DIST_EPS);
        }
        let total: f64 = sim.iter().sum();
        let row = out.row_mut(q);
        for (v, s) in sim.iter().enumerate() {
            let w = s / total;
            row.iter_mut().zip(graph.nodes.row(v)).for_each(|(o, x)| *o += w * x);
        }
        mean.push(total / n as f64);
    }
    Ok((out, mean))
}

#[derive(Debug, Clone)]
pub struct GrafrOutput {
    pub graph: FeatureGraph,
    pub features: FeatureMatrix,
    pub hidden: HiddenSet,
    pub mean_similarity: Vec<f64>,
}

/// Concatenates global and spatial features per row, builds the graph and
/// replaces every row by its reconstruction. `k` defaults to [`default_k`].
pub fn grafr_apply(global: &FeatureMatrix, spatial: &FeatureMatrix, k: Option<usize>) -> Result<GrafrOutput, GraphError> {
    if global.rows() != spatial.rows() {
        return Err(GraphError::Data(format!("row counts differ: {} vs {}", global.rows(), spatial.rows())));
    }
    let joined = global.concat_columns(spatial)?;
    let graph = build_graph(&joined)?;
    let hidden = select_hidden(&graph, k.unwrap_or_else(|| default_k(graph.len())).min(graph.len()))?;
    let mean_similarity = (0..graph.len()).map(|u| graph.mean_similarity(u)).collect();
    let features = reconstruct(&graph);
    Ok(GrafrOutput { graph, features, hidden, mean_similarity })
}

/// `node_index,mean_similarity,selected` diagnostics.
pub fn write_diagnostics(path: &Path, out: &GrafrOutput) -> Result<(), GraphError> {
    let mut s = String::from("node_index,mean_similarity,selected\n");
    for (i, m) in out.mean_similarity.iter().enumerate() {
        let sel = u8::from(out.hidden.indices.contains(&i));
        writeln!(s, "{i},{m:?},{sel}").expect("writing to a string");
    }
    std::fs::write(path, s)?;
    Ok(())
}
