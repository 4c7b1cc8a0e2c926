//! Graph data model and ego-network extraction.
//!
//! A [`Graph`] is an undirected attributed graph: a deduplicated edge list,
//! a dense feature matrix, per-node class labels, and disjoint train/test
//! masks. Node-level classification is reformulated as graph-level
//! classification over k-hop [`EgoNetwork`]s, which are the unit every
//! downstream model consumes.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected attributed graph.
///
/// Edges are stored once as `(min, max)` pairs and interpreted both ways.
/// Self-loops are never stored; the GCN re-adds them internally during
/// renormalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    /// node_count x feature_dim, row per node.
    pub features: DMatrixData,
    pub labels: Vec<usize>,
    pub num_labels: usize,
    pub train_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
}

/// Serializable dense row-major matrix. `nalgebra` views are produced on
/// demand; keeping the stored form flat makes graph files and checkpoints
/// trivially round-trippable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DMatrixData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DMatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)]);
            }
        }
        DMatrixData { rows: m.nrows(), cols: m.ncols(), data }
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl Graph {
    /// Construct a graph from raw parts, canonicalizing the edge set.
    ///
    /// Reversed duplicates collapse to one stored edge and self-loops are
    /// dropped; the number of dropped self-loops is returned alongside.
    pub fn from_parts(
        features: DMatrix<f64>,
        edges: &[(usize, usize)],
        labels: Vec<usize>,
        train_mask: Vec<bool>,
        test_mask: Vec<bool>,
    ) -> Result<(Graph, usize)> {
        let node_count = features.nrows();
        if labels.len() != node_count {
            return Err(Error::DimensionMismatch {
                msg: format!("{} labels for {} nodes", labels.len(), node_count),
            });
        }
        if train_mask.len() != node_count || test_mask.len() != node_count {
            return Err(Error::DimensionMismatch {
                msg: "mask length does not match node count".into(),
            });
        }
        for i in 0..node_count {
            if train_mask[i] && test_mask[i] {
                return Err(Error::InvalidParameter {
                    msg: format!("node {i} is in both train and test masks"),
                });
            }
        }
        let num_labels = validate_labels(&labels)?;

        let mut canonical = BTreeSet::new();
        let mut self_loops = 0usize;
        for &(u, v) in edges {
            if u >= node_count {
                return Err(Error::EdgeOutOfRange { node: u, nodes: node_count });
            }
            if v >= node_count {
                return Err(Error::EdgeOutOfRange { node: v, nodes: node_count });
            }
            if u == v {
                self_loops += 1;
                continue;
            }
            canonical.insert((u.min(v), u.max(v)));
        }

        let graph = Graph {
            node_count,
            edges: canonical.into_iter().collect(),
            features: DMatrixData::from_matrix(&features),
            labels,
            num_labels,
            train_mask,
            test_mask,
        };
        Ok((graph, self_loops))
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols
    }

    pub fn feature_matrix(&self) -> DMatrix<f64> {
        self.features.to_matrix()
    }

    /// Adjacency lists with neighbors sorted ascending.
    pub fn adjacency(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.node_count];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        for nbrs in &mut adj {
            nbrs.sort_unstable();
        }
        adj
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(a, b)| a == v || b == v).count()
    }

    /// Per-node degrees in one pass.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.node_count];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }

    /// Fraction of edges whose endpoints share a label; 0 for edgeless graphs.
    pub fn label_homophily(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        let same = self
            .edges
            .iter()
            .filter(|&&(u, v)| self.labels[u] == self.labels[v])
            .count();
        same as f64 / self.edges.len() as f64
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        (0..self.node_count).filter(|&i| self.train_mask[i]).collect()
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        (0..self.node_count).filter(|&i| self.test_mask[i]).collect()
    }
}

/// Labels must be a dense 0..num_labels range with every id present.
fn validate_labels(labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Err(Error::InvalidLabels { msg: "no labels given".into() });
    }
    let max = *labels.iter().max().unwrap();
    let num_labels = max + 1;
    let mut seen = vec![false; num_labels];
    for &l in labels {
        seen[l] = true;
    }
    if let Some(missing) = seen.iter().position(|&s| !s) {
        return Err(Error::InvalidLabels {
            msg: format!("label {missing} never occurs but {max} does"),
        });
    }
    Ok(num_labels)
}

/// Anything that looks like a small attributed subgraph: ego-networks and
/// prompted subgraphs both qualify, so metrics and models are written once.
pub trait SubgraphLike {
    fn node_count(&self) -> usize;
    fn edges(&self) -> &[(usize, usize)];
    fn features(&self) -> &DMatrix<f64>;

    /// Mean node degree, 0 for an empty subgraph.
    fn mean_degree(&self) -> f64 {
        if self.node_count() == 0 {
            0.0
        } else {
            2.0 * self.edges().len() as f64 / self.node_count() as f64
        }
    }
}

/// k-hop induced subgraph around a center node.
///
/// `nodes` holds original node ids in BFS order (ties broken by ascending
/// id), center first; `local_edges` are over local indices and hold exactly
/// the induced edge set.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoNetwork {
    pub center: usize,
    pub nodes: Vec<usize>,
    pub local_edges: Vec<(usize, usize)>,
    pub features: DMatrix<f64>,
    pub label: usize,
    pub hops: usize,
}

impl SubgraphLike for EgoNetwork {
    fn node_count(&self) -> usize {
        self.nodes.len()
    }
    fn edges(&self) -> &[(usize, usize)] {
        &self.local_edges
    }
    fn features(&self) -> &DMatrix<f64> {
        &self.features
    }
}

/// Extract the k-hop ego-network of `center`.
///
/// Isolated centers yield a valid single-node subgraph. Node order is BFS
/// level order with each level sorted ascending, which makes every
/// downstream computation deterministic.
pub fn ego_network(graph: &Graph, center: usize, k: usize) -> Result<EgoNetwork> {
    if center >= graph.node_count {
        return Err(Error::NodeOutOfRange { node: center, nodes: graph.node_count });
    }
    let adj = graph.adjacency();
    ego_network_with_adjacency(graph, &adj, center, k)
}

/// Same as [`ego_network`] but reuses a precomputed adjacency, which matters
/// when extracting egos for every node of a graph.
pub fn ego_network_with_adjacency(
    graph: &Graph,
    adj: &[Vec<usize>],
    center: usize,
    k: usize,
) -> Result<EgoNetwork> {
    if center >= graph.node_count {
        return Err(Error::NodeOutOfRange { node: center, nodes: graph.node_count });
    }

    let mut dist = vec![usize::MAX; graph.node_count];
    dist[center] = 0;
    let mut nodes = vec![center];
    let mut frontier = vec![center];
    for level in 1..=k {
        let mut next = BTreeSet::new();
        for &u in &frontier {
            for &w in &adj[u] {
                if dist[w] == usize::MAX {
                    next.insert(w);
                }
            }
        }
        if next.is_empty() {
            break;
        }
        for &w in &next {
            dist[w] = level;
            nodes.push(w);
        }
        frontier = next.into_iter().collect();
    }

    let mut local_index = vec![usize::MAX; graph.node_count];
    for (i, &n) in nodes.iter().enumerate() {
        local_index[n] = i;
    }

    let mut local_edges = Vec::new();
    for &(u, v) in &graph.edges {
        let (lu, lv) = (local_index[u], local_index[v]);
        if lu != usize::MAX && lv != usize::MAX {
            local_edges.push((lu.min(lv), lu.max(lv)));
        }
    }
    local_edges.sort_unstable();

    let feats = graph.feature_matrix();
    let mut features = DMatrix::zeros(nodes.len(), graph.feature_dim());
    for (i, &n) in nodes.iter().enumerate() {
        features.set_row(i, &feats.row(n));
    }

    Ok(EgoNetwork {
        center,
        nodes,
        local_edges,
        features,
        label: graph.labels[center],
        hops: k,
    })
}
