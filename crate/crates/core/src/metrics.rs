//! Analytic metrics: node-centric homophily variants, label non-uniformity,
//! LNH, centroid statistics, and clean-vs-poisoned distribution deltas.
//!
//! Degenerate cosines (either vector zero) are defined as 0 throughout: no
//! signal is treated as no homophily, so isolated nodes never error.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::graph::{Graph, SubgraphLike};

/// Cosine similarity with the zero-vector convention cos(0, .) = 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Subgraph-level homophily: the mean over all subgraph nodes u of
/// cos(r_u, X_u), where r_u aggregates u's neighbors with symmetric
/// degree normalization. Neighborhoods and degrees are taken inside the
/// subgraph. Nodes without neighbors (or with a zero aggregate) contribute 0.
pub fn local_subgraph_homophily<S: SubgraphLike>(sub: &S) -> f64 {
    let n = sub.node_count();
    if n == 0 {
        return 0.0;
    }
    let feats = sub.features();
    let dim = feats.ncols();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, v) in sub.edges() {
        adj[u].push(v);
        adj[v].push(u);
    }
    let mut total = 0.0;
    for u in 0..n {
        let du = adj[u].len() as f64;
        if du == 0.0 {
            continue;
        }
        let mut agg = vec![0.0; dim];
        for &w in &adj[u] {
            let dw = adj[w].len() as f64;
            let coeff = 1.0 / (du * dw).sqrt();
            for c in 0..dim {
                agg[c] += coeff * feats[(w, c)];
            }
        }
        let own: Vec<f64> = (0..dim).map(|c| feats[(u, c)]).collect();
        total += cosine(&agg, &own);
    }
    total / n as f64
}

/// Global-view homophily: per node v of the original graph,
/// h_v = cos(t_v, Z_v) with t_v the degree-normalized aggregate of
/// neighbor rows of `subgraph_embeddings` over the original topology.
/// Isolated nodes map to 0.
pub fn global_view_homophily(graph: &Graph, subgraph_embeddings: &DMatrix<f64>) -> Result<Vec<f64>> {
    if subgraph_embeddings.nrows() != graph.node_count {
        return Err(Error::DimensionMismatch {
            msg: format!(
                "{} embedding rows for {} nodes",
                subgraph_embeddings.nrows(),
                graph.node_count
            ),
        });
    }
    let adj = graph.adjacency();
    let dim = subgraph_embeddings.ncols();
    let mut out = Vec::with_capacity(graph.node_count);
    for v in 0..graph.node_count {
        let dv = adj[v].len() as f64;
        if dv == 0.0 {
            out.push(0.0);
            continue;
        }
        let mut agg = vec![0.0; dim];
        for &u in &adj[v] {
            let du = adj[u].len() as f64;
            let coeff = 1.0 / (dv * du).sqrt();
            for c in 0..dim {
                agg[c] += coeff * subgraph_embeddings[(u, c)];
            }
        }
        let own: Vec<f64> = (0..dim).map(|c| subgraph_embeddings[(v, c)]).collect();
        out.push(cosine(&agg, &own));
    }
    Ok(out)
}

/// Label non-uniformity of a soft prediction: sum over labels of
/// |mu(y) - 1/|Y||. Range [0, 2(1 - 1/|Y|)]; 0 at the uniform prediction.
pub fn label_nonuniformity(soft_prediction: &[f64]) -> Result<f64> {
    if soft_prediction.is_empty() {
        return Err(Error::NotASimplex { msg: "empty prediction".into() });
    }
    if soft_prediction.iter().any(|&p| p < 0.0) {
        return Err(Error::NotASimplex { msg: "negative entry".into() });
    }
    let sum: f64 = soft_prediction.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NotASimplex { msg: format!("entries sum to {sum}") });
    }
    let k = soft_prediction.len() as f64;
    Ok(soft_prediction.iter().map(|&p| (p - 1.0 / k).abs()).sum())
}

/// Label non-uniformity homophily of node v over its 1-hop neighborhood in
/// the original graph:
/// (1 - same-label neighbor fraction) * sum_y |tau(N(v), y) - 1/|Y||.
/// Isolated nodes score 0. High values mark nodes whose neighbors
/// concentrate on some label other than v's own.
pub fn lnh_score(graph: &Graph, v: usize) -> Result<f64> {
    if v >= graph.node_count {
        return Err(Error::NodeOutOfRange { node: v, nodes: graph.node_count });
    }
    let adj = graph.adjacency();
    lnh_score_with_adjacency(graph, &adj, v)
}

/// [`lnh_score`] against a precomputed adjacency; used when scoring many
/// nodes of the same graph.
pub fn lnh_score_with_adjacency(graph: &Graph, adj: &[Vec<usize>], v: usize) -> Result<f64> {
    if v >= graph.node_count {
        return Err(Error::NodeOutOfRange { node: v, nodes: graph.node_count });
    }
    let nbrs = &adj[v];
    if nbrs.is_empty() {
        return Ok(0.0);
    }
    let deg = nbrs.len() as f64;
    let mut counts = vec![0usize; graph.num_labels];
    for &u in nbrs {
        counts[graph.labels[u]] += 1;
    }
    let same_frac = counts[graph.labels[v]] as f64 / deg;
    let k = graph.num_labels as f64;
    let ldn: f64 = counts.iter().map(|&c| (c as f64 / deg - 1.0 / k).abs()).sum();
    Ok((1.0 - same_frac) * ldn)
}

/// Per-label mean embeddings. Labels with zero samples are flagged absent
/// rather than given a zero centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet {
    pub centroids: DMatrix<f64>,
    pub counts: Vec<usize>,
}

impl CentroidSet {
    /// Centroid row for `label`, or None when no sample carried it.
    pub fn get(&self, label: usize) -> Option<DVector<f64>> {
        if label >= self.counts.len() || self.counts[label] == 0 {
            return None;
        }
        Some(self.centroids.row(label).transpose())
    }

    pub fn is_present(&self, label: usize) -> bool {
        label < self.counts.len() && self.counts[label] > 0
    }
}

/// Arithmetic mean embedding per label.
pub fn compute_centroids(
    embeddings: &DMatrix<f64>,
    labels: &[usize],
    num_labels: usize,
) -> Result<CentroidSet> {
    if embeddings.nrows() == 0 {
        return Err(Error::EmptyInput { msg: "no embeddings".into() });
    }
    if embeddings.nrows() != labels.len() {
        return Err(Error::DimensionMismatch {
            msg: format!("{} embeddings vs {} labels", embeddings.nrows(), labels.len()),
        });
    }
    let dim = embeddings.ncols();
    let mut centroids = DMatrix::zeros(num_labels, dim);
    let mut counts = vec![0usize; num_labels];
    for (i, &l) in labels.iter().enumerate() {
        if l >= num_labels {
            return Err(Error::InvalidLabels { msg: format!("label {l} >= num_labels {num_labels}") });
        }
        counts[l] += 1;
        for c in 0..dim {
            centroids[(l, c)] += embeddings[(i, c)];
        }
    }
    for l in 0..num_labels {
        if counts[l] > 0 {
            for c in 0..dim {
                centroids[(l, c)] /= counts[l] as f64;
            }
        }
    }
    Ok(CentroidSet { centroids, counts })
}

/// Centroid alignment, misalignment, and their difference for one embedding:
/// CA = cos(Z, L_own), CM = cos(Z, L_other), CF = CA - CM.
pub fn centroid_stats(
    embedding: &[f64],
    own_label: usize,
    other_label: usize,
    centroids: &CentroidSet,
) -> Result<(f64, f64, f64)> {
    if own_label == other_label {
        return Err(Error::InvalidParameter { msg: "own_label equals other_label".into() });
    }
    let own = centroids.get(own_label).ok_or(Error::AbsentCentroid { label: own_label })?;
    let other = centroids.get(other_label).ok_or(Error::AbsentCentroid { label: other_label })?;
    let ca = cosine(embedding, own.as_slice());
    let cm = cosine(embedding, other.as_slice());
    Ok((ca, cm, ca - cm))
}

/// Average degree difference and average homophily difference between a
/// clean and a poisoned population of subgraphs.
///
/// ADD = mean degree(clean) - mean degree(poisoned);
/// AHD = (mean local homophily(clean) - mean(poisoned)) * 100, i.e.
/// percentage points. Denser, less homophilic poisoned subgraphs therefore
/// produce negative ADD and positive AHD.
pub fn distribution_deltas<S: SubgraphLike>(
    clean: &[S],
    poisoned: &[S],
) -> Result<(f64, f64)> {
    if clean.is_empty() || poisoned.is_empty() {
        return Err(Error::EmptyInput { msg: "distribution_deltas needs both populations".into() });
    }
    let mean_deg = |subs: &[S]| subs.iter().map(|s| s.mean_degree()).sum::<f64>() / subs.len() as f64;
    let mean_homo =
        |subs: &[S]| subs.iter().map(local_subgraph_homophily).sum::<f64>() / subs.len() as f64;
    let add = mean_deg(clean) - mean_deg(poisoned);
    let ahd = (mean_homo(clean) - mean_homo(poisoned)) * 100.0;
    Ok((add, ahd))
}
