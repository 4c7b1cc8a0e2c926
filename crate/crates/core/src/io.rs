//! Graph ingestion and the bundled single-file JSON graph format.
//!
//! Three-file form: an edge list of whitespace-separated id pairs, a CSV of
//! decimal feature rows (one per node), and one integer label per line.
//! JSON form: a single document with `nodes`, `edges`, `features`, `labels`
//! and optional `train_mask`/`test_mask` arrays; when the masks are absent
//! they are drawn by seeded shuffle with the requested train fraction.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::rng::rng_from_seed;

/// Ingestion side effects worth surfacing: dropped self-loops and collapsed
/// duplicate/reversed edges.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub self_loops_dropped: usize,
    pub duplicates_collapsed: usize,
}

/// Train/test split request: fraction of nodes assigned to training, drawn
/// by seeded shuffle. The remainder is the test set.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_frac: f64, seed: u64) -> Self {
        SplitSpec { train_frac, seed }
    }
}

/// Draw disjoint exhaustive train/test masks.
pub fn draw_masks(node_count: usize, split: SplitSpec) -> Result<(Vec<bool>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&split.train_frac) {
        return Err(Error::InvalidParameter {
            msg: format!("train fraction {} outside [0,1]", split.train_frac),
        });
    }
    let mut order: Vec<usize> = (0..node_count).collect();
    let mut rng = rng_from_seed(split.seed);
    order.shuffle(&mut rng);
    let take = (split.train_frac * node_count as f64).ceil() as usize;
    let mut train = vec![false; node_count];
    let mut test = vec![false; node_count];
    for (i, &n) in order.iter().enumerate() {
        if i < take {
            train[n] = true;
        } else {
            test[n] = true;
        }
    }
    Ok((train, test))
}

/// Load a graph from the three-file form.
pub fn load_graph(
    edge_path: &Path,
    feature_path: &Path,
    label_path: &Path,
    split: SplitSpec,
) -> Result<(Graph, LoadStats)> {
    let features = read_features(feature_path)?;
    let labels = read_labels(label_path)?;
    if labels.len() != features.nrows() {
        return Err(Error::DimensionMismatch {
            msg: format!("{} labels for {} feature rows", labels.len(), features.nrows()),
        });
    }
    let raw_edges = read_edges(edge_path)?;

    let (train, test) = draw_masks(features.nrows(), split)?;
    let raw_count = raw_edges.len();
    let (graph, self_loops) = Graph::from_parts(features, &raw_edges, labels, train, test)?;
    let stats = LoadStats {
        self_loops_dropped: self_loops,
        duplicates_collapsed: raw_count - self_loops - graph.edges.len(),
    };
    Ok((graph, stats))
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_to_string(path)?;
    let mut edges = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<usize> {
            tok.ok_or_else(|| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "expected two node ids".into(),
            })?
            .parse()
            .map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "node id is not a non-negative integer".into(),
            })
        };
        let u = parse(it.next())?;
        let v = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: "more than two tokens on edge line".into(),
            });
        }
        edges.push((u, v));
    }
    Ok(edges)
}

fn read_features(path: &Path) -> Result<DMatrix<f64>> {
    let text = read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split(',') {
            let v: f64 = tok.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: format!("'{}' is not a real number", tok.trim()),
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(Error::RaggedFeatures {
                    row: rows.len(),
                    got: row.len(),
                    expected: first.len(),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::EmptyInput { msg: format!("{} has no feature rows", path.display()) });
    }
    let cols = rows[0].len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(DMatrix::from_row_slice(flat.len() / cols, cols, &flat))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_to_string(path)?;
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: usize = line.parse().map_err(|_| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: format!("'{line}' is not a label id"),
        })?;
        labels.push(v);
    }
    Ok(labels)
}

/// On-disk JSON graph document.
#[derive(Debug, Serialize, Deserialize)]
struct GraphFile {
    nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    test_mask: Option<Vec<bool>>,
}

/// Load the bundled JSON graph format. `split` is used only when the file
/// carries no masks.
pub fn load_graph_json(path: &Path, split: SplitSpec) -> Result<(Graph, LoadStats)> {
    let text = read_to_string(path)?;
    let file: GraphFile = serde_json::from_str(&text)?;
    if file.features.len() != file.nodes || file.labels.len() != file.nodes {
        return Err(Error::DimensionMismatch {
            msg: format!(
                "nodes={} but {} feature rows / {} labels",
                file.nodes,
                file.features.len(),
                file.labels.len()
            ),
        });
    }
    let cols = file.features.first().map(|r| r.len()).unwrap_or(0);
    for (i, row) in file.features.iter().enumerate() {
        if row.len() != cols {
            return Err(Error::RaggedFeatures { row: i, got: row.len(), expected: cols });
        }
    }
    let flat: Vec<f64> = file.features.iter().flatten().copied().collect();
    let features = DMatrix::from_row_slice(file.nodes, cols, &flat);

    let (train, test) = match (file.train_mask, file.test_mask) {
        (Some(tr), Some(te)) => (tr, te),
        (None, None) => draw_masks(file.nodes, split)?,
        _ => {
            return Err(Error::Config {
                msg: "graph file must carry both masks or neither".into(),
            })
        }
    };
    let raw_count = file.edges.len();
    let (graph, self_loops) = Graph::from_parts(features, &file.edges, file.labels, train, test)?;
    let stats = LoadStats {
        self_loops_dropped: self_loops,
        duplicates_collapsed: raw_count - self_loops - graph.edges.len(),
    };
    Ok((graph, stats))
}

/// Write a graph as the bundled JSON format, masks included.
pub fn save_graph_json(graph: &Graph, path: &Path) -> Result<()> {
    let feats = graph.feature_matrix();
    let features: Vec<Vec<f64>> = (0..graph.node_count)
        .map(|r| (0..graph.feature_dim()).map(|c| feats[(r, c)]).collect())
        .collect();
    let file = GraphFile {
        nodes: graph.node_count,
        edges: graph.edges.clone(),
        features,
        labels: graph.labels.clone(),
        train_mask: Some(graph.train_mask.clone()),
        test_mask: Some(graph.test_mask.clone()),
    };
    let text = serde_json::to_string_pretty(&file)?;
    fs::write(path, text).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_file(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn three_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let e = write_file(dir.path(), "edges.txt", "0 1\n1 2\n");
        let f = write_file(dir.path(), "feat.csv", "1.0,0.0\n0.5,0.5\n0.0,1.0\n");
        let l = write_file(dir.path(), "labels.txt", "0\n1\n0\n");
        let (g, stats) = load_graph(&e, &f, &l, SplitSpec::new(0.5, 7)).unwrap();
        assert_eq!(g.node_count, 3);
        assert_eq!(g.edges.len(), 2);
        assert_eq!(g.num_labels, 2);
        assert_eq!(stats, LoadStats::default());
        let trains = g.train_mask.iter().filter(|&&b| b).count();
        assert_eq!(trains, 2); // ceil(0.5 * 3)
    }

    #[test]
    fn reversed_edge_collapses() {
        let dir = tempfile::tempdir().unwrap();
        let e = write_file(dir.path(), "edges.txt", "0 1\n1 0\n");
        let f = write_file(dir.path(), "feat.csv", "1.0\n2.0\n");
        let l = write_file(dir.path(), "labels.txt", "0\n1\n");
        let (g, stats) = load_graph(&e, &f, &l, SplitSpec::new(0.5, 7)).unwrap();
        assert_eq!(g.edges, vec![(0, 1)]);
        assert_eq!(stats.duplicates_collapsed, 1);
    }

    #[test]
    fn ragged_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = write_file(dir.path(), "edges.txt", "0 1\n");
        let f = write_file(dir.path(), "feat.csv", "1.0,2.0,3.0,4.0\n1.0,2.0,3.0\n");
        let l = write_file(dir.path(), "labels.txt", "0\n1\n");
        let err = load_graph(&e, &f, &l, SplitSpec::new(0.5, 7));
        assert!(matches!(err, Err(Error::RaggedFeatures { row: 1, got: 3, expected: 4 })));
    }

    #[test]
    fn edge_beyond_features_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let e = write_file(dir.path(), "edges.txt", "0 5\n");
        let f = write_file(dir.path(), "feat.csv", "1.0\n2.0\n");
        let l = write_file(dir.path(), "labels.txt", "0\n1\n");
        let err = load_graph(&e, &f, &l, SplitSpec::new(0.5, 7));
        assert!(matches!(err, Err(Error::EdgeOutOfRange { node: 5, .. })));
    }

    #[test]
    fn json_roundtrip_preserves_graph() {
        let dir = tempfile::tempdir().unwrap();
        let e = write_file(dir.path(), "edges.txt", "0 1\n1 2\n");
        let f = write_file(dir.path(), "feat.csv", "1.0,0.0\n0.5,0.5\n0.0,1.0\n");
        let l = write_file(dir.path(), "labels.txt", "0\n1\n0\n");
        let (g, _) = load_graph(&e, &f, &l, SplitSpec::new(0.5, 7)).unwrap();
        let p = dir.path().join("graph.json");
        save_graph_json(&g, &p).unwrap();
        let (g2, _) = load_graph_json(&p, SplitSpec::new(0.5, 0)).unwrap();
        assert_eq!(g, g2);
    }
}
