//! Inference-time defenses applied per prompted subgraph: low-rank
//! adjacency filtering and Gaussian noise injection into features or graph
//! embeddings.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::SubgraphLike;
use crate::prompt::PromptedSubgraph;
use crate::rng::rng_from_seed;

pub const DEFAULT_SVD_RANK: usize = 10;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.1;
pub const DEFAULT_BINARIZE_THRESHOLD: f64 = 0.5;

/// Which defense the evaluation pipeline applies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseConfig {
    None,
    GnnSvd {
        #[serde(default = "default_rank")]
        rank: usize,
        #[serde(default = "default_binarize")]
        binarize_threshold: f64,
    },
    NoisyFea {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
    NoisyEmb {
        #[serde(default = "default_sigma")]
        sigma: f64,
    },
}

fn default_rank() -> usize {
    DEFAULT_SVD_RANK
}
fn default_sigma() -> f64 {
    DEFAULT_NOISE_SIGMA
}
fn default_binarize() -> f64 {
    DEFAULT_BINARIZE_THRESHOLD
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig::None
    }
}

/// Replace the subgraph's adjacency with its best rank-`rank` approximation,
/// binarized at `threshold`: reconstructed entries at or above it become
/// edges, the rest are removed. Symmetry is restored by construction and
/// the diagonal stays empty. Features and node order are untouched.
pub fn gnn_svd_filter(
    sub: &PromptedSubgraph,
    rank: usize,
    threshold: f64,
) -> Result<PromptedSubgraph> {
    if rank == 0 {
        return Err(Error::InvalidParameter { msg: "rank must be >= 1".into() });
    }
    let n = sub.node_count();
    if n == 0 {
        return Err(Error::EmptyInput { msg: "cannot filter an empty subgraph".into() });
    }
    let mut a = DMatrix::<f64>::zeros(n, n);
    for &(u, v) in sub.edges() {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.expect("svd requested u");
    let v_t = svd.v_t.expect("svd requested v_t");
    let k = rank.min(svd.singular_values.len());
    let mut recon = DMatrix::<f64>::zeros(n, n);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s == 0.0 {
            continue;
        }
        let ui = u.column(i);
        let vi = v_t.row(i);
        for r in 0..n {
            for c in 0..n {
                recon[(r, c)] += s * ui[r] * vi[c];
            }
        }
    }

    let mut edges = Vec::new();
    for r in 0..n {
        for c in (r + 1)..n {
            // Exact symmetry: average the two reconstructed entries.
            let val = 0.5 * (recon[(r, c)] + recon[(c, r)]);
            if val >= threshold {
                edges.push((r, c));
            }
        }
    }
    let mut out = sub.clone();
    out.edges = edges;
    Ok(out)
}

/// Add seeded Gaussian noise (scale `sigma`) to every feature entry;
/// topology untouched.
pub fn inject_feature_noise(sub: &PromptedSubgraph, sigma: f64, seed: u64) -> Result<PromptedSubgraph> {
    if sigma <= 0.0 {
        return Err(Error::InvalidParameter { msg: format!("sigma must be > 0, got {sigma}") });
    }
    let mut rng = rng_from_seed(seed);
    let mut out = sub.clone();
    for r in 0..out.features.nrows() {
        for c in 0..out.features.ncols() {
            let n: f64 = StandardNormal.sample(&mut rng);
            out.features[(r, c)] += sigma * n;
        }
    }
    Ok(out)
}

/// Add seeded Gaussian noise (scale `sigma`) to a graph embedding; applied
/// between readout and classifier.
pub fn inject_embedding_noise(embedding: &DVector<f64>, sigma: f64, seed: u64) -> Result<DVector<f64>> {
    if sigma <= 0.0 {
        return Err(Error::InvalidParameter { msg: format!("sigma must be > 0, got {sigma}") });
    }
    let mut rng = rng_from_seed(seed);
    let mut out = embedding.clone();
    for i in 0..out.len() {
        let n: f64 = StandardNormal.sample(&mut rng);
        out[i] += sigma * n;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sub(n: usize, edges: &[(usize, usize)]) -> PromptedSubgraph {
        PromptedSubgraph {
            label: 0,
            edges: edges.to_vec(),
            features: DMatrix::from_fn(n, 3, |r, c| (r * 3 + c) as f64 * 0.1),
            ego_len: n,
            token_spans: Vec::new(),
        }
    }

    fn edge_set(s: &PromptedSubgraph) -> std::collections::BTreeSet<(usize, usize)> {
        s.edges.iter().copied().collect()
    }

    #[test]
    fn full_rank_reconstruction_is_identity() {
        let s = sub(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (0, 4), (1, 3)]);
        let out = gnn_svd_filter(&s, 5, DEFAULT_BINARIZE_THRESHOLD).unwrap();
        assert_eq!(edge_set(&out), edge_set(&s));
        // Idempotent at the same rank.
        let again = gnn_svd_filter(&out, 5, DEFAULT_BINARIZE_THRESHOLD).unwrap();
        assert_eq!(edge_set(&again), edge_set(&out));
    }

    #[test]
    fn two_cliques_survive_rank_two() {
        // Disjoint 3-cliques: the two dominant singular directions are the
        // block indicators, and binarization restores both cliques exactly.
        let s = sub(6, &[(0, 1), (0, 2), (1, 2), (3, 4), (3, 5), (4, 5)]);
        let out = gnn_svd_filter(&s, 2, DEFAULT_BINARIZE_THRESHOLD).unwrap();
        assert_eq!(edge_set(&out), edge_set(&s));
    }

    #[test]
    fn output_is_symmetric_zero_diagonal_binary() {
        let s = sub(6, &[(0, 1), (1, 2), (2, 3), (4, 5), (0, 5), (2, 5), (1, 4)]);
        let out = gnn_svd_filter(&s, 2, DEFAULT_BINARIZE_THRESHOLD).unwrap();
        for &(u, v) in &out.edges {
            assert!(u < v, "stored once per unordered pair");
            assert_ne!(u, v, "no self-loops");
            assert!(v < 6);
        }
        let set = edge_set(&out);
        assert_eq!(set.len(), out.edges.len(), "no duplicates");
        // Features untouched.
        assert_eq!(out.features, s.features);
    }

    #[test]
    fn rank_zero_and_empty_rejected() {
        let s = sub(3, &[(0, 1)]);
        assert!(gnn_svd_filter(&s, 0, 0.5).is_err());
        let empty = PromptedSubgraph {
            label: 0,
            edges: vec![],
            features: DMatrix::zeros(0, 3),
            ego_len: 0,
            token_spans: vec![],
        };
        assert!(gnn_svd_filter(&empty, 1, 0.5).is_err());
    }

    #[test]
    fn feature_noise_moments() {
        let s = sub(2, &[(0, 1)]);
        // Mean of (out - in) over many seeds within 3 sigma / sqrt(N); std
        // within 5% of sigma.
        let sigma = 0.1;
        let n_seeds = 10_000usize;
        let mut diffs = Vec::with_capacity(n_seeds);
        for seed in 0..n_seeds as u64 {
            let out = inject_feature_noise(&s, sigma, seed).unwrap();
            diffs.push(out.features[(0, 0)] - s.features[(0, 0)]);
        }
        let mean = diffs.iter().sum::<f64>() / n_seeds as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n_seeds as f64;
        assert!(mean.abs() <= 3.0 * sigma / (n_seeds as f64).sqrt(), "mean {mean}");
        assert!((var.sqrt() - sigma).abs() <= 0.05 * sigma, "std {}", var.sqrt());

        // Topology untouched; deterministic per seed.
        let out = inject_feature_noise(&s, sigma, 7).unwrap();
        assert_eq!(out.edges, s.edges);
        assert_eq!(out.features, inject_feature_noise(&s, sigma, 7).unwrap().features);
    }

    #[test]
    fn embedding_noise_moments_and_determinism() {
        let z = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let sigma = 0.1;
        let n_seeds = 10_000usize;
        let mut diffs = Vec::with_capacity(n_seeds);
        for seed in 0..n_seeds as u64 {
            let out = inject_embedding_noise(&z, sigma, seed).unwrap();
            diffs.push(out[1] - z[1]);
        }
        let mean = diffs.iter().sum::<f64>() / n_seeds as f64;
        let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n_seeds as f64;
        assert!(mean.abs() <= 3.0 * sigma / (n_seeds as f64).sqrt(), "mean {mean}");
        assert!((var.sqrt() - sigma).abs() <= 0.05 * sigma, "std {}", var.sqrt());

        assert_eq!(
            inject_embedding_noise(&z, sigma, 3).unwrap(),
            inject_embedding_noise(&z, sigma, 3).unwrap()
        );
        assert_eq!(z.len(), inject_embedding_noise(&z, sigma, 3).unwrap().len());
    }

    #[test]
    fn tiny_sigma_converges_to_input() {
        let s = sub(2, &[(0, 1)]);
        let out = inject_feature_noise(&s, 1e-12, 5).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                assert_relative_eq!(out.features[(r, c)], s.features[(r, c)], epsilon = 1e-10);
            }
        }
        assert!(inject_feature_noise(&s, 0.0, 5).is_err());
        assert!(inject_feature_noise(&s, -0.1, 5).is_err());
    }

    #[test]
    fn defense_config_deserializes() {
        let cfg: DefenseConfig = serde_json::from_str(r#"{"kind":"gnn_svd"}"#).unwrap();
        assert_eq!(
            cfg,
            DefenseConfig::GnnSvd { rank: 10, binarize_threshold: 0.5 }
        );
        let cfg: DefenseConfig = serde_json::from_str(r#"{"kind":"noisy_fea","sigma":0.2}"#).unwrap();
        assert_eq!(cfg, DefenseConfig::NoisyFea { sigma: 0.2 });
        let cfg: DefenseConfig = serde_json::from_str(r#"{"kind":"none"}"#).unwrap();
        assert_eq!(cfg, DefenseConfig::None);
    }
}
