//! Contrastive pretraining of the GCN over augmented ego-network views.
//!
//! Each ego-network yields two views by independent edge dropping and
//! feature-column masking. Within a batch, each anchor's first view is
//! pulled toward its own second view and pushed from every other member's
//! second view via the temperature-scaled NT-Xent loss with cosine
//! similarity. Plain gradient descent with weight decay; no adaptive
//! optimizer.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{backward_pass, forward_cached, init_gnn_params, FrozenFlags, GnnParams};
use crate::graph::EgoNetwork;
use crate::metrics::cosine;
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PretrainConfig {
    pub temperature: f64,
    pub edge_drop_rate: f64,
    pub feature_mask_rate: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            temperature: 0.5,
            edge_drop_rate: 0.2,
            feature_mask_rate: 0.2,
            epochs: 100,
            learning_rate: 0.01,
            weight_decay: 1e-4,
            batch_size: 10,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 {
            return Err(Error::InvalidParameter {
                msg: format!("temperature must be positive, got {}", self.temperature),
            });
        }
        for (name, rate) in
            [("edge_drop_rate", self.edge_drop_rate), ("feature_mask_rate", self.feature_mask_rate)]
        {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::InvalidParameter {
                    msg: format!("{name} must be in [0,1), got {rate}"),
                });
            }
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidParameter { msg: "batch_size must be >= 2".into() });
        }
        Ok(())
    }
}

/// Two augmented copies of an ego-network: each edge survives independently
/// with probability 1 - edge_drop_rate, each feature column is zeroed
/// independently with probability feature_mask_rate. Nodes are never
/// removed, so the center always survives. Deterministic per seed.
pub fn augment_views(
    ego: &EgoNetwork,
    config: &PretrainConfig,
    seed: u64,
) -> (EgoNetwork, EgoNetwork) {
    let v1 = augment_once(ego, config, derive_seed(seed, 1));
    let v2 = augment_once(ego, config, derive_seed(seed, 2));
    (v1, v2)
}

fn augment_once(ego: &EgoNetwork, config: &PretrainConfig, seed: u64) -> EgoNetwork {
    let mut rng = rng_from_seed(seed);
    let mut out = ego.clone();
    out.local_edges = ego
        .local_edges
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() >= config.edge_drop_rate)
        .collect();
    for c in 0..out.features.ncols() {
        if rng.random::<f64>() < config.feature_mask_rate {
            for r in 0..out.features.nrows() {
                out.features[(r, c)] = 0.0;
            }
        }
    }
    out
}

/// NT-Xent over one batch: anchors are the first views; for anchor v the
/// positive is its own second view and the negatives are every other second
/// view. Returns the mean per-anchor loss and the gradients with respect to
/// each view embedding.
pub fn nt_xent(
    z1: &[DVector<f64>],
    z2: &[DVector<f64>],
    temperature: f64,
) -> Result<(f64, Vec<DVector<f64>>, Vec<DVector<f64>>)> {
    let n = z1.len();
    if n != z2.len() {
        return Err(Error::DimensionMismatch { msg: "view batches differ in length".into() });
    }
    if n < 2 {
        return Err(Error::InvalidParameter {
            msg: "contrastive batch needs at least 2 members (negatives must exist)".into(),
        });
    }
    let dim = z1[0].len();
    let mut sim = vec![vec![0.0; n]; n];
    for v in 0..n {
        for u in 0..n {
            sim[v][u] = cosine(z1[v].as_slice(), z2[u].as_slice()) / temperature;
        }
    }

    let mut loss = 0.0;
    let mut d_sim = vec![vec![0.0; n]; n];
    for v in 0..n {
        let max_neg =
            (0..n).filter(|&u| u != v).map(|u| sim[v][u]).fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = (0..n).filter(|&u| u != v).map(|u| (sim[v][u] - max_neg).exp()).sum();
        loss += -sim[v][v] + max_neg + sum_exp.ln();
        d_sim[v][v] -= 1.0;
        for u in 0..n {
            if u != v {
                d_sim[v][u] += (sim[v][u] - max_neg).exp() / sum_exp;
            }
        }
    }
    loss /= n as f64;

    let mut dz1 = vec![DVector::zeros(dim); n];
    let mut dz2 = vec![DVector::zeros(dim); n];
    let scale = 1.0 / (n as f64 * temperature);
    for v in 0..n {
        for u in 0..n {
            let coeff = d_sim[v][u] * scale;
            if coeff == 0.0 {
                continue;
            }
            dz1[v] += dcos(&z1[v], &z2[u]) * coeff;
            dz2[u] += dcos(&z2[u], &z1[v]) * coeff;
        }
    }
    Ok((loss, dz1, dz2))
}

/// d cos(a, b) / da; zero when either vector is zero, matching the cosine
/// convention.
fn dcos(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return DVector::zeros(a.len());
    }
    let cos = a.dot(b) / (na * nb);
    (b / nb - a * (cos / na)) / na
}

/// Pretraining outcome: trained parameters (GNN blocks frozen) plus the
/// per-epoch mean contrastive loss curve.
pub struct PretrainOutcome {
    pub params: GnnParams,
    pub epoch_losses: Vec<f64>,
}

/// Contrastive pretraining from scratch. The classifier head exists but is
/// untouched by the pretext task; returned parameters carry frozen GNN
/// blocks ready for prompt tuning.
pub fn pretrain_contrastive(
    egos: &[EgoNetwork],
    config: &PretrainConfig,
    hidden_dim: usize,
) -> Result<PretrainOutcome> {
    config.validate()?;
    if egos.len() < 2 {
        return Err(Error::InvalidParameter {
            msg: "pretraining needs at least 2 ego-networks".into(),
        });
    }
    let in_dim = egos[0].features.ncols();
    let num_labels = egos.iter().map(|e| e.label).max().unwrap() + 1;
    let mut params = init_gnn_params(in_dim, hidden_dim, num_labels, derive_seed(config.seed, 10));
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..egos.len()).collect();
        let mut shuffle_rng = rng_from_seed(derive_seed(config.seed, 1000 + epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut start = 0usize;
        while start < order.len() {
            let mut end = (start + config.batch_size).min(order.len());
            // A trailing singleton has no negatives; fold it into this batch.
            if order.len() - end == 1 {
                end = order.len();
            }
            let batch = &order[start..end];
            start = end;
            if batch.len() < 2 {
                break; // only possible when the whole set is a single ego, rejected above
            }

            let mut caches1 = Vec::with_capacity(batch.len());
            let mut caches2 = Vec::with_capacity(batch.len());
            let mut z1 = Vec::with_capacity(batch.len());
            let mut z2 = Vec::with_capacity(batch.len());
            for &idx in batch {
                let aug_seed = derive_seed(config.seed, ((epoch as u64) << 32) ^ idx as u64);
                let (v1, v2) = augment_views(&egos[idx], config, aug_seed);
                let c1 = forward_cached(&params, &v1)?;
                let c2 = forward_cached(&params, &v2)?;
                z1.push(c1.z.clone());
                z2.push(c2.z.clone());
                caches1.push(c1);
                caches2.push(c2);
            }
            let (loss, dz1, dz2) = nt_xent(&z1, &z2, config.temperature)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite { stage: "pretrain loss".into() });
            }
            epoch_loss += loss * batch.len() as f64;
            seen += batch.len();

            let zero_logits = DVector::zeros(num_labels);
            let mut acc1 = params.layer1.clone_owned() * 0.0;
            let mut acc2 = params.layer2.clone_owned() * 0.0;
            for i in 0..batch.len() {
                let g1 = backward_pass(&params, &caches1[i], &zero_logits, &dz1[i]);
                let g2 = backward_pass(&params, &caches2[i], &zero_logits, &dz2[i]);
                acc1 += g1.layer1 + g2.layer1;
                acc2 += g1.layer2 + g2.layer2;
            }
            let lr = config.learning_rate;
            let wd = config.weight_decay;
            params.layer1 -= (acc1 + &params.layer1 * wd) * lr;
            params.layer2 -= (acc2 + &params.layer2 * wd) * lr;
        }
        epoch_losses.push(epoch_loss / seen as f64);
    }

    params.frozen = FrozenFlags::frozen_backbone();
    Ok(PretrainOutcome { params, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{backprop_grads, LossHead};
    use crate::graph::SubgraphLike;
    use crate::sbm::{generate_sbm, SbmConfig};
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn ego_with_edges(edge_count: usize) -> EgoNetwork {
        let n = edge_count + 1;
        let edges: Vec<(usize, usize)> = (0..edge_count).map(|i| (i, i + 1)).collect();
        EgoNetwork {
            center: 0,
            nodes: (0..n).collect(),
            local_edges: edges,
            features: DMatrix::from_fn(n, 4, |r, c| (r + c) as f64),
            label: 0,
            hops: 1,
        }
    }

    #[test]
    fn zero_rates_copy_input() {
        let ego = ego_with_edges(5);
        let cfg = PretrainConfig { edge_drop_rate: 0.0, feature_mask_rate: 0.0, ..Default::default() };
        let (v1, v2) = augment_views(&ego, &cfg, 3);
        assert_eq!(v1, ego);
        assert_eq!(v2, ego);
    }

    #[test]
    fn full_edge_drop_gives_edgeless_views() {
        let ego = ego_with_edges(5);
        let cfg = PretrainConfig { edge_drop_rate: 0.999999, ..Default::default() };
        let (v1, v2) = augment_views(&ego, &cfg, 3);
        assert!(v1.local_edges.is_empty());
        assert!(v2.local_edges.is_empty());
        assert_eq!(v1.node_count(), ego.node_count());
    }

    #[test]
    fn augmentation_is_deterministic_per_seed() {
        let ego = ego_with_edges(8);
        let cfg = PretrainConfig::default();
        let a = augment_views(&ego, &cfg, 42);
        let b = augment_views(&ego, &cfg, 42);
        assert_eq!(a, b);
        let c = augment_views(&ego, &cfg, 43);
        assert!(a != c || ego.local_edges.is_empty());
    }

    #[test]
    fn edge_survival_rate_monte_carlo() {
        // 10-edge ego, drop rate 0.5, 1000 seeds: mean survivors 5 +- 0.5.
        let ego = ego_with_edges(10);
        let cfg = PretrainConfig { edge_drop_rate: 0.5, feature_mask_rate: 0.0, ..Default::default() };
        let total: usize =
            (0..1000).map(|s| augment_views(&ego, &cfg, s).0.local_edges.len()).sum();
        let mean = total as f64 / 1000.0;
        assert!((mean - 5.0).abs() <= 0.5, "mean survivors {mean}");
    }

    #[test]
    fn identical_embeddings_give_log_n_minus_one() {
        for n in [2usize, 4, 8] {
            let z = vec![DVector::from_vec(vec![0.3, -0.7, 0.2]); n];
            let (loss, _, _) = nt_xent(&z, &z, 0.5).unwrap();
            assert_relative_eq!(loss, ((n - 1) as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn batch_of_one_rejected() {
        let z = vec![DVector::from_vec(vec![1.0, 0.0])];
        assert!(nt_xent(&z, &z, 0.5).is_err());

        let ego = ego_with_edges(2);
        let cfg = PretrainConfig { epochs: 1, ..Default::default() };
        assert!(pretrain_contrastive(&[ego], &cfg, 8).is_err());
    }

    #[test]
    fn nt_xent_gradients_match_finite_differences() {
        let mut rng = crate::rng::rng_from_seed(5);
        let n = 4;
        let dim = 3;
        let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
            (0..n)
                .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-1.0..1.0f64)))
                .collect::<Vec<_>>()
        };
        let z1 = mk(&mut rng);
        let z2 = mk(&mut rng);
        let (_, dz1, dz2) = nt_xent(&z1, &z2, 0.5).unwrap();
        let eps = 1e-6;
        for (views, grads, other, first) in
            [(z1.clone(), &dz1, z2.clone(), true), (z2.clone(), &dz2, z1.clone(), false)]
        {
            for v in 0..n {
                for d in 0..dim {
                    let mut up = views.clone();
                    up[v][d] += eps;
                    let mut down = views.clone();
                    down[v][d] -= eps;
                    let (lu, ld) = if first {
                        (
                            nt_xent(&up, &other, 0.5).unwrap().0,
                            nt_xent(&down, &other, 0.5).unwrap().0,
                        )
                    } else {
                        (
                            nt_xent(&other, &up, 0.5).unwrap().0,
                            nt_xent(&other, &down, 0.5).unwrap().0,
                        )
                    };
                    let numeric = (lu - ld) / (2.0 * eps);
                    let analytic = grads[v][d];
                    assert!(
                        (analytic - numeric).abs() <= 1e-5 * analytic.abs().max(numeric.abs()).max(1e-3),
                        "view grad mismatch: {analytic} vs {numeric}"
                    );
                }
            }
        }
    }

    #[test]
    fn pretraining_descends_and_freezes() {
        let (graph, _) = generate_sbm(&SbmConfig {
            classes: 2,
            nodes_per_class: 20,
            p_in: 0.4,
            p_out: 0.05,
            feature_dim: 6,
            class_sep: 2.0,
            train_frac: 0.5,
            seed: 3,
        })
        .unwrap();
        let adj = graph.adjacency();
        let egos: Vec<EgoNetwork> = (0..40)
            .map(|v| crate::graph::ego_network_with_adjacency(&graph, &adj, v, 1).unwrap())
            .collect();
        let cfg = PretrainConfig { epochs: 100, seed: 9, ..Default::default() };
        let out = pretrain_contrastive(&egos, &cfg, 8).unwrap();
        assert_eq!(out.epoch_losses.len(), 100);
        assert!(
            out.epoch_losses[99] < out.epoch_losses[0],
            "no descent: first {} final {}",
            out.epoch_losses[0],
            out.epoch_losses[99]
        );
        assert!(out.params.frozen.layer1 && out.params.frozen.layer2);
        assert!(!out.params.frozen.classifier);

        // Trained parameters remain usable for supervised heads.
        let g = backprop_grads(&out.params, &egos[0], &LossHead::CrossEntropy { label: 0 });
        assert!(g.is_ok());
    }

    #[test]
    fn pretraining_never_mutates_inputs() {
        let ego = ego_with_edges(4);
        let egos = vec![ego.clone(), ego_with_edges(3), ego_with_edges(5)];
        let snapshot = egos.clone();
        let cfg = PretrainConfig { epochs: 2, ..Default::default() };
        pretrain_contrastive(&egos, &cfg, 6).unwrap();
        assert_eq!(egos, snapshot);
    }

    #[test]
    fn config_validation() {
        let mut cfg = PretrainConfig::default();
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        cfg = PretrainConfig { edge_drop_rate: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
