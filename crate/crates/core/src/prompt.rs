//! All-in-One-style graph prompts: a small matrix of learnable token
//! features plus similarity-thresholded link rules, attached to ego-networks
//! before the frozen GCN consumes them.
//!
//! Link rules: an inner edge between tokens i and j exists iff
//! sigma(p_i . p_j) >= inner threshold; a cross edge between token i and an
//! existing node u exists iff sigma(p_i . x_u) >= cross threshold. A token
//! that gains no cross edge is attached to its single most-similar node so
//! mean readout cannot erase it. Both link sets are deterministic functions
//! of the current token features, recomputed on every tuning step; within a
//! step the structure is treated as fixed and gradients flow through the
//! token features only.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{backprop_grads, Classifier, GnnParams, LossHead};
use crate::graph::{EgoNetwork, SubgraphLike};
use crate::rng::{derive_seed, rng_from_seed};

pub const DEFAULT_INNER_THRESHOLD: f64 = 0.3;
pub const DEFAULT_CROSS_THRESHOLD: f64 = 0.1;

/// Learnable graph prompt. Zero tokens is a valid no-op prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPrompt {
    /// token_count x in_dim.
    pub token_features: DMatrix<f64>,
    pub inner_prune_threshold: f64,
    pub cross_prune_threshold: f64,
    pub learnable: bool,
}

impl GraphPrompt {
    pub fn token_count(&self) -> usize {
        self.token_features.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.token_features.ncols()
    }
}

/// Gaussian token features (std 0.1), seeded; default thresholds 0.3 inner
/// and 0.1 cross.
pub fn init_prompt(token_count: usize, in_dim: usize, seed: u64) -> GraphPrompt {
    let mut rng = rng_from_seed(seed);
    let token_features = DMatrix::from_fn(token_count, in_dim, |_, _| {
        let n: f64 = StandardNormal.sample(&mut rng);
        n * 0.1
    });
    GraphPrompt {
        token_features,
        inner_prune_threshold: DEFAULT_INNER_THRESHOLD,
        cross_prune_threshold: DEFAULT_CROSS_THRESHOLD,
        learnable: true,
    }
}

/// An ego-network with zero or more prompts attached. Rows 0..ego_len are
/// the original ego nodes (center at 0); each attached prompt appends a
/// token span recorded in insertion order so gradients can be routed back
/// to the right token features.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptedSubgraph {
    pub label: usize,
    pub edges: Vec<(usize, usize)>,
    pub features: DMatrix<f64>,
    pub ego_len: usize,
    pub token_spans: Vec<(usize, usize)>,
}

impl SubgraphLike for PromptedSubgraph {
    fn node_count(&self) -> usize {
        self.features.nrows()
    }
    fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
    fn features(&self) -> &DMatrix<f64> {
        &self.features
    }
}

impl From<&EgoNetwork> for PromptedSubgraph {
    fn from(ego: &EgoNetwork) -> Self {
        PromptedSubgraph {
            label: ego.label,
            edges: ego.local_edges.clone(),
            features: ego.features.clone(),
            ego_len: ego.nodes.len(),
            token_spans: Vec::new(),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Attach a prompt to a (possibly already prompted) subgraph. Original
/// edges are never deleted or rewired; token rows are appended after all
/// existing rows, and cross links are computed against every existing row.
pub fn insert_prompt(base: &PromptedSubgraph, prompt: &GraphPrompt) -> Result<PromptedSubgraph> {
    if prompt.token_count() == 0 {
        return Ok(base.clone());
    }
    if prompt.in_dim() != base.features.ncols() {
        return Err(Error::DimensionMismatch {
            msg: format!(
                "prompt tokens have dim {}, subgraph features have dim {}",
                prompt.in_dim(),
                base.features.ncols()
            ),
        });
    }
    let n = base.node_count();
    let t = prompt.token_count();
    let dim = base.features.ncols();

    let mut features = DMatrix::zeros(n + t, dim);
    features.view_mut((0, 0), (n, dim)).copy_from(&base.features);
    features.view_mut((n, 0), (t, dim)).copy_from(&prompt.token_features);

    let mut edges = base.edges.clone();
    for i in 0..t {
        let mut best: Option<(usize, f64)> = None;
        let mut has_cross = false;
        for u in 0..n {
            let dot: f64 =
                (0..dim).map(|c| prompt.token_features[(i, c)] * base.features[(u, c)]).sum();
            if sigmoid(dot) >= prompt.cross_prune_threshold {
                edges.push((u, n + i));
                has_cross = true;
            }
            match best {
                Some((_, bd)) if bd >= dot => {}
                _ => best = Some((u, dot)),
            }
        }
        if !has_cross {
            let (u, _) = best.expect("subgraph has at least the center node");
            edges.push((u, n + i));
        }
        for j in (i + 1)..t {
            let dot: f64 = (0..dim)
                .map(|c| prompt.token_features[(i, c)] * prompt.token_features[(j, c)])
                .sum();
            if sigmoid(dot) >= prompt.inner_prune_threshold {
                edges.push((n + i, n + j));
            }
        }
    }

    let mut token_spans = base.token_spans.clone();
    token_spans.push((n, t));
    Ok(PromptedSubgraph { label: base.label, edges, features, ego_len: base.ego_len, token_spans })
}

/// Knobs for prompt tuning. An epoch is one pass over the shuffled training
/// list in batches; the default is 10 adaptation steps with batches of 10.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TuneOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TuneOptions {
    fn default() -> Self {
        TuneOptions { epochs: 10, learning_rate: 0.01, batch_size: 10, seed: 0 }
    }
}

/// Tuned prompt and classifier plus the mean training cross-entropy per
/// epoch.
pub struct TuneOutcome {
    pub prompt: GraphPrompt,
    pub classifier: Classifier,
    pub epoch_losses: Vec<f64>,
}

/// Task-specific tuning against a frozen GNN: gradient descent on
/// cross-entropy over prompted subgraphs, updating token features and the
/// classifier only. Link sets are recomputed from the updated features each
/// step; the GNN layer weights are untouched.
///
/// Training items may already carry other prompts (e.g. an attached
/// trigger); the tuned prompt is inserted on top and each item's `label`
/// field is the supervision target.
pub fn tune_prompt(
    frozen_params: &GnnParams,
    prompt: &GraphPrompt,
    training: &[PromptedSubgraph],
    opts: &TuneOptions,
) -> Result<TuneOutcome> {
    if training.is_empty() {
        return Err(Error::EmptyInput { msg: "tune_prompt needs training subgraphs".into() });
    }
    if opts.epochs == 0 {
        return Err(Error::InvalidParameter { msg: "epochs must be >= 1".into() });
    }
    if !frozen_params.frozen.layer1 || !frozen_params.frozen.layer2 {
        return Err(Error::InvalidParameter { msg: "tune_prompt requires frozen GNN blocks".into() });
    }

    let mut prompt = prompt.clone();
    let mut params = frozen_params.clone();
    params.frozen.classifier = false;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);

    for epoch in 0..opts.epochs {
        let mut order: Vec<usize> = (0..training.len()).collect();
        let mut rng = rng_from_seed(derive_seed(opts.seed, 2000 + epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(opts.batch_size.max(1)) {
            let mut d_tokens = DMatrix::zeros(prompt.token_count(), prompt.in_dim());
            let mut d_cls_w =
                DMatrix::zeros(params.classifier.weights.nrows(), params.classifier.weights.ncols());
            let mut d_cls_b = nalgebra::DVector::zeros(params.classifier.bias.len());
            for &idx in batch {
                let item = &training[idx];
                let prompted = insert_prompt(item, &prompt)?;
                let grads = backprop_grads(
                    &params,
                    &prompted,
                    &LossHead::CrossEntropy { label: item.label },
                )?;
                epoch_loss += grads.loss;
                let (start, len) = *prompted.token_spans.last().expect("prompt span recorded");
                if len > 0 {
                    d_tokens += grads.features.view((start, 0), (len, prompt.in_dim()));
                }
                d_cls_w += grads.classifier_weights;
                d_cls_b += grads.classifier_bias;
            }
            let scale = opts.learning_rate / batch.len() as f64;
            if prompt.learnable {
                prompt.token_features -= d_tokens * scale;
            }
            params.classifier.weights -= d_cls_w * scale;
            params.classifier.bias -= d_cls_b * scale;
        }
        epoch_losses.push(epoch_loss / training.len() as f64);
    }

    debug_assert_eq!(params.layer1, frozen_params.layer1);
    debug_assert_eq!(params.layer2, frozen_params.layer2);
    Ok(TuneOutcome { prompt, classifier: params.classifier, epoch_losses })
}

/// Convenience wrapper: wrap bare ego-networks and tune.
pub fn tune_prompt_on_egos(
    frozen_params: &GnnParams,
    prompt: &GraphPrompt,
    training_egos: &[EgoNetwork],
    opts: &TuneOptions,
) -> Result<TuneOutcome> {
    let items: Vec<PromptedSubgraph> = training_egos.iter().map(PromptedSubgraph::from).collect();
    tune_prompt(frozen_params, prompt, &items, opts)
}
