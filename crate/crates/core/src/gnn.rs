//! Minimal two-layer GCN with hand-written gradients.
//!
//! Forward: H1 = ReLU(A_hat X W1), H2 = ReLU(A_hat H1 W2) with A_hat the
//! symmetric renormalized adjacency (self-loops added), graph embedding =
//! row mean of H2, then a linear classifier with bias. GCN layers have no
//! bias. Backward passes are exact analytic gradients; they also return
//! gradients with respect to the input features, which is how prompt-token
//! tuning gets its signal.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::SubgraphLike;
use crate::metrics::cosine;
use crate::rng::rng_from_seed;

/// Linear classification head: `hidden x num_labels` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl Classifier {
    pub fn num_labels(&self) -> usize {
        self.weights.ncols()
    }

    /// Logits for a graph embedding.
    pub fn logits(&self, z: &DVector<f64>) -> DVector<f64> {
        self.weights.transpose() * z + &self.bias
    }
}

/// Which parameter blocks are frozen. Frozen blocks are bit-identical
/// before and after any tuning step and receive zero gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FrozenFlags {
    pub layer1: bool,
    pub layer2: bool,
    pub classifier: bool,
}

impl FrozenFlags {
    /// GNN blocks frozen, classifier tunable: the downstream-task setting.
    pub fn frozen_backbone() -> Self {
        FrozenFlags { layer1: true, layer2: true, classifier: false }
    }
}

/// Weights of the two GCN layers plus the downstream classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    /// in_dim x hidden.
    pub layer1: DMatrix<f64>,
    /// hidden x hidden.
    pub layer2: DMatrix<f64>,
    pub classifier: Classifier,
    pub frozen: FrozenFlags,
}

impl GnnParams {
    pub fn in_dim(&self) -> usize {
        self.layer1.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.layer1.ncols()
    }

    pub fn num_labels(&self) -> usize {
        self.classifier.num_labels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer2.nrows() != self.hidden_dim()
            || self.layer2.ncols() != self.hidden_dim()
            || self.classifier.weights.nrows() != self.hidden_dim()
            || self.classifier.bias.len() != self.num_labels()
        {
            return Err(Error::DimensionMismatch {
                msg: "parameter dimension chain is broken".into(),
            });
        }
        Ok(())
    }
}

/// Gaussian initialization with std (2 / fan_in)^{1/2}, seeded; classifier
/// bias starts at zero.
pub fn init_gnn_params(in_dim: usize, hidden: usize, num_labels: usize, seed: u64) -> GnnParams {
    let mut rng = rng_from_seed(seed);
    let mut gaussian = |rows: usize, cols: usize, fan_in: usize| {
        let std = (2.0 / fan_in as f64).sqrt();
        DMatrix::from_fn(rows, cols, |_, _| {
            let n: f64 = StandardNormal.sample(&mut rng);
            n * std
        })
    };
    let layer1 = gaussian(in_dim, hidden, in_dim);
    let layer2 = gaussian(hidden, hidden, hidden);
    let weights = gaussian(hidden, num_labels, hidden);
    GnnParams {
        layer1,
        layer2,
        classifier: Classifier { weights, bias: DVector::zeros(num_labels) },
        frozen: FrozenFlags::default(),
    }
}

/// Symmetric renormalized adjacency D^{-1/2} (A + I) D^{-1/2}.
pub fn normalized_adjacency(node_count: usize, edges: &[(usize, usize)]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(node_count, node_count);
    for i in 0..node_count {
        a[(i, i)] = 1.0;
    }
    for &(u, v) in edges {
        a[(u, v)] = 1.0;
        a[(v, u)] = 1.0;
    }
    let mut inv_sqrt_deg = vec![0.0; node_count];
    for i in 0..node_count {
        let d: f64 = a.row(i).sum();
        inv_sqrt_deg[i] = 1.0 / d.sqrt();
    }
    for r in 0..node_count {
        for c in 0..node_count {
            a[(r, c)] *= inv_sqrt_deg[r] * inv_sqrt_deg[c];
        }
    }
    a
}

/// Everything a backward pass needs from the forward pass.
pub struct ForwardCache {
    pub a_hat: DMatrix<f64>,
    pub x: DMatrix<f64>,
    pub pre1: DMatrix<f64>,
    pub h1: DMatrix<f64>,
    pub pre2: DMatrix<f64>,
    pub h2: DMatrix<f64>,
    pub z: DVector<f64>,
    pub logits: DVector<f64>,
    pub softmax: DVector<f64>,
}

/// Forward outputs at the spec surface.
pub struct GcnOutput {
    pub node_embeddings: DMatrix<f64>,
    pub graph_embedding: DVector<f64>,
    pub logits: DVector<f64>,
    pub softmax: DVector<f64>,
}

pub fn softmax(logits: &DVector<f64>) -> DVector<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    DVector::from_vec(exps.into_iter().map(|e| e / sum).collect())
}

fn relu(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { v } else { 0.0 })
}

fn relu_mask(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Full forward pass with cache retained for backprop.
pub fn forward_cached<S: SubgraphLike>(params: &GnnParams, sub: &S) -> Result<ForwardCache> {
    let x = sub.features().clone();
    if x.ncols() != params.in_dim() {
        return Err(Error::DimensionMismatch {
            msg: format!("features have dim {}, layer1 expects {}", x.ncols(), params.in_dim()),
        });
    }
    if sub.node_count() == 0 {
        return Err(Error::EmptyInput { msg: "subgraph has no nodes".into() });
    }
    let a_hat = normalized_adjacency(sub.node_count(), sub.edges());
    let pre1 = &a_hat * &x * &params.layer1;
    let h1 = relu(&pre1);
    let pre2 = &a_hat * &h1 * &params.layer2;
    let h2 = relu(&pre2);
    let n = h2.nrows() as f64;
    let z = DVector::from_fn(h2.ncols(), |c, _| h2.column(c).sum() / n);
    let logits = params.classifier.logits(&z);
    let softmax_out = softmax(&logits);
    Ok(ForwardCache { a_hat, x, pre1, h1, pre2, h2, z, logits, softmax: softmax_out })
}

/// GCN forward pass: node embeddings, mean-readout graph embedding, logits,
/// softmax.
pub fn gcn_forward<S: SubgraphLike>(params: &GnnParams, sub: &S) -> Result<GcnOutput> {
    let cache = forward_cached(params, sub)?;
    Ok(GcnOutput {
        node_embeddings: cache.h2,
        graph_embedding: cache.z,
        logits: cache.logits,
        softmax: cache.softmax,
    })
}

/// Centroid-difference hinge: weight * max(0, margin - CF) where
/// CF = cos(z, positive) - cos(z, negative). Centroids are treated as
/// constants.
#[derive(Debug, Clone)]
pub struct HingeSpec {
    pub positive: DVector<f64>,
    pub negative: DVector<f64>,
    pub weight: f64,
    pub margin: f64,
}

/// Scalar loss heads the backward pass understands.
#[derive(Debug, Clone)]
pub enum LossHead {
    /// Constant loss; every gradient is zero.
    Constant(f64),
    /// Cross-entropy of the softmax at `label`.
    CrossEntropy { label: usize },
    /// Hinge on the centroid difference of the graph embedding.
    CentroidHinge(HingeSpec),
    /// Cross-entropy plus the centroid hinge, as used on poisoned samples.
    CrossEntropyWithHinge { label: usize, hinge: HingeSpec },
}

thread_local! {
    static CONSTRAINT_EVALS: std::cell::Cell<u64> = const { std::cell::Cell::new(0) };
}

/// Number of centroid-constraint evaluations on this thread since the last
/// reset. Training is single-threaded per pipeline, so the black-box path
/// can be instrumented to prove it never evaluates the constraint.
pub fn constraint_eval_count() -> u64 {
    CONSTRAINT_EVALS.with(|c| c.get())
}

pub fn reset_constraint_eval_count() {
    CONSTRAINT_EVALS.with(|c| c.set(0));
}

fn hinge_value(z: &DVector<f64>, h: &HingeSpec) -> f64 {
    CONSTRAINT_EVALS.with(|c| c.set(c.get() + 1));
    let cf = cosine(z.as_slice(), h.positive.as_slice()) - cosine(z.as_slice(), h.negative.as_slice());
    h.weight * (h.margin - cf).max(0.0)
}

/// d cos(z, c) / dz, with the zero-vector convention mapping to zero.
fn dcos_dz(z: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
    let nz = z.norm();
    let nc = c.norm();
    if nz == 0.0 || nc == 0.0 {
        return DVector::zeros(z.len());
    }
    let cos = z.dot(c) / (nz * nc);
    (c / nc - z * (cos / nz)) / nz
}

fn hinge_grad_z(z: &DVector<f64>, h: &HingeSpec) -> DVector<f64> {
    let cf = cosine(z.as_slice(), h.positive.as_slice()) - cosine(z.as_slice(), h.negative.as_slice());
    if h.margin - cf <= 0.0 {
        return DVector::zeros(z.len());
    }
    (dcos_dz(z, &h.negative) - dcos_dz(z, &h.positive)) * h.weight
}

impl LossHead {
    /// Loss value given a completed forward pass.
    pub fn value(&self, cache: &ForwardCache) -> f64 {
        match self {
            LossHead::Constant(v) => *v,
            LossHead::CrossEntropy { label } => cross_entropy(&cache.logits, *label),
            LossHead::CentroidHinge(h) => hinge_value(&cache.z, h),
            LossHead::CrossEntropyWithHinge { label, hinge } => {
                cross_entropy(&cache.logits, *label) + hinge_value(&cache.z, hinge)
            }
        }
    }

    /// Gradients with respect to logits and to the graph embedding.
    fn seed_grads(&self, cache: &ForwardCache) -> (DVector<f64>, DVector<f64>) {
        let labels = cache.logits.len();
        let hidden = cache.z.len();
        match self {
            LossHead::Constant(_) => (DVector::zeros(labels), DVector::zeros(hidden)),
            LossHead::CrossEntropy { label } => {
                let mut d = cache.softmax.clone();
                d[*label] -= 1.0;
                (d, DVector::zeros(hidden))
            }
            LossHead::CentroidHinge(h) => (DVector::zeros(labels), hinge_grad_z(&cache.z, h)),
            LossHead::CrossEntropyWithHinge { label, hinge } => {
                let mut d = cache.softmax.clone();
                d[*label] -= 1.0;
                (d, hinge_grad_z(&cache.z, hinge))
            }
        }
    }
}

/// Numerically stable -log softmax(logits)[label].
pub fn cross_entropy(logits: &DVector<f64>, label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Gradient record mirroring [`GnnParams`], plus the gradient with respect
/// to the input feature rows (prompt tokens live there).
#[derive(Debug, Clone)]
pub struct GnnGrads {
    pub layer1: DMatrix<f64>,
    pub layer2: DMatrix<f64>,
    pub classifier_weights: DMatrix<f64>,
    pub classifier_bias: DVector<f64>,
    pub features: DMatrix<f64>,
    pub loss: f64,
}

impl GnnGrads {
    pub fn zeros_like(params: &GnnParams, feature_rows: usize) -> Self {
        GnnGrads {
            layer1: DMatrix::zeros(params.layer1.nrows(), params.layer1.ncols()),
            layer2: DMatrix::zeros(params.layer2.nrows(), params.layer2.ncols()),
            classifier_weights: DMatrix::zeros(
                params.classifier.weights.nrows(),
                params.classifier.weights.ncols(),
            ),
            classifier_bias: DVector::zeros(params.classifier.bias.len()),
            features: DMatrix::zeros(feature_rows, params.in_dim()),
            loss: 0.0,
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.layer1 *= s;
        self.layer2 *= s;
        self.classifier_weights *= s;
        self.classifier_bias *= s;
        self.features *= s;
        self.loss *= s;
    }

    fn is_finite(&self) -> bool {
        self.loss.is_finite()
            && self.layer1.iter().all(|v| v.is_finite())
            && self.layer2.iter().all(|v| v.is_finite())
            && self.classifier_weights.iter().all(|v| v.is_finite())
            && self.classifier_bias.iter().all(|v| v.is_finite())
            && self.features.iter().all(|v| v.is_finite())
    }
}

/// Exact analytic gradients of the scalar loss with respect to every
/// non-frozen parameter block and the input features. Frozen blocks get
/// zero gradient.
pub fn backprop_grads<S: SubgraphLike>(
    params: &GnnParams,
    sub: &S,
    head: &LossHead,
) -> Result<GnnGrads> {
    let cache = forward_cached(params, sub)?;
    let grads = backprop_from_cache(params, &cache, head)?;
    if !grads.is_finite() {
        return Err(Error::NonFinite { stage: "backprop".into() });
    }
    Ok(grads)
}

/// Backward pass reusing a forward cache.
pub fn backprop_from_cache(
    params: &GnnParams,
    cache: &ForwardCache,
    head: &LossHead,
) -> Result<GnnGrads> {
    let loss = head.value(cache);
    if !loss.is_finite() {
        return Err(Error::NonFinite { stage: "loss".into() });
    }
    let (dlogits, dz_extra) = head.seed_grads(cache);
    let mut grads = backward_pass(params, cache, &dlogits, &dz_extra);
    grads.loss = loss;
    Ok(grads)
}

/// Backward pass from arbitrary upstream gradients: `dlogits` with respect
/// to the classifier logits and `dz_extra` directly on the graph embedding.
/// Contrastive pretraining seeds `dz_extra` and leaves `dlogits` zero.
pub fn backward_pass(
    params: &GnnParams,
    cache: &ForwardCache,
    dlogits: &DVector<f64>,
    dz_extra: &DVector<f64>,
) -> GnnGrads {
    // Classifier: logits = W^T z + b.
    let d_cls_w = &cache.z * dlogits.transpose();
    let d_cls_b = dlogits.clone();
    let mut dz = &params.classifier.weights * dlogits;
    dz += dz_extra;

    // Readout: z = mean over rows of H2.
    let n = cache.h2.nrows() as f64;
    let mut d_h2 = DMatrix::zeros(cache.h2.nrows(), cache.h2.ncols());
    for r in 0..cache.h2.nrows() {
        for c in 0..cache.h2.ncols() {
            d_h2[(r, c)] = dz[c] / n;
        }
    }

    // Layer 2: H2 = ReLU(A_hat H1 W2).
    let d_pre2 = d_h2.component_mul(&relu_mask(&cache.pre2));
    let ah1 = &cache.a_hat * &cache.h1;
    let d_w2 = ah1.transpose() * &d_pre2;
    // A_hat is symmetric, so A_hat^T = A_hat.
    let d_h1 = &cache.a_hat * &d_pre2 * params.layer2.transpose();

    // Layer 1: H1 = ReLU(A_hat X W1).
    let d_pre1 = d_h1.component_mul(&relu_mask(&cache.pre1));
    let ax = &cache.a_hat * &cache.x;
    let d_w1 = ax.transpose() * &d_pre1;
    let d_x = &cache.a_hat * &d_pre1 * params.layer1.transpose();

    let mut grads = GnnGrads {
        layer1: d_w1,
        layer2: d_w2,
        classifier_weights: d_cls_w,
        classifier_bias: d_cls_b,
        features: d_x,
        loss: 0.0,
    };
    if params.frozen.layer1 {
        grads.layer1.fill(0.0);
    }
    if params.frozen.layer2 {
        grads.layer2.fill(0.0);
    }
    if params.frozen.classifier {
        grads.classifier_weights.fill(0.0);
        grads.classifier_bias.fill(0.0);
    }
    grads
}

/// Central finite differences over every parameter block and the features.
/// Panics on the first entry whose relative error exceeds `tol` (entries
/// below 1e-7 in magnitude are compared absolutely). Test support; used by
/// both the unit suite and the acceptance gate.
pub fn finite_diff_check(
    params: &GnnParams,
    sub: &crate::graph::EgoNetwork,
    head: &LossHead,
    eps: f64,
    tol: f64,
) {
    let analytic = backprop_grads(params, sub, head).unwrap();
    let loss_with = |p: &GnnParams, e: &crate::graph::EgoNetwork| {
        let cache = forward_cached(p, e).unwrap();
        head.value(&cache)
    };

    let check = |a: f64, n: f64, what: &str| {
        let denom = a.abs().max(n.abs());
        let diff = (a - n).abs();
        assert!(diff <= tol * denom || diff <= 1e-7, "{what}: analytic {a} vs numeric {n}");
    };

    let mut p = params.clone();
    for r in 0..p.layer1.nrows() {
        for c in 0..p.layer1.ncols() {
            let orig = p.layer1[(r, c)];
            p.layer1[(r, c)] = orig + eps;
            let up = loss_with(&p, sub);
            p.layer1[(r, c)] = orig - eps;
            let down = loss_with(&p, sub);
            p.layer1[(r, c)] = orig;
            check(analytic.layer1[(r, c)], (up - down) / (2.0 * eps), "layer1");
        }
    }
    for r in 0..p.layer2.nrows() {
        for c in 0..p.layer2.ncols() {
            let orig = p.layer2[(r, c)];
            p.layer2[(r, c)] = orig + eps;
            let up = loss_with(&p, sub);
            p.layer2[(r, c)] = orig - eps;
            let down = loss_with(&p, sub);
            p.layer2[(r, c)] = orig;
            check(analytic.layer2[(r, c)], (up - down) / (2.0 * eps), "layer2");
        }
    }
    for r in 0..p.classifier.weights.nrows() {
        for c in 0..p.classifier.weights.ncols() {
            let orig = p.classifier.weights[(r, c)];
            p.classifier.weights[(r, c)] = orig + eps;
            let up = loss_with(&p, sub);
            p.classifier.weights[(r, c)] = orig - eps;
            let down = loss_with(&p, sub);
            p.classifier.weights[(r, c)] = orig;
            check(analytic.classifier_weights[(r, c)], (up - down) / (2.0 * eps), "cls.weights");
        }
    }
    for i in 0..p.classifier.bias.len() {
        let orig = p.classifier.bias[i];
        p.classifier.bias[i] = orig + eps;
        let up = loss_with(&p, sub);
        p.classifier.bias[i] = orig - eps;
        let down = loss_with(&p, sub);
        p.classifier.bias[i] = orig;
        check(analytic.classifier_bias[i], (up - down) / (2.0 * eps), "cls.bias");
    }
    let mut e = sub.clone();
    for r in 0..e.features.nrows() {
        for c in 0..e.features.ncols() {
            let orig = e.features[(r, c)];
            e.features[(r, c)] = orig + eps;
            let up = loss_with(params, &e);
            e.features[(r, c)] = orig - eps;
            let down = loss_with(params, &e);
            e.features[(r, c)] = orig;
            check(analytic.features[(r, c)], (up - down) / (2.0 * eps), "features");
        }
    }
}

/// Random small subgraph + parameters whose pre-activations and hinge are
/// clear of their kinks, so central differences approximate the derivative.
/// Test support for the gradient checks.
pub fn random_smooth_instance(
    seed: u64,
    max_nodes: usize,
    max_dim: usize,
) -> (GnnParams, crate::graph::EgoNetwork, HingeSpec) {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    loop {
        let n = rng.random_range(2..=max_nodes);
        let dim = rng.random_range(2..=max_dim);
        let hidden = rng.random_range(2..=max_dim);
        let labels = rng.random_range(2..=4usize);
        let params = init_gnn_params(dim, hidden, labels, rng.random());
        let feats = DMatrix::from_fn(n, dim, |_, _| rng.random_range(-1.0..1.0));
        let mut edges = Vec::new();
        for u in 0..n {
            for v in (u + 1)..n {
                if rng.random_range(0.0..1.0) < 0.5 {
                    edges.push((u, v));
                }
            }
        }
        let e = crate::graph::EgoNetwork {
            center: 0,
            nodes: (0..n).collect(),
            local_edges: edges,
            features: feats,
            label: rng.random_range(0..labels),
            hops: 1,
        };
        let Ok(cache) = forward_cached(&params, &e) else { continue };

        let clearance = 1e-3;
        let near_kink = cache.pre1.iter().any(|v| v.abs() < clearance)
            || cache.pre2.iter().any(|v| v.abs() < clearance);
        if near_kink || cache.z.norm() < 0.05 {
            continue;
        }
        let hdim = cache.z.len();
        let positive = DVector::from_fn(hdim, |_, _| rng.random_range(-1.0..1.0));
        let negative = DVector::from_fn(hdim, |_, _| rng.random_range(-1.0..1.0));
        if positive.norm() < 0.1 || negative.norm() < 0.1 {
            continue;
        }
        let cf = cosine(cache.z.as_slice(), positive.as_slice())
            - cosine(cache.z.as_slice(), negative.as_slice());
        let hinge = HingeSpec { positive, negative, weight: 10.0, margin: 1.0 };
        if (hinge.margin - cf).abs() < clearance {
            continue;
        }
        return (params, e, hinge);
    }
}
