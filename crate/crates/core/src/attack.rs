//! The graph-prompt backdoor attack: victim/target label selection,
//! LNH-ranked poisoned-candidate selection under a degree filter, trigger
//! generation by three methods, and backdoored training under the
//! centroid-constrained objective.
//!
//! Triggers are prompts by another name: a trigger is a [`GraphPrompt`]
//! attached only to poisoned samples. "Invoke" learns it in a separate
//! warm-up tuning run and freezes it; "Interact" learns trigger and benign
//! prompt jointly, trigger inserted first; "Modify" is the same joint run
//! with the insertion order reversed.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gnn::{backprop_grads, Classifier, GnnParams, HingeSpec, LossHead};
use crate::graph::{ego_network_with_adjacency, EgoNetwork, Graph};
use crate::metrics::{compute_centroids, lnh_score_with_adjacency, CentroidSet};
use crate::prompt::{init_prompt, insert_prompt, tune_prompt, GraphPrompt, PromptedSubgraph, TuneOptions};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackType {
    OneToOne,
    AllToOne,
    AllToAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TriggerMethod {
    Invoke,
    Interact,
    Modify,
}

impl std::fmt::Display for TriggerMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TriggerMethod::Invoke => write!(f, "invoke"),
            TriggerMethod::Interact => write!(f, "interact"),
            TriggerMethod::Modify => write!(f, "modify"),
        }
    }
}

/// Full attack configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttackPlan {
    pub attack_type: AttackType,
    /// Override for the target label; default is the most populous training
    /// label (ties to the lowest id).
    #[serde(default)]
    pub target_label: Option<usize>,
    /// Override for the victim label (one-to-one only); default is the least
    /// populous training label other than the target.
    #[serde(default)]
    pub victim_label: Option<usize>,
    /// Fraction of victim-label training nodes to poison.
    pub poisoning_rate: f64,
    /// Degree filter; nodes with degree above this are never poisoned.
    /// None selects the 75th percentile of victim-label training degrees.
    #[serde(default)]
    pub degree_threshold: Option<usize>,
    pub trigger_method: TriggerMethod,
    #[serde(default = "default_trigger_size")]
    pub trigger_size: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Invoke only: fraction of victim-label training nodes flipped in the
    /// warm-up graph the trigger is tuned on.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub seed: u64,
}

fn default_trigger_size() -> usize {
    10
}
fn default_alpha() -> f64 {
    10.0
}
fn default_beta() -> f64 {
    1.0
}
fn default_warmup() -> f64 {
    0.9
}
fn default_epochs() -> usize {
    10
}

impl AttackPlan {
    pub fn validate(&self) -> Result<()> {
        if !(self.poisoning_rate > 0.0 && self.poisoning_rate <= 1.0) {
            return Err(Error::InvalidParameter {
                msg: format!("poisoning_rate must be in (0,1], got {}", self.poisoning_rate),
            });
        }
        if self.trigger_size == 0 {
            return Err(Error::InvalidParameter { msg: "trigger_size must be >= 1".into() });
        }
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::InvalidParameter { msg: "alpha and beta must be >= 0".into() });
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction <= 1.0) {
            return Err(Error::InvalidParameter {
                msg: format!("warmup_fraction must be in (0,1], got {}", self.warmup_fraction),
            });
        }
        if self.epochs == 0 {
            return Err(Error::InvalidParameter { msg: "epochs must be >= 1".into() });
        }
        if self.attack_type == AttackType::OneToOne {
            if let (Some(t), Some(v)) = (self.target_label, self.victim_label) {
                if t == v {
                    return Err(Error::InvalidParameter {
                        msg: "one-to-one requires target != victim".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

/// Resolved attack labels: the victim labels in ascending order and, for
/// the fixed-target types, the single target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedLabels {
    pub attack_type: AttackType,
    pub num_labels: usize,
    pub target: Option<usize>,
    pub victims: Vec<usize>,
}

impl ResolvedLabels {
    /// Attack target for a given victim label: the fixed target, or
    /// (victim + 1) mod |Y| under all-to-all.
    pub fn target_for(&self, victim: usize) -> usize {
        match self.attack_type {
            AttackType::AllToAll => (victim + 1) % self.num_labels,
            _ => self.target.expect("fixed-target attack carries a target"),
        }
    }
}

/// Default label policy: target is the most populous training label, the
/// one-to-one victim is the least populous training label other than the
/// target; ties break toward the lowest label id. Config overrides apply.
pub fn choose_attack_labels(graph: &Graph, plan: &AttackPlan) -> Result<ResolvedLabels> {
    if graph.num_labels < 2 {
        return Err(Error::SingleLabel { labels: graph.num_labels });
    }
    let mut counts = vec![0usize; graph.num_labels];
    for v in graph.train_nodes() {
        counts[graph.labels[v]] += 1;
    }

    let check = |l: usize| -> Result<usize> {
        if l >= graph.num_labels {
            return Err(Error::InvalidLabels {
                msg: format!("label {l} out of range 0..{}", graph.num_labels),
            });
        }
        Ok(l)
    };

    if plan.attack_type == AttackType::AllToAll {
        return Ok(ResolvedLabels {
            attack_type: AttackType::AllToAll,
            num_labels: graph.num_labels,
            target: None,
            victims: (0..graph.num_labels).collect(),
        });
    }

    let target = match plan.target_label {
        Some(t) => check(t)?,
        None => counts
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i)
            .unwrap(),
    };

    let victims = match plan.attack_type {
        AttackType::OneToOne => {
            let victim = match plan.victim_label {
                Some(v) => {
                    let v = check(v)?;
                    if v == target {
                        return Err(Error::InvalidParameter {
                            msg: "victim label equals target label".into(),
                        });
                    }
                    v
                }
                None => counts
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != target)
                    .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)))
                    .map(|(i, _)| i)
                    .unwrap(),
            };
            vec![victim]
        }
        AttackType::AllToOne => (0..graph.num_labels).filter(|&l| l != target).collect(),
        AttackType::AllToAll => unreachable!(),
    };

    Ok(ResolvedLabels {
        attack_type: plan.attack_type,
        num_labels: graph.num_labels,
        target: Some(target),
        victims,
    })
}

/// One poisoned node: its id, the label it really has, and the label the
/// attacker flipped it to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoisonEntry {
    pub node: usize,
    pub original_label: usize,
    pub flipped_label: usize,
}

/// The selected victims with their flips, sorted by node id.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PoisonSet {
    pub entries: Vec<PoisonEntry>,
}

impl PoisonSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn node_ids(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.node).collect()
    }

    /// Entries grouped by their original (victim) label.
    pub fn by_victim_label(&self) -> BTreeMap<usize, Vec<&PoisonEntry>> {
        let mut map: BTreeMap<usize, Vec<&PoisonEntry>> = BTreeMap::new();
        for e in &self.entries {
            map.entry(e.original_label).or_default().push(e);
        }
        map
    }

    /// Undo the label flips on a poisoned graph copy; restoring against the
    /// graph they came from reproduces the original exactly.
    pub fn restore(&self, poisoned: &Graph) -> Graph {
        let mut g = poisoned.clone();
        for e in &self.entries {
            g.labels[e.node] = e.original_label;
        }
        g
    }
}

/// Nearest-rank 75th percentile, the default degree filter.
fn percentile_75(mut values: Vec<usize>) -> usize {
    values.sort_unstable();
    let rank = ((0.75 * values.len() as f64).ceil() as usize).max(1);
    values[rank - 1]
}

/// Rank eligible training nodes of `label` by LNH (descending, ties to the
/// lower node id) and keep the top `quota`.
fn ranked_candidates(
    graph: &Graph,
    adj: &[Vec<usize>],
    degrees: &[usize],
    label: usize,
    degree_threshold: Option<usize>,
    quota: usize,
) -> Result<Vec<usize>> {
    let members: Vec<usize> =
        graph.train_nodes().into_iter().filter(|&v| graph.labels[v] == label).collect();
    let d_pre = match degree_threshold {
        Some(d) => d,
        None => {
            if members.is_empty() {
                return Err(Error::NoCandidates { label, threshold: 0 });
            }
            percentile_75(members.iter().map(|&v| degrees[v]).collect())
        }
    };
    let eligible: Vec<usize> = members.iter().copied().filter(|&v| degrees[v] <= d_pre).collect();
    if eligible.is_empty() {
        return Err(Error::NoCandidates { label, threshold: d_pre });
    }
    let mut scored: Vec<(usize, f64)> = eligible
        .into_iter()
        .map(|v| Ok((v, lnh_score_with_adjacency(graph, adj, v)?)))
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(quota).map(|(v, _)| v).collect())
}

/// Poisoned-candidate selection: per victim label, filter training nodes
/// through the degree threshold, rank by LNH descending, keep the top
/// ceil(p x victim-label training count), and flip labels per the attack
/// type. Returns the poison set and a label-flipped copy; the input graph
/// is untouched.
pub fn select_poisoned_candidates(graph: &Graph, plan: &AttackPlan) -> Result<(PoisonSet, Graph)> {
    plan.validate()?;
    let labels = choose_attack_labels(graph, plan)?;
    let adj = graph.adjacency();
    let degrees = graph.degrees();

    let mut train_count = vec![0usize; graph.num_labels];
    for v in graph.train_nodes() {
        train_count[graph.labels[v]] += 1;
    }

    let mut entries = Vec::new();
    for &victim in &labels.victims {
        let quota = (plan.poisoning_rate * train_count[victim] as f64).ceil() as usize;
        let chosen =
            ranked_candidates(graph, &adj, &degrees, victim, plan.degree_threshold, quota)?;
        let flipped = labels.target_for(victim);
        for node in chosen {
            entries.push(PoisonEntry { node, original_label: victim, flipped_label: flipped });
        }
    }
    entries.sort_by_key(|e| e.node);

    let mut poisoned = graph.clone();
    for e in &entries {
        poisoned.labels[e.node] = e.flipped_label;
    }
    Ok((PoisonSet { entries }, poisoned))
}

/// Everything the training phases need beyond the plan itself.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackdoorTrainContext {
    /// Ego-network radius.
    pub hops: usize,
    /// Benign prompt token count.
    pub prompt_tokens: usize,
    pub inner_threshold: f64,
    pub cross_threshold: f64,
    /// Trigger link thresholds; default to the benign prompt's. A higher
    /// cross threshold keeps trigger tokens sparsely attached, so mean
    /// readout carries their features undiluted.
    #[serde(default)]
    pub trigger_inner_threshold: Option<f64>,
    #[serde(default)]
    pub trigger_cross_threshold: Option<f64>,
    /// Options for benign prompt tuning and for the backdoor loop's
    /// learning rate and batching.
    pub tune: TuneOptions,
    /// Warm-up tuning options for the invoke trigger; defaults to `tune`.
    /// The warm-up runs entirely on the attacker's side, so it may be much
    /// hotter than the victim's own tuning.
    #[serde(default)]
    pub warmup: Option<TuneOptions>,
}

impl Default for BackdoorTrainContext {
    fn default() -> Self {
        BackdoorTrainContext {
            hops: 1,
            prompt_tokens: 10,
            inner_threshold: crate::prompt::DEFAULT_INNER_THRESHOLD,
            cross_threshold: crate::prompt::DEFAULT_CROSS_THRESHOLD,
            trigger_inner_threshold: None,
            trigger_cross_threshold: None,
            tune: TuneOptions::default(),
            warmup: None,
        }
    }
}

impl BackdoorTrainContext {
    fn trigger_thresholds(&self) -> (f64, f64) {
        (
            self.trigger_inner_threshold.unwrap_or(self.inner_threshold),
            self.trigger_cross_threshold.unwrap_or(self.cross_threshold),
        )
    }
}

fn training_egos(graph: &Graph, hops: usize) -> Result<Vec<EgoNetwork>> {
    let adj = graph.adjacency();
    graph
        .train_nodes()
        .into_iter()
        .map(|v| ego_network_with_adjacency(graph, &adj, v, hops))
        .collect()
}

/// Build the Invoke trigger.
///
/// The warm-up set holds every victim-label training ego with
/// `warmup_fraction` of each label's members (LNH-ranked) flipped to that
/// label's target; a fresh prompt is tuned on that set alone against the
/// surrogate and returned frozen as the trigger. Because the flipped
/// majority and the unflipped rest come from the same cluster, the
/// classifier cannot absorb the flips and the sustained gradients push the
/// prompt tokens into a strong pull toward the target. A warm-up set with
/// fewer than two labels (e.g. full flipping) is rejected as degenerate;
/// all-to-one flips per victim label, which keeps every victim's residue
/// represented.
pub fn build_trigger_invoke(
    plan: &AttackPlan,
    surrogate_params: &GnnParams,
    graph: &Graph,
    ctx: &BackdoorTrainContext,
) -> Result<GraphPrompt> {
    plan.validate()?;
    let labels = choose_attack_labels(graph, plan)?;
    let adj = graph.adjacency();

    let mut train_count = vec![0usize; graph.num_labels];
    for v in graph.train_nodes() {
        train_count[graph.labels[v]] += 1;
    }

    let mut warm = graph.clone();
    let mut members = Vec::new();
    for &victim in &labels.victims {
        // Floor keeps an unflipped residue whenever the fraction is below 1,
        // which is what stops the warm-up classifier from going lazy.
        let quota = (plan.warmup_fraction * train_count[victim] as f64).floor() as usize;
        let chosen =
            ranked_candidates(graph, &adj, &graph.degrees(), victim, Some(usize::MAX), quota)?;
        let flipped = labels.target_for(victim);
        for node in chosen {
            warm.labels[node] = flipped;
        }
        members.extend(
            graph.train_nodes().into_iter().filter(|&v| graph.labels[v] == victim),
        );
    }
    members.sort_unstable();
    members.dedup();

    let mut represented = std::collections::BTreeSet::new();
    for &v in &members {
        represented.insert(warm.labels[v]);
    }
    if represented.len() < 2 {
        return Err(Error::WarmupDegenerate {
            represented: represented.len(),
            labels: warm.num_labels,
        });
    }

    let warm_adj = warm.adjacency();
    let egos: Vec<EgoNetwork> = members
        .iter()
        .map(|&v| ego_network_with_adjacency(&warm, &warm_adj, v, ctx.hops))
        .collect::<Result<_>>()?;
    let mut trigger = init_prompt(
        plan.trigger_size,
        graph.feature_dim(),
        derive_seed(plan.seed, 0x7169),
    );
    let (inner, cross) = ctx.trigger_thresholds();
    trigger.inner_prune_threshold = inner;
    trigger.cross_prune_threshold = cross;
    let mut opts = ctx.warmup.clone().unwrap_or_else(|| ctx.tune.clone());
    opts.seed = derive_seed(plan.seed, 0x7170);
    let items: Vec<PromptedSubgraph> = egos.iter().map(PromptedSubgraph::from).collect();
    let tuned = tune_prompt(surrogate_params, &trigger, &items, &opts)?;
    let mut out = tuned.prompt;
    out.learnable = false;
    Ok(out)
}

/// A poisoned training item: the bare ego (label already flipped) plus the
/// labels the constraint needs.
#[derive(Debug, Clone)]
pub struct PoisonedSample {
    pub sub: PromptedSubgraph,
    pub target_label: usize,
    pub victim_label: usize,
}

/// The backdoor objective on one batch: mean cross-entropy over clean and
/// poisoned samples (clean at true labels, poisoned at flipped targets)
/// plus (alpha / |V_p|) * sum over poisoned of max(0, beta - CF), where CF
/// uses the target centroid as positive and the victim centroid as
/// negative. An empty poisoned batch makes the constraint term 0; alpha = 0
/// omits it entirely.
pub fn backdoor_loss(
    params: &GnnParams,
    clean_batch: &[PromptedSubgraph],
    poisoned_batch: &[PoisonedSample],
    centroids: &CentroidSet,
    plan: &AttackPlan,
) -> Result<f64> {
    let total = clean_batch.len() + poisoned_batch.len();
    if total == 0 {
        return Err(Error::EmptyInput { msg: "backdoor_loss needs at least one sample".into() });
    }
    let mut ce = 0.0;
    for sub in clean_batch {
        let cache = crate::gnn::forward_cached(params, sub)?;
        ce += crate::gnn::cross_entropy(&cache.logits, sub.label);
    }
    let mut constraint = 0.0;
    for p in poisoned_batch {
        let cache = crate::gnn::forward_cached(params, &p.sub)?;
        ce += crate::gnn::cross_entropy(&cache.logits, p.target_label);
        if plan.alpha > 0.0 {
            let hinge = hinge_for(p, centroids, plan.alpha / poisoned_batch.len() as f64, plan.beta)?;
            constraint += LossHead::CentroidHinge(hinge).value(&cache);
        }
    }
    Ok(ce / total as f64 + constraint)
}

fn hinge_for(
    p: &PoisonedSample,
    centroids: &CentroidSet,
    weight: f64,
    beta: f64,
) -> Result<HingeSpec> {
    let positive = centroids
        .get(p.target_label)
        .ok_or(Error::AbsentCentroid { label: p.target_label })?;
    let negative = centroids
        .get(p.victim_label)
        .ok_or(Error::AbsentCentroid { label: p.victim_label })?;
    Ok(HingeSpec { positive, negative, weight, margin: beta })
}

/// Trained attack artifacts.
pub struct BackdoorOutcome {
    pub benign_prompt: GraphPrompt,
    pub trigger: GraphPrompt,
    pub classifier: Classifier,
    pub poison_set: PoisonSet,
    pub epoch_losses: Vec<f64>,
    /// The constraint coefficient actually applied (0 under black-box).
    pub effective_alpha: f64,
}

/// Attach trigger and benign prompt in the order the method trained with:
/// trigger first for invoke/interact, benign prompt first for modify.
pub fn attach_for_inference(
    ego: &EgoNetwork,
    trigger: &GraphPrompt,
    benign: &GraphPrompt,
    method: TriggerMethod,
) -> Result<PromptedSubgraph> {
    let base = PromptedSubgraph::from(ego);
    match method {
        TriggerMethod::Invoke | TriggerMethod::Interact => {
            insert_prompt(&insert_prompt(&base, trigger)?, benign)
        }
        TriggerMethod::Modify => insert_prompt(&insert_prompt(&base, benign)?, trigger),
    }
}

struct TrainItem {
    ego_index: usize,
    poison: Option<(usize, usize)>, // (target, victim)
}

/// Backdoored training. Selects candidates, builds the trigger per the
/// plan's method, and optimizes benign prompt, classifier, and (for
/// interact/modify) the trigger under the backdoor objective. Centroids for
/// the constraint are recomputed from current clean-sample embeddings each
/// epoch.
pub fn train_backdoored(
    plan: &AttackPlan,
    frozen_params: &GnnParams,
    graph: &Graph,
    ctx: &BackdoorTrainContext,
) -> Result<BackdoorOutcome> {
    train_backdoored_with_trigger(plan, frozen_params, graph, ctx, None)
}

/// As [`train_backdoored`] but with an externally supplied frozen trigger,
/// bypassing the plan's trigger construction. Probe/testing hook.
pub fn train_backdoored_with_trigger(
    plan: &AttackPlan,
    frozen_params: &GnnParams,
    graph: &Graph,
    ctx: &BackdoorTrainContext,
    supplied_trigger: Option<GraphPrompt>,
) -> Result<BackdoorOutcome> {
    plan.validate()?;
    frozen_params.validate()?;
    if !frozen_params.frozen.layer1 || !frozen_params.frozen.layer2 {
        return Err(Error::InvalidParameter {
            msg: "train_backdoored requires frozen GNN blocks".into(),
        });
    }

    let (poison_set, poisoned_graph) = select_poisoned_candidates(graph, plan)?;
    let egos = training_egos(&poisoned_graph, ctx.hops)?;
    let train_nodes = poisoned_graph.train_nodes();
    let poison_of: BTreeMap<usize, &PoisonEntry> =
        poison_set.entries.iter().map(|e| (e.node, e)).collect();

    let items: Vec<TrainItem> = train_nodes
        .iter()
        .enumerate()
        .map(|(i, node)| TrainItem {
            ego_index: i,
            poison: poison_of.get(node).map(|e| (e.flipped_label, e.original_label)),
        })
        .collect();

    let mut trigger = match (supplied_trigger, plan.trigger_method) {
        (Some(t), _) => t,
        (None, TriggerMethod::Invoke) => build_trigger_invoke(plan, frozen_params, graph, ctx)?,
        (None, TriggerMethod::Interact | TriggerMethod::Modify) => {
            let mut t = init_prompt(
                plan.trigger_size,
                graph.feature_dim(),
                derive_seed(plan.seed, 0x7169),
            );
            let (inner, cross) = ctx.trigger_thresholds();
            t.inner_prune_threshold = inner;
            t.cross_prune_threshold = cross;
            t
        }
    };
    let mut benign = init_prompt(
        ctx.prompt_tokens,
        graph.feature_dim(),
        derive_seed(plan.seed, 0x6270),
    );
    benign.inner_prune_threshold = ctx.inner_threshold;
    benign.cross_prune_threshold = ctx.cross_threshold;

    let mut params = frozen_params.clone();
    params.frozen.classifier = false;
    let trigger_learns = matches!(plan.trigger_method, TriggerMethod::Interact | TriggerMethod::Modify);

    let dim = graph.feature_dim();
    let mut epoch_losses = Vec::with_capacity(plan.epochs);
    for epoch in 0..plan.epochs {
        // Per-epoch centroid refresh from clean samples under the current
        // benign prompt.
        let centroids = if plan.alpha > 0.0 {
            let clean: Vec<&TrainItem> = items.iter().filter(|it| it.poison.is_none()).collect();
            let mut embeddings = DMatrix::zeros(clean.len(), params.hidden_dim());
            let mut labels = Vec::with_capacity(clean.len());
            for (row, it) in clean.iter().enumerate() {
                let sub = insert_prompt(&PromptedSubgraph::from(&egos[it.ego_index]), &benign)?;
                let cache = crate::gnn::forward_cached(&params, &sub)?;
                embeddings.set_row(row, &cache.z.transpose());
                labels.push(egos[it.ego_index].label);
            }
            Some(compute_centroids(&embeddings, &labels, poisoned_graph.num_labels)?)
        } else {
            None
        };

        let mut order: Vec<usize> = (0..items.len()).collect();
        let mut rng = rng_from_seed(derive_seed(plan.seed, 3000 + epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        for batch in order.chunks(ctx.tune.batch_size.max(1)) {
            let b = batch.len() as f64;
            let poisoned_in_batch =
                batch.iter().filter(|&&i| items[i].poison.is_some()).count();

            let mut d_benign = DMatrix::zeros(benign.token_count(), dim);
            let mut d_trigger = DMatrix::zeros(trigger.token_count(), dim);
            let mut d_cls_w =
                DMatrix::zeros(params.classifier.weights.nrows(), params.classifier.weights.ncols());
            let mut d_cls_b = nalgebra::DVector::zeros(params.classifier.bias.len());

            for &i in batch {
                let item = &items[i];
                let ego = &egos[item.ego_index];
                let base = PromptedSubgraph::from(ego);
                let (sub, trigger_span_first) = match (&item.poison, plan.trigger_method) {
                    (None, _) => (insert_prompt(&base, &benign)?, false),
                    (Some(_), TriggerMethod::Invoke | TriggerMethod::Interact) => {
                        (insert_prompt(&insert_prompt(&base, &trigger)?, &benign)?, true)
                    }
                    (Some(_), TriggerMethod::Modify) => {
                        (insert_prompt(&insert_prompt(&base, &benign)?, &trigger)?, false)
                    }
                };

                let head = match &item.poison {
                    None => LossHead::CrossEntropy { label: ego.label },
                    Some((target, victim)) => match &centroids {
                        Some(cents) => {
                            let sample = PoisonedSample {
                                sub: sub.clone(),
                                target_label: *target,
                                victim_label: *victim,
                            };
                            // The uniform 1/B batch scaling below turns this
                            // weight into alpha / |V_p in batch|.
                            let weight = plan.alpha * b / poisoned_in_batch as f64;
                            LossHead::CrossEntropyWithHinge {
                                label: *target,
                                hinge: hinge_for(&sample, cents, weight, plan.beta)?,
                            }
                        }
                        None => LossHead::CrossEntropy { label: *target },
                    },
                };

                let grads = backprop_grads(&params, &sub, &head)?;
                epoch_loss += grads.loss / b;
                d_cls_w += grads.classifier_weights;
                d_cls_b += grads.classifier_bias;

                match (&item.poison, trigger_span_first) {
                    (None, _) => {
                        let (s, l) = sub.token_spans[0];
                        d_benign += grads.features.view((s, 0), (l, dim));
                    }
                    (Some(_), true) => {
                        let (ts, tl) = sub.token_spans[0];
                        let (bs, bl) = sub.token_spans[1];
                        d_trigger += grads.features.view((ts, 0), (tl, dim));
                        d_benign += grads.features.view((bs, 0), (bl, dim));
                    }
                    (Some(_), false) => {
                        let (bs, bl) = sub.token_spans[0];
                        let (ts, tl) = sub.token_spans[1];
                        d_benign += grads.features.view((bs, 0), (bl, dim));
                        d_trigger += grads.features.view((ts, 0), (tl, dim));
                    }
                }
            }

            let scale = ctx.tune.learning_rate / b;
            benign.token_features -= d_benign * scale;
            if trigger_learns {
                trigger.token_features -= d_trigger * scale;
            }
            params.classifier.weights -= d_cls_w * scale;
            params.classifier.bias -= d_cls_b * scale;
        }
        epoch_losses.push(epoch_loss * ctx.tune.batch_size.max(1) as f64 / items.len() as f64);
    }

    debug_assert_eq!(params.layer1, frozen_params.layer1);
    debug_assert_eq!(params.layer2, frozen_params.layer2);
    Ok(BackdoorOutcome {
        benign_prompt: benign,
        trigger,
        classifier: params.classifier,
        poison_set,
        epoch_losses,
        effective_alpha: plan.alpha,
    })
}

/// Black-box pipeline: the trigger is built on the surrogate, the poisoned
/// graph (labels flipped, triggers attached) is handed to an untouched
/// benign tuning run supplied by the caller, and the centroid constraint is
/// never evaluated (alpha is forced to 0 in the reported artifacts).
///
/// Only the invoke method is supported; interact/modify require custom loss
/// functions the black-box attacker does not have.
pub fn black_box_pipeline<F>(
    plan: &AttackPlan,
    surrogate_params: &GnnParams,
    graph: &Graph,
    ctx: &BackdoorTrainContext,
    victim_training: F,
) -> Result<BackdoorOutcome>
where
    F: FnOnce(&[PromptedSubgraph], &GraphPrompt) -> Result<crate::prompt::TuneOutcome>,
{
    plan.validate()?;
    if plan.trigger_method != TriggerMethod::Invoke {
        return Err(Error::BlackBoxMethod { got: plan.trigger_method.to_string() });
    }

    let trigger = build_trigger_invoke(plan, surrogate_params, graph, ctx)?;
    let (poison_set, poisoned_graph) = select_poisoned_candidates(graph, plan)?;
    let egos = training_egos(&poisoned_graph, ctx.hops)?;
    let train_nodes = poisoned_graph.train_nodes();
    let poisoned_ids: std::collections::BTreeSet<usize> =
        poison_set.entries.iter().map(|e| e.node).collect();

    let items: Vec<PromptedSubgraph> = train_nodes
        .iter()
        .zip(&egos)
        .map(|(node, ego)| {
            let base = PromptedSubgraph::from(ego);
            if poisoned_ids.contains(node) {
                insert_prompt(&base, &trigger)
            } else {
                Ok(base)
            }
        })
        .collect::<Result<_>>()?;

    let mut benign = init_prompt(
        ctx.prompt_tokens,
        graph.feature_dim(),
        derive_seed(plan.seed, 0x6270),
    );
    benign.inner_prune_threshold = ctx.inner_threshold;
    benign.cross_prune_threshold = ctx.cross_threshold;

    let tuned = victim_training(&items, &benign)?;
    Ok(BackdoorOutcome {
        benign_prompt: tuned.prompt,
        trigger,
        classifier: tuned.classifier,
        poison_set,
        epoch_losses: tuned.epoch_losses,
        effective_alpha: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gnn::{forward_cached, init_gnn_params, FrozenFlags};
    use crate::metrics::lnh_score;
    use crate::sbm::{generate_sbm, SbmConfig};
    use approx::assert_relative_eq;

    fn plan(attack_type: AttackType, method: TriggerMethod) -> AttackPlan {
        AttackPlan {
            attack_type,
            target_label: None,
            victim_label: None,
            poisoning_rate: 0.2,
            degree_threshold: Some(usize::MAX),
            trigger_method: method,
            trigger_size: 3,
            alpha: 10.0,
            beta: 1.0,
            warmup_fraction: 0.9,
            epochs: 3,
            seed: 7,
        }
    }

    /// Graph with controlled training label counts {0: 5, 1: 3, 2: 2}.
    fn counted_graph() -> Graph {
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1, 2, 2];
        let n = labels.len();
        let features = DMatrix::from_fn(n, 3, |r, c| ((r + c) % 3) as f64);
        let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4), (5, 6), (6, 7), (8, 9), (0, 8)];
        Graph::from_parts(features, &edges, labels, vec![true; n], vec![false; n]).unwrap().0
    }

    #[test]
    fn default_label_policy() {
        let g = counted_graph();
        let p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        let labels = choose_attack_labels(&g, &p).unwrap();
        assert_eq!(labels.target, Some(0));
        assert_eq!(labels.victims, vec![2]);

        let p = plan(AttackType::AllToOne, TriggerMethod::Invoke);
        let labels = choose_attack_labels(&g, &p).unwrap();
        assert_eq!(labels.target, Some(0));
        assert_eq!(labels.victims, vec![1, 2]);
    }

    #[test]
    fn all_to_all_rotation() {
        let g = counted_graph();
        let p = plan(AttackType::AllToAll, TriggerMethod::Invoke);
        let labels = choose_attack_labels(&g, &p).unwrap();
        assert_eq!(labels.victims, vec![0, 1, 2]);
        assert_eq!(labels.target_for(0), 1);
        assert_eq!(labels.target_for(2), 0);
        // |Y| = 7, victim 6 -> target 0.
        let seven = ResolvedLabels {
            attack_type: AttackType::AllToAll,
            num_labels: 7,
            target: None,
            victims: (0..7).collect(),
        };
        assert_eq!(seven.target_for(6), 0);
    }

    #[test]
    fn tie_breaks_to_lower_id() {
        let labels = vec![0, 0, 1, 1];
        let features = DMatrix::from_element(4, 2, 1.0);
        let g = Graph::from_parts(features, &[(0, 2)], labels, vec![true; 4], vec![false; 4])
            .unwrap()
            .0;
        let p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        let labels = choose_attack_labels(&g, &p).unwrap();
        assert_eq!(labels.target, Some(0));
        assert_eq!(labels.victims, vec![1]);
    }

    #[test]
    fn single_label_graph_rejected() {
        let features = DMatrix::from_element(2, 2, 1.0);
        let g = Graph::from_parts(features, &[(0, 1)], vec![0, 0], vec![true; 2], vec![false; 2])
            .unwrap()
            .0;
        let p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        assert!(matches!(choose_attack_labels(&g, &p), Err(Error::SingleLabel { .. })));
    }

    /// One victim node with all-different-label neighbors, the rest
    /// uniform: that node has the unique maximum LNH and is selected first.
    #[test]
    fn selection_prefers_high_lnh() {
        // Victim label is 1 (two training nodes, ids 5 and 6). Node 5's
        // neighbors are all label 0; node 6's neighbors are its own label.
        let labels = vec![0, 0, 0, 0, 0, 1, 1, 1];
        let features = DMatrix::from_element(8, 2, 1.0);
        let edges = vec![(5, 0), (5, 1), (6, 7), (0, 1)];
        let g = Graph::from_parts(features, &edges, labels, vec![true; 8], vec![false; 8])
            .unwrap()
            .0;
        assert!(lnh_score(&g, 5).unwrap() > lnh_score(&g, 6).unwrap());

        let mut p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        p.victim_label = Some(1);
        p.poisoning_rate = 0.34; // ceil(0.34 * 3) = 2 of the 3 victim nodes
        let (set, poisoned) = select_poisoned_candidates(&g, &p).unwrap();
        assert_eq!(set.len(), 2);
        assert_eq!(set.entries[0].node, 5);
        assert_eq!(set.entries[0].original_label, 1);
        assert_eq!(set.entries[0].flipped_label, 0);
        // Original untouched, copy flipped.
        assert_eq!(g.labels[5], 1);
        assert_eq!(poisoned.labels[5], 0);
    }

    #[test]
    fn full_rate_selects_every_victim_node() {
        let g = counted_graph();
        let mut p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        p.poisoning_rate = 1.0;
        let (set, _) = select_poisoned_candidates(&g, &p).unwrap();
        assert_eq!(set.len(), 2); // both label-2 training nodes
        assert!(set.entries.iter().all(|e| e.original_label == 2 && e.flipped_label == 0));
    }

    #[test]
    fn all_to_all_flips_rotate() {
        let g = counted_graph();
        let mut p = plan(AttackType::AllToAll, TriggerMethod::Invoke);
        p.poisoning_rate = 0.5;
        let (set, _) = select_poisoned_candidates(&g, &p).unwrap();
        for e in &set.entries {
            assert_eq!(e.flipped_label, (e.original_label + 1) % 3);
        }
        // Quota respected per victim label.
        for (label, group) in set.by_victim_label() {
            let count = g.train_nodes().iter().filter(|&&v| g.labels[v] == label).count();
            assert!(group.len() <= (0.5 * count as f64).ceil() as usize);
        }
    }

    #[test]
    fn restore_is_involution() {
        let g = counted_graph();
        let mut p = plan(AttackType::AllToAll, TriggerMethod::Invoke);
        p.poisoning_rate = 0.5;
        let (set, poisoned) = select_poisoned_candidates(&g, &p).unwrap();
        assert_eq!(set.restore(&poisoned), g);
    }

    #[test]
    fn degree_filter_can_exhaust() {
        let g = counted_graph();
        let mut p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        p.degree_threshold = Some(0); // every node has degree >= 1
        assert!(matches!(
            select_poisoned_candidates(&g, &p),
            Err(Error::NoCandidates { .. })
        ));
    }

    fn sbm_setup(seed: u64) -> (Graph, GnnParams) {
        let (graph, _) = generate_sbm(&SbmConfig {
            classes: 3,
            nodes_per_class: 12,
            p_in: 0.4,
            p_out: 0.05,
            feature_dim: 5,
            class_sep: 2.5,
            train_frac: 0.5,
            seed,
        })
        .unwrap();
        let mut params = init_gnn_params(5, 8, 3, seed ^ 0xabc);
        params.frozen = FrozenFlags::frozen_backbone();
        (graph, params)
    }

    #[test]
    fn warmup_counts_match_fraction() {
        // 10 victim-label training nodes at warmup 0.9 -> 9 poisons.
        let labels: Vec<usize> = (0..40).map(|i| if i < 20 { 0 } else { 1 }).collect();
        let features = DMatrix::from_fn(40, 2, |r, _| (r % 5) as f64 + 0.5);
        let edges: Vec<(usize, usize)> = (0..39).map(|i| (i, i + 1)).collect();
        let train: Vec<bool> = (0..40).map(|i| i % 2 == 0).collect();
        let test: Vec<bool> = train.iter().map(|t| !t).collect();
        let g = Graph::from_parts(features, &edges, labels, train, test).unwrap().0;
        // 10 training nodes per label; victim is label 1.
        let mut p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        p.victim_label = Some(1);
        p.target_label = Some(0);

        let labels_resolved = choose_attack_labels(&g, &p).unwrap();
        assert_eq!(labels_resolved.victims, vec![1]);
        let quota = (p.warmup_fraction * 10.0).ceil() as usize;
        assert_eq!(quota, 9);
    }

    #[test]
    fn all_to_one_full_warmup_degenerates() {
        let (graph, params) = sbm_setup(3);
        let mut p = plan(AttackType::AllToOne, TriggerMethod::Invoke);
        p.warmup_fraction = 1.0;
        let ctx = BackdoorTrainContext::default();
        let err = build_trigger_invoke(&p, &params, &graph, &ctx);
        assert!(matches!(err, Err(Error::WarmupDegenerate { .. })), "got {err:?}");
    }

    #[test]
    fn invoke_trigger_is_frozen_and_sized() {
        let (graph, params) = sbm_setup(5);
        let p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        let ctx = BackdoorTrainContext::default();
        let trigger = build_trigger_invoke(&p, &params, &graph, &ctx).unwrap();
        assert_eq!(trigger.token_count(), p.trigger_size);
        assert!(!trigger.learnable);
    }

    #[test]
    fn backdoor_loss_reduces_to_clean_ce_without_poisons() {
        let (graph, params) = sbm_setup(11);
        let adj = graph.adjacency();
        let subs: Vec<PromptedSubgraph> = (0..4)
            .map(|v| {
                PromptedSubgraph::from(&ego_network_with_adjacency(&graph, &adj, v, 1).unwrap())
            })
            .collect();
        let centroids = CentroidSet { centroids: DMatrix::zeros(3, 8), counts: vec![0; 3] };
        let p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        let loss = backdoor_loss(&params, &subs, &[], &centroids, &p).unwrap();
        let mut expect = 0.0;
        for sub in &subs {
            let cache = forward_cached(&params, sub).unwrap();
            expect += crate::gnn::cross_entropy(&cache.logits, sub.label);
        }
        assert_relative_eq!(loss, expect / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn constraint_term_hand_values() {
        // Single poisoned sample with CF = 0, beta = 1, alpha = 10: the
        // constraint term is exactly 10. CF = beta zeroes the hinge.
        let (graph, mut params) = sbm_setup(13);
        // Zero network weights force z = 0, so CF = 0 via the cosine rule.
        params.layer1.fill(0.0);
        params.layer2.fill(0.0);
        let adj = graph.adjacency();
        let ego = ego_network_with_adjacency(&graph, &adj, 0, 1).unwrap();
        let sample = PoisonedSample {
            sub: PromptedSubgraph::from(&ego),
            target_label: 1,
            victim_label: 0,
        };
        let emb = DMatrix::from_row_slice(2, 8, &[1.0; 16]);
        let centroids = compute_centroids(&emb, &[0, 1], 3).unwrap();
        let p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        let loss = backdoor_loss(&params, &[], &[sample.clone()], &centroids, &p).unwrap();
        let ce = (3.0f64).ln(); // uniform softmax over 3 labels
        assert_relative_eq!(loss, ce + 10.0, epsilon = 1e-9);

        // alpha = 0 drops the term entirely.
        let mut p0 = p.clone();
        p0.alpha = 0.0;
        let loss0 = backdoor_loss(&params, &[], &[sample], &centroids, &p0).unwrap();
        assert_relative_eq!(loss0, ce, epsilon = 1e-9);
    }

    #[test]
    fn hinge_zero_at_boundary() {
        // CF exactly beta: hinge contributes 0.
        use crate::gnn::HingeSpec;
        let z = nalgebra::DVector::from_vec(vec![1.0, 0.0]);
        let h = HingeSpec {
            positive: nalgebra::DVector::from_vec(vec![1.0, 0.0]),
            negative: nalgebra::DVector::from_vec(vec![0.0, 1.0]),
            weight: 10.0,
            margin: 1.0,
        };
        // CF = cos(z,pos) - cos(z,neg) = 1 - 0 = 1 = margin.
        let cf = crate::metrics::cosine(z.as_slice(), h.positive.as_slice())
            - crate::metrics::cosine(z.as_slice(), h.negative.as_slice());
        assert_relative_eq!(cf, 1.0);
        assert_eq!(h.weight * (h.margin - cf).max(0.0), 0.0);
    }

    #[test]
    fn missing_centroid_is_an_error() {
        let (graph, params) = sbm_setup(17);
        let adj = graph.adjacency();
        let ego = ego_network_with_adjacency(&graph, &adj, 0, 1).unwrap();
        let sample = PoisonedSample {
            sub: PromptedSubgraph::from(&ego),
            target_label: 2,
            victim_label: 0,
        };
        let emb = DMatrix::from_row_slice(2, 8, &[1.0; 16]);
        let centroids = compute_centroids(&emb, &[0, 1], 3).unwrap(); // label 2 absent
        let p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        let err = backdoor_loss(&params, &[], &[sample], &centroids, &p);
        assert!(matches!(err, Err(Error::AbsentCentroid { label: 2 })));
    }

    #[test]
    fn invoke_freezes_trigger_interact_tunes_it() {
        let (graph, params) = sbm_setup(23);
        let ctx = BackdoorTrainContext {
            prompt_tokens: 3,
            tune: TuneOptions { epochs: 2, ..Default::default() },
            ..Default::default()
        };

        let p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        let before = build_trigger_invoke(&p, &params, &graph, &ctx).unwrap();
        let out = train_backdoored(&p, &params, &graph, &ctx).unwrap();
        assert_eq!(out.trigger.token_features, before.token_features);

        let p = plan(AttackType::OneToOne, TriggerMethod::Interact);
        let init = init_prompt(p.trigger_size, graph.feature_dim(), derive_seed(p.seed, 0x7169));
        let out = train_backdoored(&p, &params, &graph, &ctx).unwrap();
        assert_ne!(out.trigger.token_features, init.token_features);

        let p = plan(AttackType::OneToOne, TriggerMethod::Modify);
        let out_m = train_backdoored(&p, &params, &graph, &ctx).unwrap();
        assert_ne!(out_m.trigger.token_features, init.token_features);
    }

    #[test]
    fn black_box_requires_invoke_and_forces_alpha_zero() {
        let (graph, params) = sbm_setup(29);
        let surrogate = {
            let mut s = init_gnn_params(5, 8, 3, 999);
            s.frozen = FrozenFlags::frozen_backbone();
            s
        };
        let ctx = BackdoorTrainContext {
            prompt_tokens: 3,
            tune: TuneOptions { epochs: 2, ..Default::default() },
            ..Default::default()
        };

        let mut p = plan(AttackType::OneToOne, TriggerMethod::Modify);
        let err = black_box_pipeline(&p, &surrogate, &graph, &ctx, |_, _| unreachable!());
        assert!(matches!(err, Err(Error::BlackBoxMethod { .. })));

        p.trigger_method = TriggerMethod::Invoke;
        p.alpha = 42.0;
        crate::gnn::reset_constraint_eval_count();
        let out = black_box_pipeline(&p, &surrogate, &graph, &ctx, |items, prompt| {
            tune_prompt(&params, prompt, items, &ctx.tune)
        })
        .unwrap();
        assert_eq!(out.effective_alpha, 0.0);
        assert_eq!(crate::gnn::constraint_eval_count(), 0);
        assert!(!out.poison_set.is_empty());
    }

    #[test]
    fn attach_order_follows_method() {
        let (graph, _) = sbm_setup(31);
        let adj = graph.adjacency();
        let ego = ego_network_with_adjacency(&graph, &adj, 0, 1).unwrap();
        let trigger = init_prompt(2, 5, 1);
        let benign = init_prompt(3, 5, 2);
        let n = ego.nodes.len();

        let inv = attach_for_inference(&ego, &trigger, &benign, TriggerMethod::Invoke).unwrap();
        assert_eq!(inv.token_spans, vec![(n, 2), (n + 2, 3)]);

        let modi = attach_for_inference(&ego, &trigger, &benign, TriggerMethod::Modify).unwrap();
        assert_eq!(modi.token_spans, vec![(n, 3), (n + 3, 2)]);
    }

    #[test]
    fn plan_validation() {
        let mut p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        p.poisoning_rate = 0.0;
        assert!(p.validate().is_err());
        let mut p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        p.target_label = Some(1);
        p.victim_label = Some(1);
        assert!(p.validate().is_err());
        let mut p = plan(AttackType::OneToOne, TriggerMethod::Invoke);
        p.beta = -1.0;
        assert!(p.validate().is_err());
    }
}
