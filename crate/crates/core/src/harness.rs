//! Experiment orchestration: a run is a pure function of its config.
//!
//! Each trial derives its own seed family from the global seed, then walks
//! load/generate -> pretrain -> benign baseline -> attack -> optional
//! defense -> evaluation. Trials are sequential and every shuffle, init,
//! and noise draw is seeded, so rerunning a config writes byte-identical
//! artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::attack::{
    attach_for_inference, black_box_pipeline, train_backdoored, AttackPlan, AttackType,
    BackdoorOutcome, BackdoorTrainContext, TriggerMethod,
};
use crate::checkpoint::Checkpoint;
use crate::defense::{gnn_svd_filter, inject_embedding_noise, inject_feature_noise, DefenseConfig};
use crate::error::{Error, Result};
use crate::eval::{
    confidence_histogram, evaluate_attack, macro_f1, project_embeddings_2d, ConfidenceHistogram,
    EvalSample, MetricsReport,
};
use crate::features::svd_reduce_features;
use crate::gnn::{forward_cached, softmax, GnnParams};
use crate::graph::{ego_network_with_adjacency, EgoNetwork, Graph, SubgraphLike};
use crate::io::{load_graph, load_graph_json, SplitSpec};
use crate::metrics::local_subgraph_homophily;
use crate::pretrain::{pretrain_contrastive, PretrainConfig};
use crate::prompt::{init_prompt, insert_prompt, tune_prompt, GraphPrompt, PromptedSubgraph, TuneOptions};
use crate::rng::{derive_seed, rng_from_seed};
use crate::sbm::{generate_sbm, SbmConfig};

/// Where the downstream graph comes from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Sbm(SbmConfig),
    Files {
        edges: String,
        features: String,
        labels: String,
        #[serde(default = "default_train_frac")]
        train_frac: f64,
    },
    Json {
        path: String,
        #[serde(default = "default_train_frac")]
        train_frac: f64,
    },
}

fn default_train_frac() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
}

fn default_hidden() -> usize {
    100
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden_dim: default_hidden() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PromptConfig {
    #[serde(default = "default_tokens")]
    pub token_count: usize,
    #[serde(default = "default_inner")]
    pub inner_prune_threshold: f64,
    #[serde(default = "default_cross")]
    pub cross_prune_threshold: f64,
    #[serde(default = "default_tune_epochs")]
    pub tune_epochs: usize,
    #[serde(default = "default_tune_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
}

fn default_tokens() -> usize {
    10
}
fn default_inner() -> f64 {
    crate::prompt::DEFAULT_INNER_THRESHOLD
}
fn default_cross() -> f64 {
    crate::prompt::DEFAULT_CROSS_THRESHOLD
}
fn default_tune_epochs() -> usize {
    10
}
fn default_tune_lr() -> f64 {
    0.01
}
fn default_batch() -> usize {
    10
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig {
            token_count: default_tokens(),
            inner_prune_threshold: default_inner(),
            cross_prune_threshold: default_cross(),
            tune_epochs: default_tune_epochs(),
            learning_rate: default_tune_lr(),
            batch_size: default_batch(),
        }
    }
}

/// Full experiment description; serializable, and a run is a pure function
/// of it.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default = "default_hops")]
    pub hops: usize,
    pub data: DataConfig,
    /// Reduce input features to this many dimensions before anything else.
    #[serde(default)]
    pub svd_dim: Option<usize>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Pretrain on a seeded subsample of this many ego-networks (all when
    /// absent).
    #[serde(default)]
    pub pretrain_sample: Option<usize>,
    #[serde(default)]
    pub prompt: PromptConfig,
    /// Trigger link thresholds; default to the benign prompt's.
    #[serde(default)]
    pub trigger_inner_threshold: Option<f64>,
    #[serde(default)]
    pub trigger_cross_threshold: Option<f64>,
    /// Invoke warm-up schedule; defaults to the prompt tuning schedule.
    #[serde(default)]
    pub warmup_epochs: Option<usize>,
    #[serde(default)]
    pub warmup_learning_rate: Option<f64>,
    #[serde(default)]
    pub attack: Option<AttackPlan>,
    /// Run the attack through the black-box pipeline: trigger built on a
    /// surrogate pretrained with a different seed, victim tuning benign.
    #[serde(default)]
    pub black_box: bool,
    #[serde(default)]
    pub defense: DefenseConfig,
    #[serde(default = "default_bins")]
    pub histogram_bins: usize,
    #[serde(default = "default_outdir")]
    pub output_dir: String,
}

fn default_trials() -> usize {
    5
}
fn default_hops() -> usize {
    1
}
fn default_bins() -> usize {
    10
}
fn default_outdir() -> String {
    "out".to_string()
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }

    /// The bundled desk-scale demo: homophily-heavy SBM, one-to-one Invoke
    /// attack at a 5% poisoning rate.
    pub fn demo() -> Self {
        ExperimentConfig {
            seed: 42,
            trials: 5,
            hops: 1,
            data: DataConfig::Sbm(SbmConfig {
                classes: 4,
                nodes_per_class: 100,
                p_in: 0.3,
                p_out: 0.03,
                feature_dim: 16,
                class_sep: 2.0,
                train_frac: 0.5,
                seed: 0,
            }),
            svd_dim: None,
            model: ModelConfig { hidden_dim: 32 },
            pretrain: PretrainConfig { epochs: 100, ..Default::default() },
            pretrain_sample: Some(120),
            prompt: PromptConfig {
                tune_epochs: 40,
                learning_rate: 0.05,
                ..Default::default()
            },
            trigger_inner_threshold: None,
            trigger_cross_threshold: Some(0.75),
            warmup_epochs: Some(80),
            warmup_learning_rate: Some(0.2),
            attack: Some(AttackPlan {
                attack_type: AttackType::OneToOne,
                target_label: None,
                victim_label: None,
                poisoning_rate: 0.05,
                degree_threshold: None,
                trigger_method: TriggerMethod::Invoke,
                trigger_size: 10,
                alpha: 10.0,
                beta: 1.0,
                warmup_fraction: 0.9,
                epochs: 40,
                seed: 0,
            }),
            black_box: false,
            defense: DefenseConfig::None,
            histogram_bins: 10,
            output_dir: "out".to_string(),
        }
    }
}

/// Seed family for one trial; every stage draws from its own stream.
struct TrialSeeds {
    data: u64,
    pretrain: u64,
    pretrain_sample: u64,
    benign_prompt: u64,
    benign_tune: u64,
    attack: u64,
    eval_split: u64,
    defense: u64,
    surrogate: u64,
}

impl TrialSeeds {
    fn derive(global_seed: u64, trial: usize) -> Self {
        let t = derive_seed(global_seed, 0x1000 + trial as u64);
        TrialSeeds {
            data: derive_seed(t, 1),
            pretrain: derive_seed(t, 2),
            pretrain_sample: derive_seed(t, 3),
            benign_prompt: derive_seed(t, 4),
            benign_tune: derive_seed(t, 5),
            attack: derive_seed(t, 6),
            eval_split: derive_seed(t, 7),
            defense: derive_seed(t, 8),
            surrogate: derive_seed(t, 9),
        }
    }
}

/// Load or generate the downstream graph, then apply the configured SVD
/// feature reduction.
pub fn stage_data(config: &ExperimentConfig, data_seed: u64) -> Result<(Graph, f64)> {
    let (graph, homophily) = match &config.data {
        DataConfig::Sbm(sbm) => {
            let mut cfg = sbm.clone();
            cfg.seed = data_seed;
            generate_sbm(&cfg)?
        }
        DataConfig::Files { edges, features, labels, train_frac } => {
            let split = SplitSpec::new(*train_frac, data_seed);
            let (g, _) =
                load_graph(Path::new(edges), Path::new(features), Path::new(labels), split)?;
            let h = g.label_homophily();
            (g, h)
        }
        DataConfig::Json { path, train_frac } => {
            let split = SplitSpec::new(*train_frac, data_seed);
            let (g, _) = load_graph_json(Path::new(path), split)?;
            let h = g.label_homophily();
            (g, h)
        }
    };
    let graph = match config.svd_dim {
        Some(dim) if dim < graph.feature_dim() => {
            let reduced = svd_reduce_features(&graph.feature_matrix(), dim)?;
            let mut g = graph;
            g.features = crate::graph::DMatrixData::from_matrix(&reduced);
            g
        }
        _ => graph,
    };
    Ok((graph, homophily))
}

fn egos_for(graph: &Graph, nodes: &[usize], hops: usize) -> Result<Vec<EgoNetwork>> {
    let adj = graph.adjacency();
    nodes.iter().map(|&v| ego_network_with_adjacency(graph, &adj, v, hops)).collect()
}

/// Contrastive pretraining over (a seeded subsample of) all node egos.
pub fn stage_pretrain(
    config: &ExperimentConfig,
    graph: &Graph,
    pretrain_seed: u64,
    sample_seed: u64,
) -> Result<GnnParams> {
    let mut nodes: Vec<usize> = (0..graph.node_count).collect();
    if let Some(k) = config.pretrain_sample {
        use rand::seq::SliceRandom;
        let mut rng = rng_from_seed(sample_seed);
        nodes.shuffle(&mut rng);
        nodes.truncate(k.max(2));
        nodes.sort_unstable();
    }
    let egos = egos_for(graph, &nodes, config.hops)?;
    let mut pcfg = config.pretrain.clone();
    pcfg.seed = pretrain_seed;
    let outcome = pretrain_contrastive(&egos, &pcfg, config.model.hidden_dim)?;
    Ok(outcome.params)
}

/// Benign baseline: tuned prompt and classifier plus full-test-set accuracy
/// and macro F1.
pub struct BenignOutcome {
    pub prompt: GraphPrompt,
    pub classifier: crate::gnn::Classifier,
    pub accuracy: f64,
    pub f1: f64,
    /// (node, true label, predicted label) rows for the audit CSV.
    pub predictions: Vec<(usize, usize, usize)>,
}

fn tune_options(config: &ExperimentConfig, seed: u64) -> TuneOptions {
    TuneOptions {
        epochs: config.prompt.tune_epochs,
        learning_rate: config.prompt.learning_rate,
        batch_size: config.prompt.batch_size,
        seed,
    }
}

pub fn stage_benign(
    config: &ExperimentConfig,
    graph: &Graph,
    params: &GnnParams,
    prompt_seed: u64,
    tune_seed: u64,
) -> Result<BenignOutcome> {
    let train_egos = egos_for(graph, &graph.train_nodes(), config.hops)?;
    let items: Vec<PromptedSubgraph> = train_egos.iter().map(PromptedSubgraph::from).collect();
    let mut prompt = init_prompt(config.prompt.token_count, graph.feature_dim(), prompt_seed);
    prompt.inner_prune_threshold = config.prompt.inner_prune_threshold;
    prompt.cross_prune_threshold = config.prompt.cross_prune_threshold;
    let tuned = tune_prompt(params, &prompt, &items, &tune_options(config, tune_seed))?;

    let mut eval_params = params.clone();
    eval_params.classifier = tuned.classifier.clone();
    let test_nodes = graph.test_nodes();
    let test_egos = egos_for(graph, &test_nodes, config.hops)?;
    let mut truth = Vec::with_capacity(test_egos.len());
    let mut predicted = Vec::with_capacity(test_egos.len());
    let mut predictions = Vec::with_capacity(test_egos.len());
    for ego in &test_egos {
        let sub = insert_prompt(&PromptedSubgraph::from(ego), &tuned.prompt)?;
        let cache = forward_cached(&eval_params, &sub)?;
        let pred = argmax(cache.softmax.as_slice());
        truth.push(ego.label);
        predicted.push(pred);
        predictions.push((ego.center, ego.label, pred));
    }
    let correct = truth.iter().zip(&predicted).filter(|(t, p)| t == p).count();
    let accuracy = if truth.is_empty() { 0.0 } else { correct as f64 / truth.len() as f64 };
    let f1 = macro_f1(&truth, &predicted, graph.num_labels);
    Ok(BenignOutcome { prompt: tuned.prompt, classifier: tuned.classifier, accuracy, f1, predictions })
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn train_context(config: &ExperimentConfig, tune_seed: u64) -> BackdoorTrainContext {
    let tune = tune_options(config, tune_seed);
    let warmup = match (config.warmup_epochs, config.warmup_learning_rate) {
        (None, None) => None,
        (e, lr) => Some(TuneOptions {
            epochs: e.unwrap_or(tune.epochs),
            learning_rate: lr.unwrap_or(tune.learning_rate),
            ..tune.clone()
        }),
    };
    BackdoorTrainContext {
        hops: config.hops,
        prompt_tokens: config.prompt.token_count,
        inner_threshold: config.prompt.inner_prune_threshold,
        cross_threshold: config.prompt.cross_prune_threshold,
        trigger_inner_threshold: config.trigger_inner_threshold,
        trigger_cross_threshold: config.trigger_cross_threshold,
        tune,
        warmup,
    }
}

/// Mount the configured attack, white-box or black-box.
pub fn stage_attack(
    config: &ExperimentConfig,
    graph: &Graph,
    params: &GnnParams,
    seeds_attack: u64,
    seeds_surrogate: u64,
) -> Result<BackdoorOutcome> {
    let mut plan = config
        .attack
        .clone()
        .ok_or_else(|| Error::Config { msg: "attack stage without an attack plan".into() })?;
    plan.seed = seeds_attack;
    let ctx = train_context(config, derive_seed(seeds_attack, 0xace));

    if config.black_box {
        let surrogate = stage_pretrain(config, graph, seeds_surrogate, seeds_surrogate)?;
        black_box_pipeline(&plan, &surrogate, graph, &ctx, |items, prompt| {
            tune_prompt(params, prompt, items, &ctx.tune)
        })
    } else {
        train_backdoored(&plan, params, graph, &ctx)
    }
}

/// Everything the evaluation writes per sample, plus projection inputs.
pub struct EvalArtifacts {
    pub samples: Vec<EvalSample>,
    pub report: MetricsReport,
    pub histogram: ConfidenceHistogram,
    pub projection: DMatrix<f64>,
    pub projection_explained: [f64; 2],
}

/// 1:1-split evaluation of a mounted attack: the clean half carries the
/// benign prompt, the triggered half additionally carries the trigger in
/// the method's training order; the configured defense applies to both.
pub fn stage_eval(
    config: &ExperimentConfig,
    graph: &Graph,
    params: &GnnParams,
    outcome: &BackdoorOutcome,
    benign: &BenignOutcome,
    eval_seed: u64,
    defense_seed: u64,
) -> Result<EvalArtifacts> {
    let plan = config
        .attack
        .as_ref()
        .ok_or_else(|| Error::Config { msg: "evaluation without an attack plan".into() })?;
    let labels = crate::attack::choose_attack_labels(graph, plan)?;
    let method = plan.trigger_method;

    let mut eval_params = params.clone();
    eval_params.classifier = outcome.classifier.clone();

    let mut test_nodes = graph.test_nodes();
    {
        use rand::seq::SliceRandom;
        let mut rng = rng_from_seed(eval_seed);
        test_nodes.shuffle(&mut rng);
    }
    if test_nodes.len() < 2 {
        return Err(Error::EmptyInput { msg: "test set too small to split 1:1".into() });
    }
    let clean_count = test_nodes.len().div_ceil(2);

    let adj = graph.adjacency();
    let mut samples = Vec::with_capacity(test_nodes.len());
    let mut embeddings = DMatrix::zeros(test_nodes.len(), params.hidden_dim());
    for (i, &node) in test_nodes.iter().enumerate() {
        let triggered = i >= clean_count;
        let ego = ego_network_with_adjacency(graph, &adj, node, config.hops)?;
        let sub = if triggered {
            attach_for_inference(&ego, &outcome.trigger, &outcome.benign_prompt, method)?
        } else {
            insert_prompt(&PromptedSubgraph::from(&ego), &outcome.benign_prompt)?
        };

        let per_sample_seed = derive_seed(defense_seed, node as u64);
        let sub = match config.defense {
            DefenseConfig::GnnSvd { rank, binarize_threshold } => {
                gnn_svd_filter(&sub, rank, binarize_threshold)?
            }
            DefenseConfig::NoisyFea { sigma } => inject_feature_noise(&sub, sigma, per_sample_seed)?,
            DefenseConfig::None | DefenseConfig::NoisyEmb { .. } => sub,
        };

        let cache = forward_cached(&eval_params, &sub)?;
        let (z, probs) = match config.defense {
            DefenseConfig::NoisyEmb { sigma } => {
                let z = inject_embedding_noise(&cache.z, sigma, per_sample_seed)?;
                let logits = eval_params.classifier.logits(&z);
                let probs = softmax(&logits);
                (z, probs)
            }
            _ => (cache.z.clone(), cache.softmax.clone()),
        };
        embeddings.set_row(i, &z.transpose());

        // Only pair-covered samples carry a misclassification target.
        let attack_target = if triggered && labels.victims.contains(&ego.label) {
            Some(labels.target_for(ego.label))
        } else {
            None
        };
        samples.push(EvalSample {
            node,
            true_label: ego.label,
            triggered,
            attack_target,
            softmax: probs.iter().copied().collect(),
            mean_degree: sub.mean_degree(),
            local_homophily: local_subgraph_homophily(&sub),
        });
    }

    let mut report = evaluate_attack(&samples, plan.poisoning_rate)?;
    report.benign_accuracy = benign.accuracy;
    report.benign_f1 = benign.f1;
    let histogram = confidence_histogram(&samples, config.histogram_bins)?;
    let (projection, projection_explained) = project_embeddings_2d(&embeddings)?;
    Ok(EvalArtifacts { samples, report, histogram, projection, projection_explained })
}

/// Full in-memory outcome of one trial.
pub struct TrialOutcome {
    pub report: MetricsReport,
    pub graph_homophily: f64,
    pub benign_predictions: Vec<(usize, usize, usize)>,
    pub eval: Option<EvalArtifacts>,
    pub checkpoint: Checkpoint,
    pub poison_set: Option<crate::attack::PoisonSet>,
}

/// Run one trial end to end without touching the filesystem.
pub fn run_trial(config: &ExperimentConfig, trial: usize) -> Result<TrialOutcome> {
    let seeds = TrialSeeds::derive(config.seed, trial);
    let (graph, homophily) =
        stage_data(config, seeds.data).map_err(|e| e.in_stage("data"))?;
    let params = stage_pretrain(config, &graph, seeds.pretrain, seeds.pretrain_sample)
        .map_err(|e| e.in_stage("pretrain"))?;
    let benign = stage_benign(config, &graph, &params, seeds.benign_prompt, seeds.benign_tune)
        .map_err(|e| e.in_stage("benign"))?;

    let mut checkpoint = Checkpoint::new(&params).with_prompt("benign", &benign.prompt);

    if config.attack.is_none() {
        return Ok(TrialOutcome {
            report: MetricsReport::benign_only(benign.accuracy, benign.f1),
            graph_homophily: homophily,
            benign_predictions: benign.predictions,
            eval: None,
            checkpoint,
            poison_set: None,
        });
    }

    let outcome = stage_attack(config, &graph, &params, seeds.attack, seeds.surrogate)
        .map_err(|e| e.in_stage("attack"))?;
    checkpoint = checkpoint
        .with_prompt("attack_benign", &outcome.benign_prompt)
        .with_prompt("trigger", &outcome.trigger);

    let eval = stage_eval(config, &graph, &params, &outcome, &benign, seeds.eval_split, seeds.defense)
        .map_err(|e| e.in_stage("eval"))?;

    Ok(TrialOutcome {
        report: eval.report.clone(),
        graph_homophily: homophily,
        benign_predictions: benign.predictions,
        eval: Some(eval),
        checkpoint,
        poison_set: Some(outcome.poison_set),
    })
}

/// Arithmetic means of the per-trial rows. AMC averages over the trials
/// where it exists; it is absent if no trial had a successful attack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanReport {
    pub benign_accuracy: f64,
    pub benign_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub asr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub amc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ca: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pr: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub add: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ahd: Option<f64>,
}

pub fn mean_report(trials: &[MetricsReport]) -> MeanReport {
    let n = trials.len() as f64;
    let mean_f = |f: fn(&MetricsReport) -> f64| trials.iter().map(f).sum::<f64>() / n;
    let mean_opt = |f: fn(&MetricsReport) -> Option<f64>| {
        let vals: Vec<f64> = trials.iter().filter_map(f).collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    MeanReport {
        benign_accuracy: mean_f(|t| t.benign_accuracy),
        benign_f1: mean_f(|t| t.benign_f1),
        asr: mean_opt(|t| t.asr),
        amc: mean_opt(|t| t.amc),
        ca: mean_opt(|t| t.ca),
        pr: mean_opt(|t| t.pr),
        add: mean_opt(|t| t.add),
        ahd: mean_opt(|t| t.ahd),
    }
}

/// The merged run summary written as JSON.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: ExperimentConfig,
    pub trials: Vec<MetricsReport>,
    pub mean: MeanReport,
    pub graph_homophily: Vec<f64>,
    pub projection_explained: Vec<[f64; 2]>,
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn report_csv_row(out: &mut String, label: &str, r: &MetricsReport) {
    let _ = writeln!(
        out,
        "{label},{},{},{},{},{},{},{},{}",
        r.benign_accuracy,
        r.benign_f1,
        fmt_opt(r.asr),
        fmt_opt(r.amc),
        fmt_opt(r.ca),
        fmt_opt(r.pr),
        fmt_opt(r.add),
        fmt_opt(r.ahd),
    );
}

fn predictions_csv(samples: &[EvalSample]) -> String {
    let mut out = String::from(
        "node,population,true_label,attack_target,predicted,max_confidence,mean_degree,local_homophily,softmax\n",
    );
    for s in samples {
        let soft = s.softmax.iter().map(|p| p.to_string()).collect::<Vec<_>>().join(";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            s.node,
            if s.triggered { "triggered" } else { "clean" },
            s.true_label,
            s.attack_target.map(|t| t.to_string()).unwrap_or_default(),
            s.predicted(),
            s.max_confidence(),
            s.mean_degree,
            s.local_homophily,
            soft,
        );
    }
    out
}

fn benign_predictions_csv(rows: &[(usize, usize, usize)]) -> String {
    let mut out = String::from("node,true_label,predicted\n");
    for (node, truth, pred) in rows {
        let _ = writeln!(out, "{node},{truth},{pred}");
    }
    out
}

fn histogram_csv(h: &ConfidenceHistogram) -> String {
    let mut out = String::from("bin_low,bin_high,clean_count,poisoned_count\n");
    for i in 0..h.bins {
        let lo = i as f64 / h.bins as f64;
        let hi = (i + 1) as f64 / h.bins as f64;
        let _ = writeln!(out, "{lo},{hi},{},{}", h.clean[i], h.poisoned[i]);
    }
    out
}

fn projection_csv(samples: &[EvalSample], coords: &DMatrix<f64>) -> String {
    let mut out = String::from("node,population,true_label,pc1,pc2\n");
    for (i, s) in samples.iter().enumerate() {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            s.node,
            if s.triggered { "triggered" } else { "clean" },
            s.true_label,
            coords[(i, 0)],
            coords[(i, 1)],
        );
    }
    out
}

fn poison_csv(set: &crate::attack::PoisonSet) -> String {
    let mut out = String::from("node,old_label,new_label\n");
    for e in &set.entries {
        let _ = writeln!(out, "{},{},{}", e.node, e.original_label, e.flipped_label);
    }
    out
}

#[derive(Serialize, Deserialize)]
struct RunState {
    complete: bool,
}

/// Run every trial and write the artifact tree:
/// `trial_<i>/` with predictions, poison set, histogram, projection, and a
/// checkpoint, plus a merged `report.json` and `report.csv`. A
/// `run_state.json` marker flags partially written runs.
pub fn run_experiment(config: &ExperimentConfig, outdir: &Path) -> Result<RunSummary> {
    fs::create_dir_all(outdir)
        .map_err(|source| Error::Io { path: outdir.display().to_string(), source })?;
    write_file(&outdir.join("run_state.json"), &serde_json::to_string(&RunState { complete: false })?)?;

    let mut trials = Vec::with_capacity(config.trials);
    let mut homophilies = Vec::with_capacity(config.trials);
    let mut explained = Vec::new();
    for trial in 0..config.trials {
        let outcome = run_trial(config, trial)?;
        let dir = outdir.join(format!("trial_{trial}"));
        fs::create_dir_all(&dir)
            .map_err(|source| Error::Io { path: dir.display().to_string(), source })?;

        outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
        write_file(&dir.join("benign_predictions.csv"), &benign_predictions_csv(&outcome.benign_predictions))?;
        if let Some(eval) = &outcome.eval {
            write_file(&dir.join("predictions.csv"), &predictions_csv(&eval.samples))?;
            write_file(&dir.join("histogram.csv"), &histogram_csv(&eval.histogram))?;
            write_file(&dir.join("projection.csv"), &projection_csv(&eval.samples, &eval.projection))?;
            explained.push(eval.projection_explained);
        }
        if let Some(set) = &outcome.poison_set {
            write_file(&dir.join("poison_set.csv"), &poison_csv(set))?;
        }
        homophilies.push(outcome.graph_homophily);
        trials.push(outcome.report);
    }

    let summary = RunSummary {
        config: config.clone(),
        mean: mean_report(&trials),
        trials,
        graph_homophily: homophilies,
        projection_explained: explained,
    };
    write_file(&outdir.join("report.json"), &serde_json::to_string_pretty(&summary)?)?;

    let mut csv = String::from("trial,benign_accuracy,benign_f1,asr,amc,ca,pr,add,ahd\n");
    for (i, r) in summary.trials.iter().enumerate() {
        report_csv_row(&mut csv, &i.to_string(), r);
    }
    let m = &summary.mean;
    let _ = writeln!(
        csv,
        "mean,{},{},{},{},{},{},{},{}",
        m.benign_accuracy,
        m.benign_f1,
        fmt_opt(m.asr),
        fmt_opt(m.amc),
        fmt_opt(m.ca),
        fmt_opt(m.pr),
        fmt_opt(m.add),
        fmt_opt(m.ahd),
    );
    write_file(&outdir.join("report.csv"), &csv)?;

    write_file(&outdir.join("run_state.json"), &serde_json::to_string(&RunState { complete: true })?)?;
    Ok(summary)
}
