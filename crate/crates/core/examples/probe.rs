//! Oracle-trigger upper-bound probe. Not part of the test suite.
use gplab_core::attack::*;
use gplab_core::gnn::forward_cached;
use gplab_core::graph::ego_network_with_adjacency;
use gplab_core::harness::*;
use gplab_core::prompt::{GraphPrompt, TuneOptions};
use nalgebra::DMatrix;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let norm: f64 = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(10.0);
    let tcross: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(0.1);
    for data_seed in [111u64, 222, 333] {
        let cfg = ExperimentConfig::demo();
        let (graph, _) = stage_data(&cfg, data_seed).unwrap();
        let params = stage_pretrain(&cfg, &graph, data_seed ^ 0xaaaa, data_seed ^ 0xbbbb).unwrap();
        let plan = { let mut p = cfg.attack.clone().unwrap(); p.seed = data_seed ^ 0xcccc; p };
        let labels = choose_attack_labels(&graph, &plan).unwrap();
        let victim = labels.victims[0];
        let target = labels.target.unwrap();

        // Oracle trigger: every token = norm * a seeded random unit vector
        // (direction-content test) or the target mean when env ORACLE=target.
        let feats = graph.feature_matrix();
        let dim = graph.feature_dim();
        let mut mean_t = vec![0.0; dim];
        if std::env::var("ORACLE").as_deref() == Ok("target") {
            for v in 0..graph.node_count {
                if graph.labels[v] == target {
                    for c in 0..dim { mean_t[c] += feats[(v, c)]; }
                }
            }
        } else {
            use rand::Rng;
            let mut rng = gplab_core::rng::rng_from_seed(data_seed ^ 0xdddd);
            for c in 0..dim { mean_t[c] = rng.random_range(-1.0..1.0); }
        }
        let n0: f64 = mean_t.iter().map(|x| x * x).sum::<f64>().sqrt();
        let tok: Vec<f64> = mean_t.iter().map(|x| x / n0 * norm).collect();
        let mut token_features = DMatrix::zeros(10, dim);
        for r in 0..10 { for c in 0..dim { token_features[(r, c)] = tok[c]; } }
        let oracle = GraphPrompt {
            token_features,
            inner_prune_threshold: 0.3,
            cross_prune_threshold: tcross,
            learnable: false,
        };

        // Invoke-style main phase with the oracle trigger: reuse the
        // internal loop by running interact with alpha 0?? No: call
        // train_backdoored is fixed to build its own trigger. Emulate the
        // invoke main phase manually via backdoor machinery:
        let ctx = BackdoorTrainContext {
            hops: 1, prompt_tokens: 10,
            inner_threshold: 0.3, cross_threshold: 0.1,
            trigger_inner_threshold: None, trigger_cross_threshold: Some(tcross),
            tune: TuneOptions { epochs: 40, learning_rate: 0.05, batch_size: 10, seed: 1 },
            warmup: None,
        };
        let out = train_backdoored_with_trigger(&plan, &params, &graph, &ctx, Some(oracle)).unwrap();

        let mut eval_params = params.clone();
        eval_params.classifier = out.classifier.clone();
        let adj = graph.adjacency();
        let mut hit = 0; let mut tot = 0; let mut other_hit = 0; let mut other_tot = 0;
        let mut clean_ok = 0; let mut clean_tot = 0;
        for v in graph.test_nodes() {
            let ego = ego_network_with_adjacency(&graph, &adj, v, 1).unwrap();
            let clean_sub = gplab_core::prompt::insert_prompt(&(&ego).into(), &out.benign_prompt).unwrap();
            let cc = forward_cached(&eval_params, &clean_sub).unwrap();
            let cpred = (0..4).max_by(|&a, &b| cc.softmax[a].partial_cmp(&cc.softmax[b]).unwrap()).unwrap();
            clean_tot += 1; if cpred == ego.label { clean_ok += 1; }
            let sub = attach_for_inference(&ego, &out.trigger, &out.benign_prompt, plan.trigger_method).unwrap();
            let c = forward_cached(&eval_params, &sub).unwrap();
            let pred = (0..4).max_by(|&a, &b| c.softmax[a].partial_cmp(&c.softmax[b]).unwrap()).unwrap();
            if graph.labels[v] == victim { tot += 1; if pred == target { hit += 1; } }
            else if graph.labels[v] != target { other_tot += 1; if pred == target { other_hit += 1; } }
        }
        println!("seed {data_seed}: norm={norm} tcross={tcross} vASR {hit}/{tot} otherASR {other_hit}/{other_tot} CA {:.2}", clean_ok as f64 / clean_tot as f64);
    }
}
