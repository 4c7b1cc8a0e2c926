//! Attack evaluation: ASR/AMC/CA/PR/ADD/AHD aggregation over a 1:1-split
//! test set, confidence histograms, and 2-D principal-component projections
//! of embeddings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::top_right_singular_vectors;

/// One evaluated test sample: model outputs plus the per-subgraph
/// statistics the distribution deltas need. Reports are recomputable from
/// these rows alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSample {
    pub node: usize,
    pub true_label: usize,
    pub triggered: bool,
    /// The label the attack wants this sample classified as. Present on
    /// triggered samples covered by the attack pairing: every sample under
    /// all-to-all, non-target samples under all-to-one, victim-label
    /// samples under one-to-one. Uncovered triggered samples still carry
    /// the trigger (they count toward the stealthiness deltas) but have no
    /// misclassification target.
    pub attack_target: Option<usize>,
    pub softmax: Vec<f64>,
    pub mean_degree: f64,
    pub local_homophily: f64,
}

impl EvalSample {
    /// Argmax prediction, ties to the lowest label id.
    pub fn predicted(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.softmax.iter().enumerate() {
            if p > self.softmax[best] {
                best = i;
            }
        }
        best
    }

    pub fn max_confidence(&self) -> f64 {
        self.softmax.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Per-trial result record. Attack fields are absent for benign-only runs;
/// AMC is absent when no attack succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
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
    #[serde(skip_serializing_if = "Option::is_none")]
    pub success_count: Option<usize>,
    /// Triggered samples covered by the attack pairing (ASR denominator).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attacked_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triggered_count: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clean_count: Option<usize>,
}

impl MetricsReport {
    pub fn benign_only(accuracy: f64, f1: f64) -> Self {
        MetricsReport {
            benign_accuracy: accuracy,
            benign_f1: f1,
            asr: None,
            amc: None,
            ca: None,
            pr: None,
            add: None,
            ahd: None,
            success_count: None,
            attacked_count: None,
            triggered_count: None,
            clean_count: None,
        }
    }
}

/// Aggregate model outputs on the 1:1-split test set.
///
/// ASR is the fraction of pair-covered triggered samples (those with an
/// attack target) predicted as that target; AMC the mean target-label
/// confidence over successful attacks (absent at zero successes); CA the
/// accuracy on the clean half; ADD/AHD the clean-minus-poisoned mean
/// degree and mean local homophily (the latter in percentage points) over
/// the full halves; PR is echoed from the plan.
pub fn evaluate_attack(samples: &[EvalSample], poisoning_rate: f64) -> Result<MetricsReport> {
    let clean: Vec<&EvalSample> = samples.iter().filter(|s| !s.triggered).collect();
    let triggered: Vec<&EvalSample> = samples.iter().filter(|s| s.triggered).collect();
    if clean.is_empty() || triggered.is_empty() {
        return Err(Error::EmptyInput {
            msg: format!(
                "evaluation needs both halves, got {} clean / {} triggered",
                clean.len(),
                triggered.len()
            ),
        });
    }

    let attacked: Vec<&EvalSample> =
        triggered.iter().copied().filter(|s| s.attack_target.is_some()).collect();
    if attacked.is_empty() {
        return Err(Error::EmptyInput {
            msg: "no triggered sample is covered by the attack pairing".into(),
        });
    }
    let mut successes = 0usize;
    let mut target_confidence = 0.0;
    for s in &attacked {
        let target = s.attack_target.expect("filtered to covered samples");
        if s.predicted() == target {
            successes += 1;
            target_confidence += s.softmax[target];
        }
    }
    let asr = successes as f64 / attacked.len() as f64;
    let amc = if successes > 0 { Some(target_confidence / successes as f64) } else { None };

    let correct = clean.iter().filter(|s| s.predicted() == s.true_label).count();
    let ca = correct as f64 / clean.len() as f64;

    let mean = |xs: &[&EvalSample], f: fn(&EvalSample) -> f64| {
        xs.iter().map(|s| f(s)).sum::<f64>() / xs.len() as f64
    };
    let add = mean(&clean, |s| s.mean_degree) - mean(&triggered, |s| s.mean_degree);
    let ahd = (mean(&clean, |s| s.local_homophily) - mean(&triggered, |s| s.local_homophily)) * 100.0;

    Ok(MetricsReport {
        benign_accuracy: 0.0,
        benign_f1: 0.0,
        asr: Some(asr),
        amc,
        ca: Some(ca),
        pr: Some(poisoning_rate),
        add: Some(add),
        ahd: Some(ahd),
        success_count: Some(successes),
        attacked_count: Some(attacked.len()),
        triggered_count: Some(triggered.len()),
        clean_count: Some(clean.len()),
    })
}

/// Binned max-probability counts for the clean and poisoned populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub bins: usize,
    pub clean: Vec<usize>,
    pub poisoned: Vec<usize>,
}

/// Histogram of per-sample max softmax probability over [0, 1]; a value of
/// exactly 1 lands in the last bin.
pub fn confidence_histogram(samples: &[EvalSample], bins: usize) -> Result<ConfidenceHistogram> {
    if bins == 0 {
        return Err(Error::InvalidParameter { msg: "bins must be >= 1".into() });
    }
    let mut clean = vec![0usize; bins];
    let mut poisoned = vec![0usize; bins];
    for s in samples {
        let idx = bin_index(s.max_confidence(), bins);
        if s.triggered {
            poisoned[idx] += 1;
        } else {
            clean[idx] += 1;
        }
    }
    Ok(ConfidenceHistogram { bins, clean, poisoned })
}

pub fn bin_index(value: f64, bins: usize) -> usize {
    ((value * bins as f64).floor() as usize).min(bins - 1)
}

/// Mean-centered projection onto the top-2 principal directions, with the
/// explained-variance fraction per component (non-increasing).
pub fn project_embeddings_2d(embeddings: &DMatrix<f64>) -> Result<(DMatrix<f64>, [f64; 2])> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter {
            msg: format!("projection needs at least 2 points, got {n}"),
        });
    }
    let dim = embeddings.ncols();
    let mut centered = embeddings.clone();
    for c in 0..dim {
        let mean = centered.column(c).sum() / n as f64;
        for r in 0..n {
            centered[(r, c)] -= mean;
        }
    }

    let k = dim.min(2);
    let coords = if k == 0 {
        DMatrix::zeros(n, 2)
    } else {
        let basis = top_right_singular_vectors(&centered, k);
        let proj = &centered * basis;
        let mut out = DMatrix::zeros(n, 2);
        out.view_mut((0, 0), (n, k)).copy_from(&proj);
        out
    };

    let sv = crate::features::singular_values(&centered);
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let frac = |i: usize| {
        if total == 0.0 {
            0.0
        } else {
            sv.get(i).map(|s| s * s / total).unwrap_or(0.0)
        }
    };
    Ok((coords, [frac(0), frac(1)]))
}

/// Macro F1 over the classes present in the ground truth.
pub fn macro_f1(truth: &[usize], predicted: &[usize], num_labels: usize) -> f64 {
    let mut tp = vec![0usize; num_labels];
    let mut fp = vec![0usize; num_labels];
    let mut fn_ = vec![0usize; num_labels];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            tp[t] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let mut total = 0.0;
    let mut classes = 0usize;
    for l in 0..num_labels {
        if tp[l] + fn_[l] == 0 {
            continue; // no support in truth
        }
        classes += 1;
        let denom = 2 * tp[l] + fp[l] + fn_[l];
        if denom > 0 {
            total += 2.0 * tp[l] as f64 / denom as f64;
        }
    }
    if classes == 0 {
        0.0
    } else {
        total / classes as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sample(triggered: bool, target: Option<usize>, softmax: Vec<f64>, true_label: usize) -> EvalSample {
        EvalSample {
            node: 0,
            true_label,
            triggered,
            attack_target: target,
            softmax,
            mean_degree: 2.0,
            local_homophily: 0.5,
        }
    }

    #[test]
    fn perfect_attack() {
        let samples = vec![
            sample(true, Some(1), vec![0.0, 1.0], 0),
            sample(true, Some(1), vec![0.0, 1.0], 0),
            sample(false, None, vec![1.0, 0.0], 0),
        ];
        let r = evaluate_attack(&samples, 0.05).unwrap();
        assert_eq!(r.asr, Some(1.0));
        assert_eq!(r.amc, Some(1.0));
        assert_eq!(r.ca, Some(1.0));
        assert_eq!(r.pr, Some(0.05));
    }

    #[test]
    fn zero_successes_leave_amc_absent() {
        let samples = vec![
            sample(true, Some(1), vec![1.0, 0.0], 0),
            sample(false, None, vec![1.0, 0.0], 0),
        ];
        let r = evaluate_attack(&samples, 0.02).unwrap();
        assert_eq!(r.asr, Some(0.0));
        assert_eq!(r.amc, None);
    }

    #[test]
    fn partial_success_arithmetic() {
        // 3 of 4 triggered succeed with target confidences 0.8 / 0.6 / 1.0.
        let samples = vec![
            sample(true, Some(1), vec![0.2, 0.8], 0),
            sample(true, Some(1), vec![0.4, 0.6], 0),
            sample(true, Some(1), vec![0.0, 1.0], 0),
            sample(true, Some(1), vec![0.9, 0.1], 0),
            sample(false, None, vec![1.0, 0.0], 0),
        ];
        let r = evaluate_attack(&samples, 0.1).unwrap();
        assert_relative_eq!(r.asr.unwrap(), 0.75);
        assert_relative_eq!(r.amc.unwrap(), 0.8);
        // ASR x attacked count is an integer success count.
        let successes = r.asr.unwrap() * r.attacked_count.unwrap() as f64;
        assert_relative_eq!(successes, successes.round());
    }

    #[test]
    fn empty_halves_rejected() {
        let only_clean = vec![sample(false, None, vec![1.0, 0.0], 0)];
        assert!(evaluate_attack(&only_clean, 0.1).is_err());
        let only_trig = vec![sample(true, Some(0), vec![1.0, 0.0], 0)];
        assert!(evaluate_attack(&only_trig, 0.1).is_err());
    }

    #[test]
    fn histogram_uniform_softmax() {
        // Uniform over 4 labels: max prob 0.25 lands in the bin holding 0.25.
        let samples: Vec<EvalSample> =
            (0..6).map(|_| sample(false, None, vec![0.25; 4], 0)).collect();
        let h = confidence_histogram(&samples, 10).unwrap();
        assert_eq!(h.clean[bin_index(0.25, 10)], 6);
        assert_eq!(h.clean.iter().sum::<usize>(), 6);
        assert_eq!(h.poisoned.iter().sum::<usize>(), 0);
    }

    #[test]
    fn histogram_matches_loop_oracle() {
        let mixed = vec![
            sample(false, None, vec![0.5, 0.5], 0),
            sample(false, None, vec![0.91, 0.09], 0),
            sample(true, Some(0), vec![1.0, 0.0], 0),
            sample(true, Some(0), vec![0.34, 0.66], 1),
            sample(false, None, vec![0.05, 0.95], 1),
        ];
        let bins = 4;
        let h = confidence_histogram(&mixed, bins).unwrap();

        // Naive loop oracle.
        let mut clean = vec![0usize; bins];
        let mut poisoned = vec![0usize; bins];
        for s in &mixed {
            let m = s.softmax.iter().cloned().fold(0.0, f64::max);
            let mut idx = 0;
            while idx + 1 < bins && m >= (idx + 1) as f64 / bins as f64 {
                idx += 1;
            }
            if s.triggered {
                poisoned[idx] += 1
            } else {
                clean[idx] += 1
            }
        }
        assert_eq!(h.clean, clean);
        assert_eq!(h.poisoned, poisoned);
        assert_eq!(
            h.clean.iter().sum::<usize>() + h.poisoned.iter().sum::<usize>(),
            mixed.len()
        );
    }

    #[test]
    fn projection_of_planar_points_explains_everything() {
        // Points on a 2-D plane embedded in 5 dims.
        let mut m = DMatrix::zeros(8, 5);
        for i in 0..8 {
            let a = i as f64;
            let b = (i as f64 * 0.7).sin() * 3.0;
            // plane spanned by (1,1,0,0,0)/sqrt(2) and (0,0,1,-1,0)/sqrt(2)
            m[(i, 0)] = a;
            m[(i, 1)] = a;
            m[(i, 2)] = b;
            m[(i, 3)] = -b;
        }
        let (_, frac) = project_embeddings_2d(&m).unwrap();
        assert_relative_eq!(frac[0] + frac[1], 1.0, epsilon = 1e-9);
        assert!(frac[0] >= frac[1]);
    }

    #[test]
    fn collinear_points_have_zero_second_component() {
        let m = DMatrix::from_fn(5, 3, |r, c| r as f64 * [1.0, 2.0, -1.0][c]);
        let (coords, frac) = project_embeddings_2d(&m).unwrap();
        assert_relative_eq!(frac[1], 0.0, epsilon = 1e-9);
        for r in 0..5 {
            assert_relative_eq!(coords[(r, 1)], 0.0, epsilon = 1e-8);
        }
    }

    #[test]
    fn projection_contracts_distances_and_matches_eigen_oracle() {
        let m = DMatrix::from_fn(20, 5, |r, c| ((r * 13 + c * 7) % 11) as f64 - 5.0);
        let (coords, frac) = project_embeddings_2d(&m).unwrap();

        // Pairwise distances in 2-D never exceed the originals.
        for i in 0..20 {
            for j in (i + 1)..20 {
                let orig: f64 =
                    (0..5).map(|c| (m[(i, c)] - m[(j, c)]).powi(2)).sum::<f64>().sqrt();
                let proj: f64 =
                    (0..2).map(|c| (coords[(i, c)] - coords[(j, c)]).powi(2)).sum::<f64>().sqrt();
                assert!(proj <= orig + 1e-9);
            }
        }

        // Retained variance matches an independent eigendecomposition of the
        // covariance matrix.
        let n = 20;
        let mut centered = m.clone();
        for c in 0..5 {
            let mean = centered.column(c).sum() / n as f64;
            for r in 0..n {
                centered[(r, c)] -= mean;
            }
        }
        let cov = centered.transpose() * &centered;
        let eig = nalgebra::SymmetricEigen::new(cov);
        let mut evals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        evals.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let total: f64 = evals.iter().sum();
        let expect = (evals[0] + evals[1]) / total;
        assert!((frac[0] + frac[1] - expect).abs() < 1e-8);
    }

    #[test]
    fn projection_needs_two_points() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert!(project_embeddings_2d(&m).is_err());
    }

    #[test]
    fn macro_f1_hand_check() {
        // Two classes, perfect on 0, never predicts 1.
        let truth = vec![0, 0, 1, 1];
        let pred = vec![0, 0, 0, 0];
        // class 0: tp=2 fp=2 fn=0 -> f1 = 4/6; class 1: tp=0 fn=2 -> 0.
        let f1 = macro_f1(&truth, &pred, 2);
        assert_relative_eq!(f1, (4.0 / 6.0) / 2.0, epsilon = 1e-12);
        assert_relative_eq!(macro_f1(&[0, 1], &[0, 1], 2), 1.0);
    }
}
