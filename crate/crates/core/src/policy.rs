//! Early-exit stopping criteria, adaptive single-sample inference, and
//! RAD-constrained threshold calibration.

use serde::{Deserialize, Serialize};

use crate::dataset::SampleSet;
use crate::error::{Error, Result};
use crate::multiexit::MultiExitNetwork;
use crate::tensor::{entropy, softmax, Tensor};

/// Which statistic of the exit's softmax decides stopping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopCriterion {
    /// Stop when the max softmax probability is at least the threshold.
    Confidence,
    /// Stop when the prediction entropy (nats) is at most the threshold.
    Entropy,
}

/// A per-exit threshold; `Never` disables the exit regardless of criterion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged, rename_all = "snake_case")]
pub enum Threshold {
    Value(f64),
    Never,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub criterion: StopCriterion,
    /// One threshold per exit. The final exit always fires regardless.
    pub thresholds: Vec<Threshold>,
}

impl ExitPolicy {
    /// The same threshold at every exit.
    pub fn shared(criterion: StopCriterion, threshold: f64, num_exits: usize) -> Self {
        ExitPolicy {
            criterion,
            thresholds: vec![Threshold::Value(threshold); num_exits],
        }
    }

    /// A policy that never exits early.
    pub fn never(criterion: StopCriterion, num_exits: usize) -> Self {
        ExitPolicy {
            criterion,
            thresholds: vec![Threshold::Never; num_exits],
        }
    }

    pub fn validate(&self, num_exits: usize) -> Result<()> {
        if self.thresholds.len() != num_exits {
            return Err(Error::InvalidConfig(format!(
                "policy has {} thresholds for {} exits",
                self.thresholds.len(),
                num_exits
            )));
        }
        for t in &self.thresholds {
            if let Threshold::Value(v) = t {
                let ok = match self.criterion {
                    StopCriterion::Confidence => (0.0..=1.0).contains(v),
                    StopCriterion::Entropy => *v >= 0.0,
                };
                if !ok {
                    return Err(Error::InvalidConfig(format!(
                        "threshold {v} out of range for {:?}",
                        self.criterion
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Outcome of one adaptive inference.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceRecord {
    /// 0-based index of the exit that fired.
    pub exit_index: usize,
    /// Cumulative cost fraction of that exit.
    pub cost_fraction: f64,
    pub predicted_label: usize,
    /// Confidence or entropy observed at the firing exit.
    pub score: f64,
}

/// The stopping statistic of one exit's logits under `criterion`.
pub fn exit_score(logits: &Tensor, criterion: StopCriterion) -> Result<f64> {
    let probs = softmax(logits)?;
    Ok(match criterion {
        StopCriterion::Confidence => probs.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        StopCriterion::Entropy => entropy(&probs),
    })
}

/// Whether an exit with these logits fires under `criterion` and `threshold`.
///
/// A uniform output has the lowest confidence (`1/m`) and the highest entropy
/// (`ln m`), so it fails every confidence threshold above `1/m` and every
/// entropy threshold below `ln m`.
pub fn should_stop(logits: &Tensor, criterion: StopCriterion, threshold: Threshold) -> Result<bool> {
    let t = match threshold {
        Threshold::Never => return Ok(false),
        Threshold::Value(t) => t,
    };
    let score = exit_score(logits, criterion)?;
    Ok(match criterion {
        StopCriterion::Confidence => score >= t,
        StopCriterion::Entropy => score <= t,
    })
}

/// Runs one sample through the network, stopping at the first exit whose
/// criterion fires; the final exit fires unconditionally.
pub fn adaptive_infer(
    net: &MultiExitNetwork,
    policy: &ExitPolicy,
    x: &Tensor,
) -> Result<InferenceRecord> {
    policy.validate(net.num_exits())?;
    let (logits, _) = net.forward_all_exits(x, false)?;
    let last = net.num_exits() - 1;
    for (i, l) in logits.iter().enumerate() {
        let fired = i == last || should_stop(l, policy.criterion, policy.thresholds[i])?;
        if fired {
            return Ok(InferenceRecord {
                exit_index: i,
                cost_fraction: net.cost_fractions()[i],
                predicted_label: softmax(l)?.argmax(),
                score: exit_score(l, policy.criterion)?,
            });
        }
    }
    unreachable!("final exit always fires");
}

/// Calibration output: the chosen policy plus the holdout numbers backing it.
///
/// Serializes flat as `{criterion, thresholds, rad_budget, holdout_accuracy,
/// full_accuracy, feasible}`, the policy schema embedded in experiment
/// reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationResult {
    #[serde(flatten)]
    pub policy: ExitPolicy,
    pub rad_budget: f64,
    pub holdout_accuracy: f64,
    /// Final-exit-only accuracy on the holdout set.
    pub full_accuracy: f64,
    #[serde(skip)]
    pub holdout_efficacy: f64,
    /// False when no grid candidate met the RAD budget and the "never"
    /// policy was returned instead.
    pub feasible: bool,
}

/// The default shared-threshold search grids: 101 confidence values
/// `0.00..=1.00`, or 101 entropy values `ln(m) * {1.00..=0.00}`.
pub fn default_grid(criterion: StopCriterion, num_classes: usize) -> Vec<f64> {
    match criterion {
        StopCriterion::Confidence => (0..=100).map(|k| k as f64 / 100.0).collect(),
        StopCriterion::Entropy => (0..=100)
            .map(|k| (num_classes as f64).ln() * (100 - k) as f64 / 100.0)
            .collect(),
    }
}

struct ScoredSample {
    scores: Vec<f64>,
    predictions: Vec<usize>,
    label: usize,
}

/// Picks the shared threshold maximizing holdout efficacy subject to
/// `RAD = (acc_full - acc_policy) / acc_full <= rad_budget`.
///
/// Ties within 1e-12 efficacy go to the higher accuracy, then to the more
/// conservative threshold. When nothing is feasible the "never" policy is
/// returned with `feasible = false`.
pub fn calibrate(
    net: &MultiExitNetwork,
    holdout: &SampleSet,
    criterion: StopCriterion,
    rad_budget: f64,
    grid: &[f64],
) -> Result<CalibrationResult> {
    if holdout.is_empty() {
        return Err(Error::EmptyHoldout);
    }
    if !(0.0..1.0).contains(&rad_budget) && rad_budget != 1.0 {
        return Err(Error::InvalidConfig(format!(
            "rad_budget {rad_budget} outside (0, 1]"
        )));
    }
    let k = net.num_exits();

    // One forward pass per sample; every candidate threshold is then O(K).
    let mut scored = Vec::with_capacity(holdout.len());
    for (x, label) in holdout.iter() {
        if label >= net.num_classes() {
            return Err(Error::LabelOutOfRange {
                label,
                num_classes: net.num_classes(),
            });
        }
        let (logits, _) = net.forward_all_exits(x, false)?;
        let mut scores = Vec::with_capacity(k);
        let mut predictions = Vec::with_capacity(k);
        for l in &logits {
            scores.push(exit_score(l, criterion)?);
            predictions.push(softmax(l)?.argmax());
        }
        scored.push(ScoredSample {
            scores,
            predictions,
            label,
        });
    }

    let n = scored.len() as f64;
    let full_accuracy = scored
        .iter()
        .filter(|s| s.predictions[k - 1] == s.label)
        .count() as f64
        / n;

    let evaluate_threshold = |t: f64| -> (f64, f64) {
        let fires = |score: f64| match criterion {
            StopCriterion::Confidence => score >= t,
            StopCriterion::Entropy => score <= t,
        };
        let mut correct = 0usize;
        let mut costs = Vec::with_capacity(scored.len());
        for s in &scored {
            let exit = (0..k - 1).find(|&i| fires(s.scores[i])).unwrap_or(k - 1);
            if s.predictions[exit] == s.label {
                correct += 1;
            }
            costs.push(net.cost_fractions()[exit]);
        }
        let curve = crate::metrics::eec_from_costs(&costs, crate::metrics::DEFAULT_GRID_SIZE)
            .expect("non-empty holdout");
        (crate::metrics::efficacy(&curve), correct as f64 / n)
    };

    let more_conservative = |a: f64, b: f64| -> bool {
        // Is `a` more conservative than `b`?
        match criterion {
            StopCriterion::Confidence => a > b,
            StopCriterion::Entropy => a < b,
        }
    };

    let mut best: Option<(f64, f64, f64)> = None; // (threshold, efficacy, accuracy)
    for &t in grid {
        let (eff, acc) = evaluate_threshold(t);
        let rad = if full_accuracy > 0.0 {
            (full_accuracy - acc) / full_accuracy
        } else {
            0.0
        };
        if rad > rad_budget {
            continue;
        }
        let better = match &best {
            None => true,
            Some((bt, beff, bacc)) => {
                if eff > beff + 1e-12 {
                    true
                } else if (eff - beff).abs() <= 1e-12 {
                    if acc > *bacc {
                        true
                    } else {
                        acc == *bacc && more_conservative(t, *bt)
                    }
                } else {
                    false
                }
            }
        };
        if better {
            best = Some((t, eff, acc));
        }
    }

    match best {
        Some((t, eff, acc)) => Ok(CalibrationResult {
            policy: ExitPolicy::shared(criterion, t, k),
            rad_budget,
            holdout_accuracy: acc,
            full_accuracy,
            holdout_efficacy: eff,
            feasible: true,
        }),
        None => Ok(CalibrationResult {
            policy: ExitPolicy::never(criterion, k),
            rad_budget,
            holdout_accuracy: full_accuracy,
            full_accuracy,
            holdout_efficacy: 0.0,
            feasible: false,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{self, toy_net};
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_fail_reasonable_thresholds() {
        let logits = Tensor::zeros(vec![10]);
        // Confidence is exactly 1/10, below 0.5.
        assert!(!should_stop(&logits, StopCriterion::Confidence, Threshold::Value(0.5)).unwrap());
        // Entropy is ln 10 ~ 2.3026, above 0.5.
        assert!(!should_stop(&logits, StopCriterion::Entropy, Threshold::Value(0.5)).unwrap());
    }

    #[test]
    fn confident_logits_pass_high_threshold() {
        // Confidence of [10, 0 x9] is e^10/(e^10+9) ~ 0.99959, checked
        // against an independent high-precision evaluation.
        let mut logits = Tensor::zeros(vec![10]);
        logits.data_mut()[0] = 10.0;
        let score = exit_score(&logits, StopCriterion::Confidence).unwrap();
        assert!((score - 0.9995915675173918).abs() < 1e-12);
        assert!(should_stop(&logits, StopCriterion::Confidence, Threshold::Value(0.99)).unwrap());
    }

    #[test]
    fn never_threshold_never_stops() {
        let mut logits = Tensor::zeros(vec![4]);
        logits.data_mut()[2] = 100.0;
        assert!(!should_stop(&logits, StopCriterion::Confidence, Threshold::Never).unwrap());
        assert!(!should_stop(&logits, StopCriterion::Entropy, Threshold::Never).unwrap());
    }

    #[test]
    fn never_policy_exits_at_final() {
        let net = toy_net(40);
        let policy = ExitPolicy::never(StopCriterion::Confidence, net.num_exits());
        let mut rng = testutil::rng(41);
        let x = testutil::random_tensor(&mut rng, vec![1, 4, 4], 1.0);
        let rec = adaptive_infer(&net, &policy, &x).unwrap();
        assert_eq!(rec.exit_index, net.num_exits() - 1);
        assert_eq!(rec.cost_fraction, 1.0);
    }

    #[test]
    fn zero_confidence_threshold_exits_first() {
        let net = toy_net(42);
        let policy = ExitPolicy::shared(StopCriterion::Confidence, 0.0, net.num_exits());
        let mut rng = testutil::rng(43);
        let x = testutil::random_tensor(&mut rng, vec![1, 4, 4], 1.0);
        let rec = adaptive_infer(&net, &policy, &x).unwrap();
        assert_eq!(rec.exit_index, 0);
    }

    #[test]
    fn stops_at_first_confident_exit() {
        // Exit 1 head has zero weights (uniform output), exit 2 is sharp.
        use crate::multiexit::{ExitHead, MultiExitNetwork};
        use crate::tensor::Layer;
        let mut rng = testutil::rng(44);
        let blocks = vec![
            vec![testutil::random_dense(&mut rng, 4, 4), Layer::Relu],
            vec![testutil::random_dense(&mut rng, 4, 4)],
        ];
        let mut sharp = testutil::random_dense(&mut rng, 4, 3);
        if let Layer::Dense { weight, bias } = &mut sharp {
            for v in weight.data_mut() {
                *v *= 30.0;
            }
            bias.data_mut()[0] = 5.0;
        }
        let exits = vec![
            ExitHead {
                attach_after_block: 0,
                layers: vec![Layer::Dense {
                    weight: Tensor::zeros(vec![3, 4]),
                    bias: Tensor::zeros(vec![3]),
                }],
            },
            ExitHead {
                attach_after_block: 1,
                layers: vec![sharp],
            },
        ];
        let net = MultiExitNetwork::new(blocks, exits, 3, vec![4]).unwrap();
        let policy = ExitPolicy::shared(StopCriterion::Confidence, 0.9, 2);
        let x = testutil::random_tensor(&mut rng, vec![4], 1.0);
        let rec = adaptive_infer(&net, &policy, &x).unwrap();
        assert_eq!(rec.exit_index, 1, "uniform exit 1 must not fire at T=0.9");
    }

    fn tiny_holdout(net: &crate::multiexit::MultiExitNetwork, n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
        let mut rng = testutil::rng(seed);
        let samples: Vec<Tensor> = (0..n)
            .map(|_| testutil::random_tensor(&mut rng, net.input_shape().to_vec(), 1.0))
            .collect();
        // Label = final-exit prediction, so full accuracy is 1.0.
        let labels = samples
            .iter()
            .map(|x| {
                let (logits, _) = net.forward_all_exits(x, false).unwrap();
                softmax(logits.last().unwrap()).unwrap().argmax()
            })
            .collect();
        (samples, labels)
    }

    #[test]
    fn vacuous_budget_admits_most_aggressive_candidate() {
        let net = toy_net(50);
        let (samples, labels) = tiny_holdout(&net, 24, 51);
        let holdout = SampleSet::new(&samples, &labels).unwrap();
        let grid = default_grid(StopCriterion::Confidence, net.num_classes());
        let res = calibrate(&net, &holdout, StopCriterion::Confidence, 1.0, &grid).unwrap();
        assert!(res.feasible);
        // With RAD unconstrained the most aggressive candidate is feasible,
        // so the winner matches its efficacy: everything exits first.
        let aggressive = ExitPolicy::shared(StopCriterion::Confidence, 0.0, net.num_exits());
        let mut costs = Vec::new();
        for (x, _) in holdout.iter() {
            costs.push(adaptive_infer(&net, &aggressive, x).unwrap().cost_fraction);
        }
        let curve = crate::metrics::eec_from_costs(&costs, crate::metrics::DEFAULT_GRID_SIZE).unwrap();
        let aggressive_eff = crate::metrics::efficacy(&curve);
        assert!((res.holdout_efficacy - aggressive_eff).abs() <= 1e-12);
    }

    #[test]
    fn calibration_respects_rad_budget_by_independent_recheck() {
        let net = toy_net(52);
        let (samples, labels) = tiny_holdout(&net, 40, 53);
        let holdout = SampleSet::new(&samples, &labels).unwrap();
        let grid = default_grid(StopCriterion::Confidence, net.num_classes());
        let res = calibrate(&net, &holdout, StopCriterion::Confidence, 0.05, &grid).unwrap();

        // Re-evaluate the returned policy from scratch.
        let mut correct = 0usize;
        for (x, y) in holdout.iter() {
            let rec = adaptive_infer(&net, &res.policy, &x).unwrap();
            if rec.predicted_label == y {
                correct += 1;
            }
        }
        let acc = correct as f64 / holdout.len() as f64;
        assert!((acc - res.holdout_accuracy).abs() < 1e-12);
        if res.feasible && res.full_accuracy > 0.0 {
            assert!((res.full_accuracy - acc) / res.full_accuracy <= 0.05 + 1e-12);
        }
    }

    #[test]
    fn entropy_calibration_runs() {
        let net = toy_net(54);
        let (samples, labels) = tiny_holdout(&net, 24, 55);
        let holdout = SampleSet::new(&samples, &labels).unwrap();
        let grid = default_grid(StopCriterion::Entropy, net.num_classes());
        let res = calibrate(&net, &holdout, StopCriterion::Entropy, 0.15, &grid).unwrap();
        res.policy.validate(net.num_exits()).unwrap();
    }

    proptest! {
        // Raising any single confidence threshold never lowers the exit index.
        #[test]
        fn exit_monotone_in_confidence_threshold(
            seed in 0u64..50,
            exit_idx in 0usize..2,
            t0 in 0.0f64..1.0,
            bump in 0.0f64..0.5,
        ) {
            let net = toy_net(seed);
            let mut rng = testutil::rng(seed.wrapping_add(1000));
            let x = testutil::random_tensor(&mut rng, vec![1, 4, 4], 1.0);

            let mut policy = ExitPolicy::shared(StopCriterion::Confidence, 0.7, net.num_exits());
            policy.thresholds[exit_idx] = Threshold::Value(t0.min(1.0));
            let before = adaptive_infer(&net, &policy, &x).unwrap().exit_index;
            policy.thresholds[exit_idx] = Threshold::Value((t0 + bump).min(1.0));
            let after = adaptive_infer(&net, &policy, &x).unwrap().exit_index;
            prop_assert!(after >= before);
        }
    }
}
