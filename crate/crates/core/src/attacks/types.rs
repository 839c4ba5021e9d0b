//! Attack configuration: budgets, scopes, target distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::multiexit::MultiExitNetwork;
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Linf,
    L2,
    L1,
}

impl NormKind {
    pub fn name(&self) -> &'static str {
        match self {
            NormKind::Linf => "linf",
            NormKind::L2 => "l2",
            NormKind::L1 => "l1",
        }
    }
}

/// Norm-bounded perturbation budget.
///
/// The conventional bounds are `linf 0.03`, `l1 8` (small images) or `16`
/// (larger ones), and `l2 0.35` or `0.6`; arbitrary values are accepted for
/// synthetic data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub norm: NormKind,
    pub epsilon: f64,
}

impl PerturbationBudget {
    pub fn linf(epsilon: f64) -> Self {
        PerturbationBudget {
            norm: NormKind::Linf,
            epsilon,
        }
    }

    pub fn l2(epsilon: f64) -> Self {
        PerturbationBudget {
            norm: NormKind::L2,
            epsilon,
        }
    }

    pub fn l1(epsilon: f64) -> Self {
        PerturbationBudget {
            norm: NormKind::L1,
            epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 || !self.epsilon.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }

    pub fn expect_norm(&self, expected: NormKind) -> Result<()> {
        self.validate()?;
        if self.norm != expected {
            return Err(Error::BudgetMismatch {
                expected: expected.name(),
                found: self.norm.name(),
            });
        }
        Ok(())
    }
}

/// How many inputs one perturbation must cover.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackScope {
    /// One perturbation per input.
    PerSample,
    /// A single perturbation crafted on a training sample batch and reused
    /// on every input.
    Universal,
    /// A single perturbation crafted on one class's training samples.
    ClassUniversal(usize),
}

/// What the slowdown objective pushes each exit's output towards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// The uniform distribution: lowest confidence, highest entropy.
    Uniform,
    /// Mostly uniform with weight `delta` on the true label, slowing the
    /// model down while keeping predictions intact.
    PreserveAccuracy(f64),
    /// Mostly uniform with weight `delta` on a fixed wrong label (the
    /// least-likely clean prediction).
    HurtAccuracy(f64),
}

impl TargetMode {
    pub fn validate(&self) -> Result<()> {
        match self {
            TargetMode::Uniform => Ok(()),
            TargetMode::PreserveAccuracy(d) | TargetMode::HurtAccuracy(d) => {
                if (0.0..1.0).contains(d) {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "target mix weight {d} outside [0, 1)"
                    )))
                }
            }
        }
    }
}

/// A per-class probability vector used as the attack target.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetDistribution {
    probs: Tensor,
}

impl TargetDistribution {
    pub fn new(probs: Tensor) -> Result<Self> {
        if probs.data().iter().any(|&p| p < 0.0) {
            return Err(Error::InvalidTarget("negative probability".into()));
        }
        let sum: f64 = probs.data().iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidTarget(format!("sums to {sum}")));
        }
        Ok(TargetDistribution { probs })
    }

    pub fn uniform(num_classes: usize) -> Self {
        TargetDistribution {
            probs: Tensor::filled(vec![num_classes], 1.0 / num_classes as f64),
        }
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

/// Builds the target distribution for one sample.
///
/// `uniform` needs nothing; `preserve_accuracy` mixes toward `true_label`;
/// `hurt_accuracy` mixes toward `wrong_label` (derive it with
/// [`least_likely_label`]).
pub fn make_target(
    mode: TargetMode,
    num_classes: usize,
    true_label: Option<usize>,
    wrong_label: Option<usize>,
) -> Result<TargetDistribution> {
    mode.validate()?;
    let uniform = 1.0 / num_classes as f64;
    let mix = |delta: f64, hot: usize| -> Result<TargetDistribution> {
        if hot >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: hot,
                num_classes,
            });
        }
        let mut probs = vec![(1.0 - delta) * uniform; num_classes];
        probs[hot] += delta;
        TargetDistribution::new(Tensor::new(vec![num_classes], probs)?)
    };
    match mode {
        TargetMode::Uniform => Ok(TargetDistribution::uniform(num_classes)),
        TargetMode::PreserveAccuracy(delta) => {
            let y = true_label.ok_or_else(|| {
                Error::InvalidTarget("preserve_accuracy requires the true label".into())
            })?;
            mix(delta, y)
        }
        TargetMode::HurtAccuracy(delta) => {
            let l = wrong_label.ok_or_else(|| {
                Error::InvalidTarget("hurt_accuracy requires a wrong label".into())
            })?;
            mix(delta, l)
        }
    }
}

/// Least-likely class under the final exit's clean prediction, excluding the
/// true label so the target is always wrong.
pub fn least_likely_label(net: &MultiExitNetwork, x: &Tensor, true_label: usize) -> Result<usize> {
    let probs = softmax(&net.final_logits(x)?)?;
    let mut best: Option<(f64, usize)> = None;
    for (j, &p) in probs.data().iter().enumerate() {
        if j == true_label {
            continue;
        }
        if best.map_or(true, |(bp, _)| p < bp) {
            best = Some((p, j));
        }
    }
    best.map(|(_, j)| j).ok_or_else(|| {
        Error::InvalidTarget("cannot pick a wrong label with a single class".into())
    })
}

/// Which exits enter the slowdown objective.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitSelection {
    /// All exits but the final one (the default objective).
    Internal,
    /// Every exit, including the final classifier.
    All,
    /// Explicit 0-based exit indices.
    Custom(Vec<usize>),
}

impl ExitSelection {
    pub fn resolve(&self, num_exits: usize) -> Result<Vec<usize>> {
        let exits: Vec<usize> = match self {
            ExitSelection::Internal => (0..num_exits.saturating_sub(1)).collect(),
            ExitSelection::All => (0..num_exits).collect(),
            ExitSelection::Custom(idx) => {
                for &i in idx {
                    if i >= num_exits {
                        return Err(Error::InvalidConfig(format!(
                            "exit {i} out of range for {num_exits} exits"
                        )));
                    }
                }
                idx.clone()
            }
        };
        if exits.is_empty() {
            return Err(Error::EmptyExitSet);
        }
        Ok(exits)
    }
}

/// Multiplicative step-size decay applied every `every` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    pub step_size: f64,
    pub scope: AttackScope,
    pub target_mode: TargetMode,
    pub exits: ExitSelection,
    pub step_decay: Option<StepDecay>,
    /// Gradient sparsity percentile for l1 attacks, in (0, 100).
    pub sparsity_percentile: f64,
    /// Norm adjustment factor gamma for the l2 attack.
    pub norm_adjust: f64,
    /// Starting perturbation norm for the l2 attack.
    pub initial_norm: f64,
    pub seed: u64,
}

impl AttackConfig {
    /// Per-sample linf slowdown attack: 30 iterations, step 0.002 at the
    /// conventional epsilon 0.03; the step scales linearly with epsilon.
    pub fn deepsloth_linf_standard(epsilon: f64) -> Self {
        AttackConfig {
            iterations: 30,
            step_size: epsilon / 15.0,
            scope: AttackScope::PerSample,
            target_mode: TargetMode::Uniform,
            exits: ExitSelection::Internal,
            step_decay: None,
            sparsity_percentile: 99.0,
            norm_adjust: 0.1,
            initial_norm: 1.0,
            seed: 0,
        }
    }

    /// Accuracy-preserving/hurting variants run longer with a smaller step:
    /// 75 iterations at half the standard step.
    pub fn deepsloth_linf_accuracy_variant(epsilon: f64, mode: TargetMode) -> Self {
        AttackConfig {
            iterations: 75,
            step_size: epsilon / 30.0,
            target_mode: mode,
            ..Self::deepsloth_linf_standard(epsilon)
        }
    }

    /// Universal linf slowdown attack: 12 iterations, initial step 0.005 at
    /// epsilon 0.03 (scaled linearly), decayed by 10x every 4 iterations.
    pub fn deepsloth_linf_universal(epsilon: f64, scope: AttackScope) -> Self {
        AttackConfig {
            iterations: 12,
            step_size: epsilon / 6.0,
            scope,
            step_decay: Some(StepDecay {
                every: 4,
                factor: 0.1,
            }),
            ..Self::deepsloth_linf_standard(epsilon)
        }
    }

    /// l2 slowdown attack: 550 iterations, gamma 0.1, initial norm 1.0.
    pub fn deepsloth_l2_standard() -> Self {
        AttackConfig {
            iterations: 550,
            step_size: 0.1,
            scope: AttackScope::PerSample,
            target_mode: TargetMode::Uniform,
            exits: ExitSelection::Internal,
            step_decay: None,
            sparsity_percentile: 99.0,
            norm_adjust: 0.1,
            initial_norm: 1.0,
            seed: 0,
        }
    }

    /// l1 slowdown attack: 250 iterations, step 0.5, sparsity 99.
    pub fn deepsloth_l1_standard() -> Self {
        AttackConfig {
            iterations: 250,
            step_size: 0.5,
            scope: AttackScope::PerSample,
            target_mode: TargetMode::Uniform,
            exits: ExitSelection::Internal,
            step_decay: None,
            sparsity_percentile: 99.0,
            norm_adjust: 0.1,
            initial_norm: 1.0,
            seed: 0,
        }
    }

    /// Universal l1 variant: 100 iterations, sparsity 90.
    pub fn deepsloth_l1_universal(scope: AttackScope) -> Self {
        AttackConfig {
            iterations: 100,
            sparsity_percentile: 90.0,
            scope,
            ..Self::deepsloth_l1_standard()
        }
    }

    /// Misclassification PGD: `iterations` steps of size `2.5 * eps / iterations`.
    pub fn pgd(epsilon: f64, iterations: usize) -> Self {
        AttackConfig {
            iterations,
            step_size: 2.5 * epsilon / iterations.max(1) as f64,
            scope: AttackScope::PerSample,
            target_mode: TargetMode::Uniform,
            exits: ExitSelection::All,
            step_decay: None,
            sparsity_percentile: 99.0,
            norm_adjust: 0.1,
            initial_norm: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.step_size <= 0.0 || !self.step_size.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "step size {} must be positive",
                self.step_size
            )));
        }
        if !(0.0 < self.sparsity_percentile && self.sparsity_percentile < 100.0) {
            return Err(Error::InvalidConfig(format!(
                "sparsity percentile {} outside (0, 100)",
                self.sparsity_percentile
            )));
        }
        if self.norm_adjust <= 0.0 || self.norm_adjust >= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "norm adjustment {} outside (0, 1)",
                self.norm_adjust
            )));
        }
        if self.initial_norm <= 0.0 {
            return Err(Error::InvalidConfig("initial norm must be positive".into()));
        }
        if let Some(d) = &self.step_decay {
            if d.every == 0 || d.factor <= 0.0 || d.factor > 1.0 {
                return Err(Error::InvalidConfig("bad step decay".into()));
            }
        }
        self.target_mode.validate()
    }

    /// Step size at iteration `t` after decay.
    pub fn step_at(&self, t: usize) -> f64 {
        match &self.step_decay {
            Some(d) => self.step_size * d.factor.powi((t / d.every) as i32),
            None => self.step_size,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_target_is_one_over_m() {
        let t = make_target(TargetMode::Uniform, 10, None, None).unwrap();
        for &p in t.probs().data() {
            assert!((p - 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn preserve_with_zero_delta_is_uniform() {
        let t = make_target(TargetMode::PreserveAccuracy(0.0), 4, Some(1), None).unwrap();
        for &p in t.probs().data() {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn preserve_mixes_mass_onto_true_label() {
        let t = make_target(TargetMode::PreserveAccuracy(0.2), 4, Some(2), None).unwrap();
        let expected = [0.2, 0.2, 0.4, 0.2];
        for (p, e) in t.probs().data().iter().zip(expected) {
            assert!((p - e).abs() < 1e-12);
        }
    }

    #[test]
    fn hurt_requires_wrong_label() {
        assert!(make_target(TargetMode::HurtAccuracy(0.2), 4, Some(1), None).is_err());
        let t = make_target(TargetMode::HurtAccuracy(0.2), 4, Some(1), Some(3)).unwrap();
        assert!((t.probs().data()[3] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn invalid_delta_is_rejected() {
        assert!(make_target(TargetMode::PreserveAccuracy(1.0), 4, Some(0), None).is_err());
        assert!(make_target(TargetMode::PreserveAccuracy(-0.1), 4, Some(0), None).is_err());
    }

    #[test]
    fn internal_selection_excludes_final_exit() {
        assert_eq!(ExitSelection::Internal.resolve(4).unwrap(), vec![0, 1, 2]);
        assert_eq!(ExitSelection::All.resolve(2).unwrap(), vec![0, 1]);
        // A single-exit net has no internal exits.
        assert!(matches!(
            ExitSelection::Internal.resolve(1),
            Err(Error::EmptyExitSet)
        ));
    }

    #[test]
    fn step_decay_schedule() {
        let cfg = AttackConfig::deepsloth_linf_universal(0.03, AttackScope::Universal);
        assert!((cfg.step_at(0) - 0.005).abs() < 1e-12);
        assert!((cfg.step_at(3) - 0.005).abs() < 1e-12);
        assert!((cfg.step_at(4) - 0.0005).abs() < 1e-12);
        assert!((cfg.step_at(8) - 5e-5).abs() < 1e-12);
    }

    #[test]
    fn budget_mismatch_is_detected() {
        let b = PerturbationBudget::linf(0.03);
        assert!(b.expect_norm(NormKind::Linf).is_ok());
        assert!(matches!(
            b.expect_norm(NormKind::L2),
            Err(Error::BudgetMismatch { .. })
        ));
        assert!(PerturbationBudget::linf(0.0).validate().is_err());
    }
}
