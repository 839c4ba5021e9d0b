//! Slowdown attacks (per-sample, universal, class-universal; linf/l2/l1)
//! and the misclassification baselines (PGD, PGD-avg, PGD-max, universal
//! PGD).
//!
//! The slowdown objective minimizes, over a chosen exit set, the sum of
//! cross-entropies between each exit's output and a target distribution
//! (uniform by default): once every internal exit is near-uniform, no
//! confidence or entropy criterion fires and the whole trunk runs. The
//! baselines maximize cross-entropy against the true label instead; both
//! directions share the signed-gradient update with opposite signs.
//!
//! Perturbed inputs are always `clamp(x + v, 0, 1)`: the image-domain clamp
//! is part of applying a perturbation, and per-sample attacks fold it into
//! `v` each iteration.

mod projection;
mod types;

pub use projection::{
    clamp_linf, l1_norm, l2_norm, linf_norm, percentile, project_l1_ball, project_l2_ball,
    renormalize_l2,
};
pub use types::{
    least_likely_label, make_target, AttackConfig, AttackScope, ExitSelection, NormKind,
    PerturbationBudget, StepDecay, TargetDistribution, TargetMode,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::multiexit::MultiExitNetwork;
use crate::policy::{adaptive_infer, ExitPolicy};
use crate::tensor::{cross_entropy, cross_entropy_grad, sign, Tensor};

/// `clamp(x + v, 0, 1)`: how a perturbation is applied to an input.
pub fn apply_perturbation(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    if x.shape() != v.shape() {
        return Err(Error::ShapeMismatch {
            context: "apply_perturbation",
            expected: x.shape().to_vec(),
            found: v.shape().to_vec(),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &b)| (a + b).clamp(0.0, 1.0))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Sum over `exits` of the cross-entropy between each exit's logits on
/// `x_perturbed` and `target`.
pub fn slowdown_loss(
    net: &MultiExitNetwork,
    x_perturbed: &Tensor,
    target: &TargetDistribution,
    exits: &[usize],
) -> Result<f64> {
    if exits.is_empty() {
        return Err(Error::EmptyExitSet);
    }
    let (logits, _) = net.forward_all_exits(x_perturbed, false)?;
    let mut loss = 0.0;
    for &i in exits {
        loss += cross_entropy(&logits[i], target.probs())?;
    }
    Ok(loss)
}

/// [`slowdown_loss`] plus its gradient with respect to the perturbed input.
pub fn slowdown_gradient(
    net: &MultiExitNetwork,
    x_perturbed: &Tensor,
    target: &TargetDistribution,
    exits: &[usize],
) -> Result<(f64, Tensor)> {
    if exits.is_empty() {
        return Err(Error::EmptyExitSet);
    }
    let (logits, tape) = net.forward_all_exits(x_perturbed, true)?;
    let mut loss = 0.0;
    let mut seeds: Vec<Option<Tensor>> = vec![None; net.num_exits()];
    for &i in exits {
        loss += cross_entropy(&logits[i], target.probs())?;
        seeds[i] = Some(cross_entropy_grad(&logits[i], target.probs()));
    }
    let grads = tape.expect("recorded pass").backward(&seeds)?;
    Ok((loss, grads.input))
}

/// Loss and input gradient of the weighted per-exit cross-entropy against
/// the one-hot true label (the misclassification objective).
fn label_loss_gradient(
    net: &MultiExitNetwork,
    x_perturbed: &Tensor,
    label: usize,
    exit_weights: &[f64],
) -> Result<(f64, Tensor)> {
    let m = net.num_classes();
    if label >= m {
        return Err(Error::LabelOutOfRange {
            label,
            num_classes: m,
        });
    }
    let mut one_hot = Tensor::zeros(vec![m]);
    one_hot.data_mut()[label] = 1.0;

    let (logits, tape) = net.forward_all_exits(x_perturbed, true)?;
    let mut loss = 0.0;
    let mut seeds: Vec<Option<Tensor>> = vec![None; net.num_exits()];
    for (i, &w) in exit_weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        loss += w * cross_entropy(&logits[i], &one_hot)?;
        let mut seed = cross_entropy_grad(&logits[i], &one_hot);
        seed.scale(w);
        seeds[i] = Some(seed);
    }
    let grads = tape.expect("recorded pass").backward(&seeds)?;
    Ok((loss, grads.input))
}

/// Zeroes gradient coordinates where the domain clamp saturates, i.e. where
/// `x + v` leaves `[0, 1]` and the applied input no longer moves with `v`.
fn mask_saturated(grad: &mut Tensor, x: &Tensor, v: &Tensor) {
    for ((g, &xi), &vi) in grad.data_mut().iter_mut().zip(x.data()).zip(v.data()) {
        let raw = xi + vi;
        if !(0.0..=1.0).contains(&raw) {
            *g = 0.0;
        }
    }
}

/// Sum of per-sample slowdown gradients over the scope set, evaluated at the
/// applied (clamped) inputs. The parallel map preserves sample order and the
/// reduction is sequential, so results do not depend on scheduling.
fn scope_slowdown_gradient(
    net: &MultiExitNetwork,
    samples: &[Tensor],
    targets: &[TargetDistribution],
    exits: &[usize],
    v: &Tensor,
) -> Result<(f64, Tensor)> {
    let per: Vec<(f64, Tensor)> = samples
        .par_iter()
        .zip(targets.par_iter())
        .map(|(x, target)| {
            let x_adv = apply_perturbation(x, v)?;
            let (loss, mut grad) = slowdown_gradient(net, &x_adv, target, exits)?;
            mask_saturated(&mut grad, x, v);
            Ok((loss, grad))
        })
        .collect::<Result<_>>()?;
    let mut total = Tensor::zeros(v.shape().to_vec());
    let mut total_loss = 0.0;
    for (loss, grad) in &per {
        total_loss += loss;
        total.add_assign(grad)?;
    }
    Ok((total_loss, total))
}

fn check_scope(samples: &[Tensor], targets: &[TargetDistribution], cfg: &AttackConfig) -> Result<()> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyScope);
    }
    if samples.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            context: "scope targets",
            expected: vec![samples.len()],
            found: vec![targets.len()],
        });
    }
    if cfg.scope == AttackScope::PerSample && samples.len() != 1 {
        return Err(Error::InvalidConfig(format!(
            "per-sample scope expects exactly one sample, got {}",
            samples.len()
        )));
    }
    Ok(())
}

/// Folds the domain clamp into a per-sample perturbation so that `x + v`
/// itself stays in `[0, 1]`. Never increases any |v_i|.
fn fold_domain_clamp(v: &mut Tensor, x: &Tensor) {
    for (vi, &xi) in v.data_mut().iter_mut().zip(x.data()) {
        *vi = (xi + *vi).clamp(0.0, 1.0) - xi;
    }
}

/// Builds per-sample target distributions for a scope set under `mode`.
pub fn make_targets(
    net: &MultiExitNetwork,
    samples: &[Tensor],
    labels: &[usize],
    mode: TargetMode,
) -> Result<Vec<TargetDistribution>> {
    let m = net.num_classes();
    match mode {
        TargetMode::Uniform => Ok(vec![TargetDistribution::uniform(m); samples.len()]),
        TargetMode::PreserveAccuracy(_) => labels
            .iter()
            .map(|&y| make_target(mode, m, Some(y), None))
            .collect(),
        TargetMode::HurtAccuracy(_) => samples
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let wrong = least_likely_label(net, x, y)?;
                make_target(mode, m, Some(y), Some(wrong))
            })
            .collect(),
    }
}

/// linf slowdown attack: signed-gradient descent on the slowdown loss with
/// projection onto the epsilon box after every step.
///
/// The scope set defines the attack flavor: a single sample (standard), a
/// training batch (universal), or one class's training samples
/// (class-universal). Returns `v` with `||v||_inf <= eps` exactly.
pub fn deepsloth_linf(
    net: &MultiExitNetwork,
    scope_samples: &[Tensor],
    targets: &[TargetDistribution],
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    budget.expect_norm(NormKind::Linf)?;
    check_scope(scope_samples, targets, cfg)?;
    let exits = cfg.exits.resolve(net.num_exits())?;

    let mut v = Tensor::zeros(scope_samples[0].shape().to_vec());
    for t in 0..cfg.iterations {
        let step = cfg.step_at(t);
        let (_, grad) = scope_slowdown_gradient(net, scope_samples, targets, &exits, &v)?;
        for (vi, &gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi -= step * sign(gi);
        }
        clamp_linf(v.data_mut(), budget.epsilon);
        if cfg.scope == AttackScope::PerSample {
            fold_domain_clamp(&mut v, &scope_samples[0]);
            // The fold's subtraction can overshoot the box by one ulp; the
            // re-clamp keeps ||v||_inf <= eps exact and x+v stays in [0, 1]
            // because shrinking v only moves x+v toward x.
            clamp_linf(v.data_mut(), budget.epsilon);
        }
    }
    Ok(v)
}

/// l2 slowdown attack, a decoupled-norm adaptation: move along the
/// normalized gradient, renormalize to a running norm `rho`, and shrink or
/// grow `rho` by `gamma` depending on whether the current perturbation
/// already suppresses every internal exit under `policy`. `rho` never
/// exceeds the budget; the smallest successful perturbation wins.
pub fn deepsloth_l2(
    net: &MultiExitNetwork,
    scope_samples: &[Tensor],
    targets: &[TargetDistribution],
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
    policy: Option<&ExitPolicy>,
) -> Result<Tensor> {
    budget.expect_norm(NormKind::L2)?;
    check_scope(scope_samples, targets, cfg)?;
    let exits = cfg.exits.resolve(net.num_exits())?;
    let policy = policy.ok_or(Error::PolicyRequired)?;
    policy.validate(net.num_exits())?;

    let eps = budget.epsilon;
    let gamma = cfg.norm_adjust;
    let final_exit = net.num_exits() - 1;
    let mut rho = cfg.initial_norm.min(eps);
    let mut v = Tensor::zeros(scope_samples[0].shape().to_vec());
    let mut best: Option<(f64, Tensor)> = None;

    for t in 0..cfg.iterations {
        // Success: no internal exit fires on any scope sample.
        let mut success = true;
        for x in scope_samples {
            let x_adv = apply_perturbation(x, &v)?;
            if adaptive_infer(net, policy, &x_adv)?.exit_index != final_exit {
                success = false;
                break;
            }
        }
        let norm = l2_norm(v.data());
        if success && best.as_ref().map_or(true, |(bn, _)| norm < *bn) {
            best = Some((norm, v.clone()));
        }
        rho = (rho * if success { 1.0 - gamma } else { 1.0 + gamma }).min(eps);

        let (_, grad) = scope_slowdown_gradient(net, scope_samples, targets, &exits, &v)?;
        let gnorm = l2_norm(grad.data());
        if gnorm > 0.0 {
            let _ = t;
            v.add_scaled(&grad, -cfg.step_size / gnorm)?;
        }
        renormalize_l2(v.data_mut(), rho);
        if cfg.scope == AttackScope::PerSample {
            fold_domain_clamp(&mut v, &scope_samples[0]);
        }
    }

    Ok(match best {
        Some((_, b)) => b,
        None => v,
    })
}

/// l1 slowdown attack, a sparse signed-gradient adaptation: only coordinates
/// at or above the configured percentile of |gradient| move each iteration,
/// followed by Euclidean projection onto the l1 ball.
pub fn deepsloth_l1(
    net: &MultiExitNetwork,
    scope_samples: &[Tensor],
    targets: &[TargetDistribution],
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    budget.expect_norm(NormKind::L1)?;
    check_scope(scope_samples, targets, cfg)?;
    let exits = cfg.exits.resolve(net.num_exits())?;

    let mut v = Tensor::zeros(scope_samples[0].shape().to_vec());
    for t in 0..cfg.iterations {
        let step = cfg.step_at(t);
        let (_, grad) = scope_slowdown_gradient(net, scope_samples, targets, &exits, &v)?;
        let mags: Vec<f64> = grad.data().iter().map(|g| g.abs()).collect();
        let threshold = percentile(&mags, cfg.sparsity_percentile);
        for ((vi, &gi), &mag) in v.data_mut().iter_mut().zip(grad.data()).zip(&mags) {
            if mag >= threshold && mag > 0.0 {
                *vi -= step * sign(gi);
            }
        }
        project_l1_ball(v.data_mut(), budget.epsilon);
        if cfg.scope == AttackScope::PerSample {
            fold_domain_clamp(&mut v, &scope_samples[0]);
        }
    }
    Ok(v)
}

fn pgd_driver(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: usize,
    exit_weights: &[f64],
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    budget.expect_norm(NormKind::Linf)?;
    cfg.validate()?;
    let mut v = Tensor::zeros(x.shape().to_vec());
    for t in 0..cfg.iterations {
        let step = cfg.step_at(t);
        let x_adv = apply_perturbation(x, &v)?;
        let (_, mut grad) = label_loss_gradient(net, &x_adv, y, exit_weights)?;
        mask_saturated(&mut grad, x, &v);
        // Ascent: increase the loss against the true label.
        for (vi, &gi) in v.data_mut().iter_mut().zip(grad.data()) {
            *vi += step * sign(gi);
        }
        clamp_linf(v.data_mut(), budget.epsilon);
        fold_domain_clamp(&mut v, x);
        clamp_linf(v.data_mut(), budget.epsilon);
    }
    Ok(v)
}

/// Standard PGD: signed-gradient ascent on the final exit's cross-entropy
/// against the true label.
pub fn pgd(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: usize,
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    let mut weights = vec![0.0; net.num_exits()];
    *weights.last_mut().unwrap() = 1.0;
    pgd_driver(net, x, y, &weights, budget, cfg)
}

/// PGD on the mean of all exits' cross-entropies against the true label.
pub fn pgd_avg(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: usize,
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    let k = net.num_exits();
    let weights = vec![1.0 / k as f64; k];
    pgd_driver(net, x, y, &weights, budget, cfg)
}

/// PGD-max: one PGD run per exit, each targeting that exit's loss alone;
/// the candidate with the highest mean loss across exits is returned.
/// Crafting cost is therefore roughly K times one PGD run.
pub fn pgd_max(
    net: &MultiExitNetwork,
    x: &Tensor,
    y: usize,
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    let k = net.num_exits();
    let uniform = vec![1.0 / k as f64; k];
    let mut best: Option<(f64, Tensor)> = None;
    for target_exit in 0..k {
        let mut weights = vec![0.0; k];
        weights[target_exit] = 1.0;
        let v = pgd_driver(net, x, y, &weights, budget, cfg)?;
        let x_adv = apply_perturbation(x, &v)?;
        let (mean_loss, _) = label_loss_gradient(net, &x_adv, y, &uniform)?;
        if best.as_ref().map_or(true, |(b, _)| mean_loss > *b) {
            best = Some((mean_loss, v));
        }
    }
    Ok(best.expect("at least one exit").1)
}

/// Universal misclassification baseline: a single perturbation crafted by
/// signed-gradient ascent on the final exit's loss summed over a training
/// batch. Reported as `uap-pgd`.
pub fn uap(
    net: &MultiExitNetwork,
    train_samples: &[Tensor],
    labels: &[usize],
    budget: &PerturbationBudget,
    cfg: &AttackConfig,
) -> Result<Tensor> {
    budget.expect_norm(NormKind::Linf)?;
    cfg.validate()?;
    if train_samples.is_empty() {
        return Err(Error::EmptyScope);
    }
    if train_samples.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "uap labels",
            expected: vec![train_samples.len()],
            found: vec![labels.len()],
        });
    }
    let mut final_only = vec![0.0; net.num_exits()];
    *final_only.last_mut().unwrap() = 1.0;

    let mut v = Tensor::zeros(train_samples[0].shape().to_vec());
    for t in 0..cfg.iterations {
        let step = cfg.step_at(t);
        let per: Vec<Tensor> = train_samples
            .par_iter()
            .zip(labels.par_iter())
            .map(|(x, &y)| {
                let x_adv = apply_perturbation(x, &v)?;
                let (_, mut grad) = label_loss_gradient(net, &x_adv, y, &final_only)?;
                mask_saturated(&mut grad, x, &v);
                Ok(grad)
            })
            .collect::<Result<_>>()?;
        let mut total = Tensor::zeros(v.shape().to_vec());
        for g in &per {
            total.add_assign(g)?;
        }
        for (vi, &gi) in v.data_mut().iter_mut().zip(total.data()) {
            *vi += step * sign(gi);
        }
        clamp_linf(v.data_mut(), budget.epsilon);
    }
    Ok(v)
}
