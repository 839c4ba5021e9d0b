//! Softmax, entropy, and cross-entropy over logit vectors.

use super::Tensor;
use crate::error::{Error, Result};

fn expect_logits(logits: &Tensor) -> Result<()> {
    if logits.shape().len() != 1 || logits.len() < 2 {
        return Err(Error::ShapeMismatch {
            context: "logits (need a vector of length >= 2)",
            expected: vec![2],
            found: logits.shape().to_vec(),
        });
    }
    logits.check_finite("logits")
}

fn expect_distribution(target: &Tensor, len: usize) -> Result<()> {
    if target.shape() != [len] {
        return Err(Error::ShapeMismatch {
            context: "target distribution",
            expected: vec![len],
            found: target.shape().to_vec(),
        });
    }
    if target.data().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidTarget("negative probability".into()));
    }
    let sum: f64 = target.data().iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidTarget(format!("probabilities sum to {sum}")));
    }
    Ok(())
}

/// Numerically stabilized softmax (max-subtraction), so any finite logits
/// are accepted. The output sums to 1 within 1e-12.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    expect_logits(logits)?;
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.data().iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Tensor::new(vec![out.len()], out)
}

/// Shannon entropy of a probability vector, in nats. Uses the convention
/// `0 * ln 0 = 0`.
pub fn entropy(probs: &Tensor) -> f64 {
    probs
        .data()
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum()
}

/// Cross-entropy of `logits` against a (possibly soft) target distribution:
/// `-sum_j target_j * ln softmax(logits)_j`, evaluated via log-sum-exp.
pub fn cross_entropy(logits: &Tensor, target: &Tensor) -> Result<f64> {
    expect_logits(logits)?;
    expect_distribution(target, logits.len())?;
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + logits
            .data()
            .iter()
            .map(|&z| (z - max).exp())
            .sum::<f64>()
            .ln();
    let dot: f64 = logits
        .data()
        .iter()
        .zip(target.data())
        .map(|(&z, &t)| t * z)
        .sum();
    Ok(lse - dot)
}

/// Gradient of [`cross_entropy`] with respect to the logits: `softmax(z) - target`.
///
/// Callers are expected to have validated the pair via `cross_entropy` on the
/// same inputs; this only performs the cheap softmax.
pub fn cross_entropy_grad(logits: &Tensor, target: &Tensor) -> Tensor {
    let p = softmax(logits).expect("validated logits");
    let data = p
        .data()
        .iter()
        .zip(target.data())
        .map(|(&pj, &tj)| pj - tj)
        .collect();
    Tensor {
        shape: vec![logits.len()],
        data,
    }
}
