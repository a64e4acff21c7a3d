//! Losses for the two training stages, each with exact logit gradients.
//!
//! Stage 1 combines a temperature-softened distillation term over the old
//! classes with softmax cross-entropy over all classes. Stage 2 uses
//! cross-entropy on bias-corrected logits, differentiated with respect to
//! the two bias parameters only.
//!
//! Per-batch values are means over samples, so learning rates are
//! independent of batch size.

use crate::error::{BicError, Result};

/// A scalar loss together with its gradient at the logits it was
/// evaluated on.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

/// Numerically stabilized softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(BicError::Argument("softmax of an empty vector".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Softmax of `logits / T`. The caller passes only the old-class slice;
/// the normalization runs over exactly those entries.
pub fn tempered_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 {
        return Err(BicError::Argument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled: Vec<f64> = logits.iter().map(|&v| v / temperature).collect();
    softmax(&scaled)
}

/// Distillation term for one sample: cross-entropy between the frozen
/// model's softened old-class distribution and the live model's. The
/// gradient flows to `new_logits_first_n` only.
pub fn distill_loss(
    old_logits: &[f64],
    new_logits_first_n: &[f64],
    temperature: f64,
) -> Result<LossValue> {
    if old_logits.len() != new_logits_first_n.len() {
        return Err(BicError::Shape(format!(
            "teacher has {} old-class logits, student slice has {}",
            old_logits.len(),
            new_logits_first_n.len()
        )));
    }
    let target = tempered_softmax(old_logits, temperature)?;
    let pred = tempered_softmax(new_logits_first_n, temperature)?;
    let value = -target
        .iter()
        .zip(&pred)
        .map(|(t, p)| t * p.ln())
        .sum::<f64>();
    // d/do_j of -sum_k t_k ln pi_k with pi = softmax(o/T) is (pi_j - t_j)/T.
    let grad_logits = pred
        .iter()
        .zip(&target)
        .map(|(p, t)| (p - t) / temperature)
        .collect();
    Ok(LossValue { value, grad_logits })
}

/// Softmax cross-entropy for one sample; `label` indexes the logits.
pub fn cls_loss(logits: &[f64], label: usize) -> Result<LossValue> {
    if label >= logits.len() {
        return Err(BicError::Argument(format!(
            "label {} out of range for {} classes",
            label,
            logits.len()
        )));
    }
    let p = softmax(logits)?;
    let value = -p[label].ln();
    let grad_logits = p
        .iter()
        .enumerate()
        .map(|(k, &pk)| if k == label { pk - 1.0 } else { pk })
        .collect();
    Ok(LossValue { value, grad_logits })
}

/// Distillation weight `n / (n + m)`; zero at the first increment.
pub fn lambda_for(old_classes: usize, new_classes: usize) -> Result<f64> {
    if new_classes == 0 {
        return Err(BicError::Argument("new class count must be >= 1".into()));
    }
    Ok(old_classes as f64 / (old_classes + new_classes) as f64)
}

/// Weighted mix `lambda * distill + (1 - lambda) * cls`. The two gradient
/// vectors may differ in length (distill covers the old-class slice);
/// they are combined over the longer one.
pub fn combined_loss(distill: &LossValue, cls: &LossValue, lambda: f64) -> Result<LossValue> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(BicError::Argument(format!(
            "lambda must lie in [0, 1), got {lambda}"
        )));
    }
    let len = distill.grad_logits.len().max(cls.grad_logits.len());
    let mut grad_logits = vec![0.0; len];
    for (g, &d) in grad_logits.iter_mut().zip(&distill.grad_logits) {
        *g += lambda * d;
    }
    for (g, &c) in grad_logits.iter_mut().zip(&cls.grad_logits) {
        *g += (1.0 - lambda) * c;
    }
    Ok(LossValue {
        value: lambda * distill.value + (1.0 - lambda) * cls.value,
        grad_logits,
    })
}

/// Stage-2 loss: cross-entropy on bias-corrected logits `q`, with the
/// gradient returned at `q`. The caller chains it onto (alpha, beta);
/// network parameters receive no gradient.
pub fn bias_loss(corrected_logits: &[f64], label: usize) -> Result<LossValue> {
    cls_loss(corrected_logits, label)
}
