//! The bias-correction layer: a two-parameter linear map on new-class
//! logits, fitted on the balanced validation set with the network frozen.

use serde::{Deserialize, Serialize};

use crate::error::{BicError, Result};
use crate::losses::{bias_loss, softmax};
use crate::matrix::DenseMatrix;
use crate::nn::NetworkModel;

/// The `(alpha, beta)` pair applied to the current increment's new-class
/// logits: `q_k = alpha*o_k + beta` for `k` in `new_class_range`, `q_k = o_k`
/// otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasParams {
    pub alpha: f64,
    pub beta: f64,
    /// Half-open class index range `[n, n+m)` the correction applies to.
    pub new_class_range: (usize, usize),
}

impl BiasParams {
    pub fn identity(n: usize, m: usize) -> Self {
        BiasParams {
            alpha: 1.0,
            beta: 0.0,
            new_class_range: (n, n + m),
        }
    }
}

/// Stage-2 fitting hyperparameters. The optimizer is full-batch gradient
/// descent on the two scalars with an adaptive step, returning the
/// best-loss iterate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BiasFitConfig {
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for BiasFitConfig {
    fn default() -> Self {
        BiasFitConfig {
            epochs: 500,
            learning_rate: 0.1,
        }
    }
}

/// Applies the piecewise correction; old-class logits pass through.
pub fn apply_bias(logits: &[f64], n: usize, params: &BiasParams) -> Result<Vec<f64>> {
    if params.new_class_range != (n, logits.len()) {
        return Err(BicError::Config(format!(
            "bias range {:?} does not cover classes [{}, {})",
            params.new_class_range,
            n,
            logits.len()
        )));
    }
    Ok(logits
        .iter()
        .enumerate()
        .map(|(k, &o)| {
            if k < n {
                o
            } else {
                params.alpha * o + params.beta
            }
        })
        .collect())
}

/// Mean stage-2 loss over a cached logit/label set at the given parameters.
pub fn mean_bias_loss(
    logits: &DenseMatrix,
    labels: &[usize],
    n: usize,
    params: &BiasParams,
) -> Result<f64> {
    if logits.rows() == 0 {
        return Err(BicError::Data("empty bias-fit set".into()));
    }
    let mut total = 0.0;
    for (row, &label) in logits.iter_rows().zip(labels) {
        let q = apply_bias(row, n, params)?;
        total += bias_loss(&q, label)?.value;
    }
    Ok(total / logits.rows() as f64)
}

/// Gradient of the mean loss with respect to `(alpha, beta)`.
fn bias_grad(
    logits: &DenseMatrix,
    labels: &[usize],
    n: usize,
    params: &BiasParams,
) -> Result<(f64, f64)> {
    let mut ga = 0.0;
    let mut gb = 0.0;
    for (row, &label) in logits.iter_rows().zip(labels) {
        let q = apply_bias(row, n, params)?;
        let p = softmax(&q)?;
        for k in n..row.len() {
            let dq = p[k] - if k == label { 1.0 } else { 0.0 };
            ga += dq * row[k];
            gb += dq;
        }
    }
    let scale = 1.0 / logits.rows() as f64;
    Ok((ga * scale, gb * scale))
}

/// Fits `(alpha, beta)` on the balanced validation set. The network is
/// only read; its parameters stay bit-identical. Logits are computed once
/// and cached, so fitting is `O(epochs * |val|)`.
pub fn fit_bias(
    model: &NetworkModel,
    val_features: &DenseMatrix,
    val_labels: &[usize],
    n: usize,
    m: usize,
    cfg: &BiasFitConfig,
) -> Result<BiasParams> {
    if cfg.epochs == 0 {
        return Err(BicError::Argument("bias fit needs at least one epoch".into()));
    }
    if val_features.rows() == 0 || val_features.rows() != val_labels.len() {
        return Err(BicError::Data("bias-fit validation set is empty or ragged".into()));
    }
    let has_old = val_labels.iter().any(|&l| l < n);
    let has_new = val_labels.iter().any(|&l| l >= n);
    if n > 0 && !has_old {
        return Err(BicError::Data("validation set has no old-class samples".into()));
    }
    if !has_new {
        return Err(BicError::Data("validation set has no new-class samples".into()));
    }
    let logits = model.forward(val_features)?;
    fit_bias_on_logits(&logits, val_labels, n, m, cfg)
}

/// Same as [`fit_bias`] but on precomputed logits.
pub fn fit_bias_on_logits(
    logits: &DenseMatrix,
    labels: &[usize],
    n: usize,
    m: usize,
    cfg: &BiasFitConfig,
) -> Result<BiasParams> {
    if logits.cols() != n + m {
        return Err(BicError::Shape(format!(
            "logit width {} does not equal n+m = {}",
            logits.cols(),
            n + m
        )));
    }
    let mut params = BiasParams::identity(n, m);
    let mut best = params;
    let mut best_loss = mean_bias_loss(logits, labels, n, &params)?;
    let mut loss = best_loss;
    let mut step = cfg.learning_rate;

    for _ in 0..cfg.epochs {
        let (ga, gb) = bias_grad(logits, labels, n, &params)?;
        if !ga.is_finite() || !gb.is_finite() {
            return Err(BicError::Numeric("bias parameter gradient".into()));
        }
        if ga.abs() < 1e-14 && gb.abs() < 1e-14 {
            break;
        }
        // Backtracking step: shrink until the full-batch loss improves,
        // then let the step grow again.
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = BiasParams {
                alpha: params.alpha - step * ga,
                beta: params.beta - step * gb,
                new_class_range: params.new_class_range,
            };
            let cand_loss = mean_bias_loss(logits, labels, n, &candidate)?;
            if cand_loss <= loss {
                params = candidate;
                loss = cand_loss;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        if loss < best_loss {
            best_loss = loss;
            best = params;
        }
    }
    Ok(best)
}

/// Exhaustive grid evaluation of the mean stage-2 loss; the independent
/// oracle for [`fit_bias`]. Ties break towards the identity: smallest
/// `|alpha - 1|`, then smallest `|beta|`.
pub fn grid_search_bias(
    logits: &DenseMatrix,
    labels: &[usize],
    n: usize,
    m: usize,
    alpha_range: (f64, f64),
    beta_range: (f64, f64),
    steps: usize,
) -> Result<BiasParams> {
    if logits.rows() == 0 {
        return Err(BicError::Data("empty grid-search set".into()));
    }
    if steps < 1 {
        return Err(BicError::Argument("grid needs at least one step per axis".into()));
    }
    if !alpha_range.0.is_finite()
        || !alpha_range.1.is_finite()
        || !beta_range.0.is_finite()
        || !beta_range.1.is_finite()
    {
        return Err(BicError::Argument("grid ranges must be finite".into()));
    }
    let axis = |range: (f64, f64), i: usize| {
        if steps == 1 {
            range.0
        } else {
            range.0 + (range.1 - range.0) * i as f64 / (steps - 1) as f64
        }
    };
    let mut best: Option<(f64, BiasParams)> = None;
    for ai in 0..steps {
        let alpha = axis(alpha_range, ai);
        for bi in 0..steps {
            let beta = axis(beta_range, bi);
            let candidate = BiasParams {
                alpha,
                beta,
                new_class_range: (n, n + m),
            };
            let loss = mean_bias_loss(logits, labels, n, &candidate)?;
            let better = match &best {
                None => true,
                Some((bl, bp)) => {
                    loss < *bl
                        || (loss == *bl
                            && ((alpha - 1.0).abs(), beta.abs())
                                < ((bp.alpha - 1.0).abs(), bp.beta.abs()))
                }
            };
            if better {
                best = Some((loss, candidate));
            }
        }
    }
    Ok(best.expect("grid is non-empty").1)
}
