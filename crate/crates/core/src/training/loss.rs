//! Training objectives: regularized pair cross-entropy for the siamese
//! network, token-level LM cross-entropy, classification cross-entropy, and
//! the joint multitask combination.

use crate::tensor::{Scalar, Tensor};

use super::TrainError;

/// Tolerance for probabilities drifting outside (0, 1) before it's an error,
/// and the clamp width applied before taking logs.
const PROB_TOLERANCE: f64 = 1e-6;
const PROB_CLAMP: f64 = 1e-7;

/// Regularized pair cross-entropy: mean over the batch of
/// `-[y log p + (1-y) log(1-p)]` plus `lambda * sum(w^2)` over `params`.
///
/// `p` is `[batch, 1]` of same-class probabilities; `same` gives y per row.
pub fn siamese_loss<F: Scalar>(
    p: &Tensor<F>,
    same: &[bool],
    params: &[(String, Tensor<F>)],
    lambda: f64,
) -> Result<Tensor<F>, TrainError> {
    let n = same.len();
    if p.numel() != n {
        return Err(TrainError::InvalidSettings(format!(
            "{} probabilities for {} pair labels",
            p.numel(),
            n
        )));
    }
    for &v in p.values().iter() {
        let v = v.to_f64();
        if !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&v) {
            return Err(TrainError::NumericDomain(v));
        }
    }
    // Affine clamp into (0, 1): keeps 0.5 fixed, keeps gradients defined at
    // saturated sigmoid outputs.
    let clamped = p
        .scale(F::from_f64(1.0 - 2.0 * PROB_CLAMP))
        .unary_shift(F::from_f64(PROB_CLAMP));
    let y: Vec<F> = same
        .iter()
        .map(|&s| if s { F::one() } else { F::zero() })
        .collect();
    let y = Tensor::from_vec(p.shape().to_vec(), y)?;
    let ones = Tensor::ones(p.shape());
    let pos = y.mul(&clamped.log())?;
    let neg = ones.sub(&y)?.mul(&ones.sub(&clamped)?.log())?;
    let nll = pos.add(&neg)?.mean(None, false)?.scale(-F::one());

    if lambda == 0.0 {
        return Ok(nll);
    }
    let mut reg: Option<Tensor<F>> = None;
    for (_, w) in params {
        let sq = w.mul(w)?.sum(None, false)?;
        reg = Some(match reg {
            None => sq,
            Some(acc) => acc.add(&sq)?,
        });
    }
    match reg {
        Some(reg) => Ok(nll.add(&reg.scale(F::from_f64(lambda)))?),
        None => Ok(nll),
    }
}

/// Mean token-level cross-entropy over unmasked positions.
///
/// `logits` is `[batch, seq, vocab]`; `targets` and `mask` are row-major
/// `[batch, seq]`. Positions with `mask == false` (padding, or positions
/// without a target) are excluded.
pub fn lm_loss<F: Scalar>(
    logits: &Tensor<F>,
    targets: &[usize],
    mask: &[bool],
) -> Result<Tensor<F>, TrainError> {
    let shape = logits.shape().to_vec();
    if shape.len() != 3 {
        return Err(TrainError::InvalidSettings(format!(
            "lm_loss expects [batch, seq, vocab] logits, got {shape:?}"
        )));
    }
    let (b, t, v) = (shape[0], shape[1], shape[2]);
    if targets.len() != b * t || mask.len() != b * t {
        return Err(TrainError::InvalidSettings(format!(
            "targets/mask length {} does not match {b}x{t}",
            targets.len()
        )));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(TrainError::AllPaddingBatch);
    }
    let mut weights = vec![F::zero(); b * t * v];
    for (pos, (&target, &m)) in targets.iter().zip(mask).enumerate() {
        if m {
            weights[pos * v + target] = F::one();
        }
    }
    let weights = Tensor::from_vec(shape.clone(), weights)?;
    let log_probs = logits.log_softmax(2)?;
    let picked = log_probs.mul(&weights)?.sum(None, false)?;
    Ok(picked.scale(F::from_f64(-1.0 / count as f64)))
}

/// Mean classification cross-entropy over `[batch, classes]` logits.
pub fn classification_loss<F: Scalar>(
    logits: &Tensor<F>,
    labels: &[usize],
) -> Result<Tensor<F>, TrainError> {
    let shape = logits.shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(TrainError::InvalidSettings(format!(
            "classification loss: logits {shape:?} vs {} labels",
            labels.len()
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let mut weights = vec![F::zero(); b * c];
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(TrainError::InvalidSettings(format!(
                "label {label} out of range for {c} classes"
            )));
        }
        weights[r * c + label] = F::one();
    }
    let weights = Tensor::from_vec(shape, weights)?;
    let log_probs = logits.log_softmax(1)?;
    let picked = log_probs.mul(&weights)?.sum(None, false)?;
    Ok(picked.scale(F::from_f64(-1.0 / b as f64)))
}

/// Joint objective `cls_loss + alpha * lm_loss`. Gradients flow into both
/// heads and the shared trunk.
pub fn multitask_loss<F: Scalar>(
    cls_loss: &Tensor<F>,
    lm_loss: &Tensor<F>,
    alpha: f64,
) -> Result<Tensor<F>, TrainError> {
    for (name, t) in [("classification", cls_loss), ("language-model", lm_loss)] {
        if !t.item().is_finite() {
            return Err(TrainError::NonFinite(name.to_string()));
        }
    }
    Ok(cls_loss.add(&lm_loss.scale(F::from_f64(alpha)))?)
}

impl<F: Scalar> Tensor<F> {
    /// Add a constant to every element (graph-tracked identity gradient).
    pub(crate) fn unary_shift(&self, c: F) -> Tensor<F> {
        let shift = Tensor::scalar(c);
        self.add(&shift).expect("scalar broadcast cannot fail")
    }
}
