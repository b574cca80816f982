//! Unit cross-entropy, diagonal attention constraint, and their sum.
//!
//! Each loss returns its value together with the closed-form gradient with
//! respect to its input so the gradient can seed [`Graph::backward`].
//!
//! [`Graph::backward`]: crate::autograd::Graph::backward

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{Matrix, Real};
use crate::model::ForwardTrace;

/// `exp(-(s/T_p - t/T_v)² / (2 g²))` for every `(t, s)`; 1 on the normalised diagonal.
pub fn diagonal_band(t_v: usize, t_p: usize, bandwidth: f64) -> Result<Matrix<f64>> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::validation(format!(
            "diagonal bandwidth must be positive, got {bandwidth}"
        )));
    }
    if t_v == 0 || t_p == 0 {
        return Err(Error::validation("attention matrix is empty"));
    }
    let denom = 2.0 * bandwidth * bandwidth;
    Ok(Matrix::from_fn(t_v, t_p, |t, s| {
        let dev = s as f64 / t_p as f64 - t as f64 / t_v as f64;
        (-dev * dev / denom).exp()
    }))
}

/// Summed cross-entropy over the unmasked frames of one sequence.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CrossEntropySum {
    pub sum: f64,
    pub frames: usize,
    /// Frames whose argmax equals the target.
    pub correct: usize,
}

/// Sums `-log softmax(logits)[target]` over unmasked frames. When
/// `grad_scale` is given, also returns `grad_scale · (softmax − onehot)` for
/// unmasked rows and zeros elsewhere.
pub fn cross_entropy_sum<T: Real>(
    logits: &Matrix<T>,
    targets: &[usize],
    frame_mask: Option<&[bool]>,
    grad_scale: Option<f64>,
) -> Result<(CrossEntropySum, Option<Matrix<T>>)> {
    let (rows, k) = logits.shape();
    if targets.len() != rows {
        return Err(Error::validation(format!(
            "{} targets for {rows} logit frames",
            targets.len()
        )));
    }
    if let Some(m) = frame_mask {
        if m.len() != rows {
            return Err(Error::validation("frame mask length mismatch"));
        }
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::validation(format!(
            "target unit {bad} out of range for K={k}"
        )));
    }
    let mut acc = CrossEntropySum::default();
    let mut grad = grad_scale.map(|_| Matrix::zeros(rows, k));
    let argmax = logits.argmax_rows();
    for t in 0..rows {
        if frame_mask.is_some_and(|m| !m[t]) {
            continue;
        }
        let row = logits.row(t);
        let max = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + z.ln();
        acc.sum += lse - row[targets[t]].as_f64();
        acc.frames += 1;
        if argmax[t] == targets[t] {
            acc.correct += 1;
        }
        if let (Some(g), Some(scale)) = (grad.as_mut(), grad_scale) {
            for (c, out) in g.row_mut(t).iter_mut().enumerate() {
                let p = (row[c].as_f64() - lse).exp();
                let y = if c == targets[t] { 1.0 } else { 0.0 };
                *out = T::from_f64_lossy(scale * (p - y));
            }
        }
    }
    if !acc.sum.is_finite() {
        return Err(Error::numeric("cross_entropy", "non-finite loss"));
    }
    Ok((acc, grad))
}

/// Mean cross-entropy over unmasked frames.
pub fn cross_entropy_loss<T: Real>(
    logits: &Matrix<T>,
    targets: &[usize],
    frame_mask: Option<&[bool]>,
) -> Result<f64> {
    let (acc, _) = cross_entropy_sum(logits, targets, frame_mask, None)?;
    if acc.frames == 0 {
        return Err(Error::validation("frame mask selects no frames"));
    }
    Ok(acc.sum / acc.frames as f64)
}

/// Mean cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Real>(
    logits: &Matrix<T>,
    targets: &[usize],
    frame_mask: Option<&[bool]>,
) -> Result<(f64, Matrix<T>)> {
    let frames = frame_mask.map_or(logits.rows(), |m| m.iter().filter(|&&b| b).count());
    if frames == 0 {
        return Err(Error::validation("frame mask selects no frames"));
    }
    let (acc, grad) = cross_entropy_sum(logits, targets, frame_mask, Some(1.0 / frames as f64))?;
    Ok((acc.sum / frames as f64, grad.expect("gradient requested")))
}

/// `(1/T_v) Σ A[t,s] · (1 − band[t,s])`, in `[0, 1)` for row-stochastic `A`.
pub fn diag_loss<T: Real>(attention: &Matrix<T>, bandwidth: f64) -> Result<f64> {
    diag_loss_with_grad(attention, bandwidth).map(|(l, _)| l)
}

/// Diagonal loss and its gradient `(1 − band) / T_v` with respect to `A`.
pub fn diag_loss_with_grad<T: Real>(
    attention: &Matrix<T>,
    bandwidth: f64,
) -> Result<(f64, Matrix<T>)> {
    let (t_v, t_p) = attention.shape();
    let band = diagonal_band(t_v, t_p, bandwidth)?;
    let inv = 1.0 / t_v as f64;
    let mut loss = 0.0;
    let grad = Matrix::from_fn(t_v, t_p, |t, s| {
        let w = 1.0 - band.get(t, s);
        loss += attention.get(t, s).as_f64() * w;
        T::from_f64_lossy(w * inv)
    });
    Ok((loss * inv, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub l_pred: f64,
    pub l_diag: f64,
}

/// `L = L_pred + λ · L_diag` for a single sequence.
pub fn total_loss<T: Real>(
    trace: &ForwardTrace<T>,
    targets: &[usize],
    frame_mask: Option<&[bool]>,
    diag_bandwidth: f64,
    diag_weight: f64,
) -> Result<LossComponents> {
    if diag_weight < 0.0 {
        return Err(Error::validation(
            "diagonal loss weight must be non-negative",
        ));
    }
    let l_pred = cross_entropy_loss(&trace.logits, targets, frame_mask)?;
    let l_diag = diag_loss(&trace.attention, diag_bandwidth)?;
    Ok(LossComponents {
        total: l_pred + diag_weight * l_diag,
        l_pred,
        l_diag,
    })
}
