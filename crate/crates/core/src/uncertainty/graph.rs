//! Differentiable builders for the uncertainty losses.
//!
//! These compose tape operations into the same scalars as the pure
//! functions in the parent module, so the trainable pipeline can
//! backpropagate through offsets, latent covariance factors, and the
//! distinctiveness head.

use crate::autodiff::{AdError, Tape, VarId};
use crate::tensor::Tensor;

use super::PROB_FLOOR;

/// `Omega = Q Q^T / d + eps I` as a graph node. `q` is `[k, d]`.
pub fn precision_node(tape: &mut Tape, q: VarId, eps: f64) -> Result<VarId, AdError> {
    let shape = tape.value(q).shape().to_vec();
    let (k, d) = (shape[0], shape[1]);
    let qt = tape.transpose(q)?;
    let qqt = tape.matmul(q, qt)?;
    let scaled = tape.scale(qqt, 1.0 / d as f64);
    let eps_eye = tape.constant(Tensor::eye(k).scale(eps));
    tape.add(scaled, eps_eye)
}

/// `0.5 [r^T Omega r - logdet Omega]` with `r = x - vstar`.
pub fn nll_precision_node(
    tape: &mut Tape,
    x: VarId,
    vstar: VarId,
    omega: VarId,
) -> Result<VarId, AdError> {
    let r = tape.sub(x, vstar)?;
    let omega_r = tape.matmul(omega, r)?;
    let quad = tape.dot(r, omega_r)?;
    let logdet = tape.logdet_spd(omega)?;
    let diff = tape.sub(quad, logdet)?;
    Ok(tape.scale(diff, 0.5))
}

/// Distinctiveness-weighted offset loss over `m` stacked keypoints:
/// `0.5 [r^T (Omega + beta W) r - log det(Omega W^beta)]`,
/// `W = diag(w_1, w_1, ..., w_m, w_m)`. `weights` are scalar nodes so the
/// loss also trains whatever produced them.
pub fn uc_loss_node(
    tape: &mut Tape,
    x: VarId,
    vstar: VarId,
    omega: VarId,
    weights: &[VarId],
    beta: f64,
) -> Result<VarId, AdError> {
    let base = nll_precision_node(tape, x, vstar, omega)?;
    if beta == 0.0 {
        return Ok(base);
    }
    let r = tape.sub(x, vstar)?;
    let mut extra: Option<VarId> = None;
    for (n, &w) in weights.iter().enumerate() {
        let rx = tape.gather_flat(r, 2 * n)?;
        let ry = tape.gather_flat(r, 2 * n + 1)?;
        let rx2 = tape.mul(rx, rx)?;
        let ry2 = tape.mul(ry, ry)?;
        let pair = tape.add(rx2, ry2)?;
        let quad_w = tape.mul(w, pair)?;
        let log_w = tape.log(w);
        let log_w2 = tape.scale(log_w, 2.0);
        let term = tape.sub(quad_w, log_w2)?;
        extra = Some(match extra {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let extra = extra.expect("at least one keypoint per group");
    let scaled = tape.scale(extra, 0.5 * beta);
    tape.add(base, scaled)
}

/// `-sqrt(w) log P[gstar]` with the probability floored at 1e-12.
/// Pass `weight: None` for the vanilla cross-entropy.
pub fn cls_loss_node(
    tape: &mut Tape,
    prob: VarId,
    gstar: usize,
    weight: Option<VarId>,
) -> Result<VarId, AdError> {
    let p = tape.gather_flat(prob, gstar)?;
    let floored = tape.clamp_min(p, PROB_FLOOR);
    let logp = tape.log(floored);
    let nll = tape.neg(logp);
    match weight {
        Some(w) => {
            let sw = tape.sqrt(w);
            tape.mul(sw, nll)
        }
        None => Ok(nll),
    }
}

/// Componentwise-mean squared error between an offset node and a constant
/// target.
pub fn mse_node(tape: &mut Tape, v: VarId, vstar: VarId) -> Result<VarId, AdError> {
    let r = tape.sub(v, vstar)?;
    let sq = tape.mul(r, r)?;
    Ok(tape.mean(sq))
}
