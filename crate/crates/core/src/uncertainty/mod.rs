//! Uncertainty mathematics: precision factors, Gaussian NLL losses in
//! covariance and precision form, semantic-distinctiveness weighting,
//! covariance fusion across scales, and uncertainty ellipses.
//!
//! The functions here are pure reference implementations over plain
//! tensors; [`graph`] provides the same formulas as differentiable tape
//! builders. Tests hold the two routes against each other.

pub mod graph;

use crate::grid::Mat2;
use crate::linalg::{self, LinalgError};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum UncertaintyError {
    #[error("latent dimension {d} smaller than matrix order {k}")]
    RankDeficientFactor { k: usize, d: usize },
    #[error("matrix is not positive definite: {0}")]
    NotSpd(#[from] LinalgError),
    #[error("probability map sums to {sum}, expected 1 within 1e-6")]
    NotNormalized { sum: f64 },
    #[error("weight {0} outside (0, 1]")]
    BadWeight(f64),
    #[error("semantic-distinctiveness value {0} must be positive")]
    NonPositiveSd(f64),
    #[error("covariance asymmetry {0:.3e} exceeds 1e-9")]
    Asymmetric(f64),
    #[error("empty covariance list")]
    EmptyCovariances,
    #[error("offset length {len} does not match {m} keypoints (expected {expected})")]
    OffsetLength { len: usize, m: usize, expected: usize },
}

/// Precision matrix from its latent factor: `QQ^T / d + eps I`.
///
/// `q` is k x d with `d >= k`, so the factor alone already has full rank
/// generically; `eps` keeps the Cholesky robust in the degenerate cases.
pub fn precision_from_factor(q: &Tensor, eps: f64) -> Result<Tensor, UncertaintyError> {
    let (k, d) = (q.shape()[0], q.shape()[1]);
    if d < k {
        return Err(UncertaintyError::RankDeficientFactor { k, d });
    }
    let qt = q.transpose().expect("2-D factor");
    let mut omega = q.matmul(&qt).expect("k x k").scale(1.0 / d as f64);
    for i in 0..k {
        let v = omega.at2(i, i);
        omega.set2(i, i, v + eps);
    }
    Ok(omega)
}

fn residual(x: &[f64], vstar: &[f64]) -> Vec<f64> {
    debug_assert_eq!(x.len(), vstar.len());
    x.iter().zip(vstar).map(|(a, b)| a - b).collect()
}

/// Gaussian NLL in covariance form: `0.5 [r^T Sigma^-1 r + logdet Sigma]`.
pub fn nll_covariance(x: &[f64], vstar: &[f64], sigma: &Tensor) -> Result<f64, UncertaintyError> {
    let k = sigma.shape()[0];
    let r = residual(x, vstar);
    let l = linalg::cholesky(sigma.data(), k)?;
    let solved = linalg::chol_solve(&l, k, &r);
    let quad: f64 = r.iter().zip(&solved).map(|(a, b)| a * b).sum();
    let logdet = 2.0 * (0..k).map(|i| l[i * k + i].ln()).sum::<f64>();
    Ok(0.5 * (quad + logdet))
}

/// Gaussian NLL in precision form: `0.5 [r^T Omega r - logdet Omega]`.
pub fn nll_precision(x: &[f64], vstar: &[f64], omega: &Tensor) -> Result<f64, UncertaintyError> {
    let k = omega.shape()[0];
    let r = residual(x, vstar);
    let logdet = linalg::logdet_spd(omega.data(), k)?;
    let mut quad = 0.0;
    for i in 0..k {
        for j in 0..k {
            quad += r[i] * omega.at2(i, j) * r[j];
        }
    }
    Ok(0.5 * (quad - logdet))
}

/// Distinctiveness-weighted NLL:
/// `0.5 [r^T (Omega + beta W) r - log det(Omega W^beta)]`
/// with `W = diag(w_1, w_1, ..., w_m, w_m)`.
pub fn uc_loss(
    x: &[f64],
    vstar: &[f64],
    omega: &Tensor,
    weights: &[f64],
    beta: f64,
) -> Result<f64, UncertaintyError> {
    let k = omega.shape()[0];
    let m = weights.len();
    if k != 2 * m {
        return Err(UncertaintyError::OffsetLength {
            len: k,
            m,
            expected: 2 * m,
        });
    }
    for &w in weights {
        if w <= 0.0 {
            return Err(UncertaintyError::BadWeight(w));
        }
    }
    let base = nll_precision(x, vstar, omega)?;
    if beta == 0.0 {
        return Ok(base);
    }
    let r = residual(x, vstar);
    let mut quad_w = 0.0;
    let mut log_w = 0.0;
    for (n, &w) in weights.iter().enumerate() {
        quad_w += w * (r[2 * n] * r[2 * n] + r[2 * n + 1] * r[2 * n + 1]);
        log_w += 2.0 * w.ln();
    }
    Ok(base + 0.5 * beta * (quad_w - log_w))
}

/// Cross-entropy on the grid probability map, scaled by `sqrt(w)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClsLoss {
    pub value: f64,
    /// Set when the target probability was floored at 1e-12.
    pub floored: bool,
}

pub const PROB_FLOOR: f64 = 1e-12;

pub fn weighted_cls_loss(prob: &Tensor, gstar: usize, w: f64) -> Result<ClsLoss, UncertaintyError> {
    let sum = prob.sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(UncertaintyError::NotNormalized { sum });
    }
    if w <= 0.0 || w > 1.0 {
        return Err(UncertaintyError::BadWeight(w));
    }
    let p = prob.data()[gstar];
    let floored = p < PROB_FLOOR;
    let value = -w.sqrt() * p.max(PROB_FLOOR).ln();
    Ok(ClsLoss { value, floored })
}

pub fn vanilla_cls_loss(prob: &Tensor, gstar: usize) -> Result<ClsLoss, UncertaintyError> {
    weighted_cls_loss(prob, gstar, 1.0)
}

/// Offset regression MSE, averaged over components.
pub fn vanilla_offset_loss(v: &[f64], vstar: &[f64]) -> f64 {
    let r = residual(v, vstar);
    r.iter().map(|e| e * e).sum::<f64>() / r.len() as f64
}

/// Fused pixel-space covariance: `(1 / (4 N)) sum_i (l0/S_i)^2 Sigma^(S_i)`.
pub fn fuse_covariances(sigmas: &[(Mat2, usize)], l0: f64) -> Result<Mat2, UncertaintyError> {
    if sigmas.is_empty() {
        return Err(UncertaintyError::EmptyCovariances);
    }
    let mut out = [[0.0f64; 2]; 2];
    for (sigma, scale) in sigmas {
        let c = (l0 / *scale as f64).powi(2);
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] += c * sigma[i][j];
            }
        }
    }
    let norm = 1.0 / (4.0 * sigmas.len() as f64);
    for row in &mut out {
        for v in row {
            *v *= norm;
        }
    }
    Ok(out)
}

/// 3-sigma confidence ellipse of a 2x2 covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UncertaintyEllipse {
    /// Semi-axes `(3 sqrt(lambda_1), 3 sqrt(lambda_2))`, pixels, major first.
    pub semi_axes: [f64; 2],
    /// Orientation of the major axis, radians from +x.
    pub angle: f64,
    /// Uncertainty strength `J = 3 (sqrt(lambda_1) + sqrt(lambda_2))`.
    pub strength: f64,
}

pub fn uncertainty_ellipse(sigma: Mat2) -> Result<UncertaintyEllipse, UncertaintyError> {
    let asym = (sigma[0][1] - sigma[1][0]).abs();
    if asym > 1e-9 {
        return Err(UncertaintyError::Asymmetric(asym));
    }
    let (a, b, c) = (sigma[0][0], 0.5 * (sigma[0][1] + sigma[1][0]), sigma[1][1]);
    let half_trace = 0.5 * (a + c);
    let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    // PSD input assumed; tiny negative eigenvalues from roundoff clamp to 0.
    let l1 = (half_trace + disc).max(0.0);
    let l2 = (half_trace - disc).max(0.0);
    // eigenvector of lambda_1 is (b, lambda_1 - a) when b != 0
    let angle = if b.abs() < 1e-300 {
        if a >= c {
            0.0
        } else {
            std::f64::consts::FRAC_PI_2
        }
    } else {
        (l1 - a).atan2(b)
    };
    let s1 = 3.0 * l1.sqrt();
    let s2 = 3.0 * l2.sqrt();
    Ok(UncertaintyEllipse {
        semi_axes: [s1, s2],
        angle,
        strength: s1 + s2,
    })
}

/// Positivity transform for semantic distinctiveness:
/// `f(x) = (x + sqrt(x^2 + eps)) / 2`.
pub fn sd_positive_transform(x: f64, eps: f64) -> f64 {
    assert!(eps > 0.0);
    0.5 * (x + (x * x + eps).sqrt())
}

/// Per-keypoint distinctiveness weight: mean of the support and query SD
/// samples. Values above 1 are clamped with a diagnostic (the transform
/// only guarantees positivity, not an upper bound).
pub fn keypoint_weight(sd_support: f64, sd_query: f64) -> Result<(f64, bool), UncertaintyError> {
    for v in [sd_support, sd_query] {
        if v <= 0.0 {
            return Err(UncertaintyError::NonPositiveSd(v));
        }
    }
    let clamped = sd_support > 1.0 || sd_query > 1.0;
    let w = 0.5 * (sd_support.min(1.0) + sd_query.min(1.0));
    Ok((w, clamped))
}
