//! Uncertainty-weighted thin-plate-spline warping.
//!
//! Given support landmarks `P`, target points `P'` and per-point
//! uncertainty strengths `J`, the transform minimizes a weighted fit error
//! plus `lambda` times the bending energy. With `D = diag(J)` the
//! parameters `T = [B | A]` solve the bordered system
//!
//! ```text
//! [ R + lambda D^2   Phat^T ] [ B^T ]   [ P'^T ]
//! [ Phat             0      ] [ A^T ] = [ 0    ]
//! ```
//!
//! where `r_ij = d_ij^2 log d_ij^2` (natural log, `r_ii = 0` by the limit)
//! and `Phat` stacks `[1, x, y]` per landmark. A large `J_i` relaxes the
//! fit at landmark `i`; `J_i = 0` makes it a hard interpolation constraint.

use crate::grid::Vec2;
use crate::io::image::ImageRgb;
use crate::linalg::{self, LinalgError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TpsError {
    #[error("need at least 3 landmarks, got {0}")]
    TooFewLandmarks(usize),
    #[error("landmark count mismatch: {sources} source, {targets} target, {strengths} strengths")]
    CountMismatch {
        sources: usize,
        targets: usize,
        strengths: usize,
    },
    #[error("duplicate landmarks {i} and {j} (distance {dist:.3e})")]
    DuplicatePoints { i: usize, j: usize, dist: f64 },
    #[error("negative uncertainty strength {0}")]
    NegativeStrength(f64),
    #[error("negative warping penalty {0}")]
    NegativePenalty(f64),
    #[error("tps system singular: {0}")]
    Singular(#[from] LinalgError),
}

/// Landmark correspondences with per-point uncertainty strengths (pixels).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Correspondences {
    /// Support keypoints (the frame the output is aligned to).
    #[serde(rename = "P")]
    pub source: Vec<Vec2>,
    /// Predicted query keypoints.
    #[serde(rename = "P_prime")]
    pub target: Vec<Vec2>,
    /// Uncertainty strength per pair; larger means "warp less here".
    #[serde(rename = "J")]
    pub strengths: Vec<f64>,
    pub lambda: f64,
    /// Optional ground-truth query keypoints for the reference warp.
    #[serde(rename = "P_gt", default, skip_serializing_if = "Option::is_none")]
    pub target_gt: Option<Vec<Vec2>>,
}

impl Correspondences {
    fn validate(&self) -> Result<(), TpsError> {
        let n = self.source.len();
        if n < 3 {
            return Err(TpsError::TooFewLandmarks(n));
        }
        if self.target.len() != n || self.strengths.len() != n {
            return Err(TpsError::CountMismatch {
                sources: n,
                targets: self.target.len(),
                strengths: self.strengths.len(),
            });
        }
        for &j in &self.strengths {
            if j < 0.0 {
                return Err(TpsError::NegativeStrength(j));
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let d = dist(self.source[i], self.source[j]);
                if d < 1e-9 {
                    return Err(TpsError::DuplicatePoints { i, j, dist: d });
                }
            }
        }
        Ok(())
    }
}

/// Solved transform: `f(p) = A [1, x, y]^T + sum_n b_n phi(|p - p_n|)`.
#[derive(Debug, Clone)]
pub struct TpsTransform {
    /// RBF weights, 2 x N (row per output coordinate).
    pub rbf_weights: Vec<[f64; 2]>,
    /// Affine part, 2 x 3 as `[ [a0, ax, ay]; ... ]`.
    pub affine: [[f64; 3]; 2],
    /// Support landmarks defining the radial basis.
    pub landmarks: Vec<Vec2>,
    pub lambda: f64,
    pub strengths: Vec<f64>,
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// `phi(d) = d^2 log(d^2)`, with the `d -> 0` limit of 0.
fn kernel(d: f64) -> f64 {
    if d <= 0.0 {
        0.0
    } else {
        let d2 = d * d;
        d2 * d2.ln()
    }
}

/// Kernel matrix `R` over one landmark set.
fn kernel_matrix(points: &[Vec2]) -> Vec<f64> {
    let n = points.len();
    let mut r = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v = kernel(dist(points[i], points[j]));
            r[i * n + j] = v;
            r[j * n + i] = v;
        }
    }
    r
}

/// Solve the bordered system for the transform parameters.
pub fn solve_tps(corr: &Correspondences, lambda: f64) -> Result<TpsTransform, TpsError> {
    if lambda < 0.0 {
        return Err(TpsError::NegativePenalty(lambda));
    }
    corr.validate()?;
    let n = corr.source.len();
    let dim = n + 3;
    let r = kernel_matrix(&corr.source);

    let mut system = vec![0.0; dim * dim];
    for i in 0..n {
        for j in 0..n {
            system[i * dim + j] = r[i * n + j];
        }
        system[i * dim + i] += lambda * corr.strengths[i] * corr.strengths[i];
        // Phat^T columns: [1, x, y]
        system[i * dim + n] = 1.0;
        system[i * dim + n + 1] = corr.source[i][0];
        system[i * dim + n + 2] = corr.source[i][1];
        // Phat rows
        system[n * dim + i] = 1.0;
        system[(n + 1) * dim + i] = corr.source[i][0];
        system[(n + 2) * dim + i] = corr.source[i][1];
    }

    let mut rhs = vec![0.0; dim * 2];
    for i in 0..n {
        rhs[i * 2] = corr.target[i][0];
        rhs[i * 2 + 1] = corr.target[i][1];
    }

    let solution = linalg::lu_solve(system, dim, rhs, 2)?;
    let rbf_weights: Vec<[f64; 2]> = (0..n)
        .map(|i| [solution[i * 2], solution[i * 2 + 1]])
        .collect();
    let affine = [
        [solution[n * 2], solution[(n + 1) * 2], solution[(n + 2) * 2]],
        [
            solution[n * 2 + 1],
            solution[(n + 1) * 2 + 1],
            solution[(n + 2) * 2 + 1],
        ],
    ];
    Ok(TpsTransform {
        rbf_weights,
        affine,
        landmarks: corr.source.clone(),
        lambda,
        strengths: corr.strengths.clone(),
    })
}

impl TpsTransform {
    /// Evaluate `f(point)`.
    pub fn apply(&self, point: Vec2) -> Vec2 {
        let mut out = [
            self.affine[0][0] + self.affine[0][1] * point[0] + self.affine[0][2] * point[1],
            self.affine[1][0] + self.affine[1][1] * point[0] + self.affine[1][2] * point[1],
        ];
        for (landmark, b) in self.landmarks.iter().zip(&self.rbf_weights) {
            let k = kernel(dist(*landmark, point));
            out[0] += b[0] * k;
            out[1] += b[1] * k;
        }
        out
    }

    /// Residuals of the side conditions `B 1 = 0` and `B P^T = 0`; both must
    /// vanish for a valid thin-plate solution.
    pub fn side_condition_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for axis in 0..2 {
            let mut s0 = 0.0;
            let mut sx = 0.0;
            let mut sy = 0.0;
            for (landmark, b) in self.landmarks.iter().zip(&self.rbf_weights) {
                s0 += b[axis];
                sx += b[axis] * landmark[0];
                sy += b[axis] * landmark[1];
            }
            worst = worst.max(s0.abs()).max(sx.abs()).max(sy.abs());
        }
        worst
    }

    /// Bending term `tr(B R B^T)`.
    pub fn bending_energy(&self) -> f64 {
        let n = self.landmarks.len();
        let r = kernel_matrix(&self.landmarks);
        let mut total = 0.0;
        for axis in 0..2 {
            for i in 0..n {
                for j in 0..n {
                    total += self.rbf_weights[i][axis] * r[i * n + j] * self.rbf_weights[j][axis];
                }
            }
        }
        total
    }
}

/// Reduced objective `sum_i w_i^2 |p'_i - f(p_i)|^2 + lambda tr(B R B^T)`
/// with `w_i = 1 / J_i`. Pairs with `J_i = 0` act as hard constraints and
/// contribute no (finite-weighted) residual term.
pub fn tps_objective(corr: &Correspondences, t: &TpsTransform, lambda: f64) -> Result<f64, TpsError> {
    corr.validate()?;
    if lambda < 0.0 {
        return Err(TpsError::NegativePenalty(lambda));
    }
    let mut fit = 0.0;
    for ((p, p_prime), &j) in corr.source.iter().zip(&corr.target).zip(&corr.strengths) {
        if j == 0.0 {
            continue;
        }
        let f = t.apply(*p);
        let e2 = (p_prime[0] - f[0]).powi(2) + (p_prime[1] - f[1]).powi(2);
        fit += e2 / (j * j);
    }
    Ok(fit + lambda * t.bending_energy())
}

/// Inverse-map an image through the transform: output pixel `q'` samples
/// the input at `f(q')` with bilinear interpolation; samples outside the
/// source are filled with `pad`.
pub fn warp_image(query: &ImageRgb, t: &TpsTransform, out_size: (usize, usize), pad: [u8; 3]) -> ImageRgb {
    let (w, h) = out_size;
    let mut out = ImageRgb::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let src = t.apply([x as f64, y as f64]);
            let px = query.sample_bilinear(src[0], src[1]).unwrap_or(pad);
            out.put(x, y, px);
        }
    }
    out
}
