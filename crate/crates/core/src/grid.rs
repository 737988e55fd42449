//! Grid/offset localization codec, multi-scale prediction fusion, and PCK.
//!
//! A keypoint at pixel `u` in a square image of edge `l0` is encoded at
//! scale `S` as a grid cell plus a dimensionless offset in [-1, 1] relative
//! to half a cell: `t = u S / l0`, `z = floor(t) + 0.5`, `v = 2 (t - z)`.
//! Decoding inverts this exactly; predictions from several scales are fused
//! by averaging their decoded pixel positions.

use thiserror::Error;

pub type Vec2 = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("keypoint coordinates must be finite, got ({0}, {1})")]
    NonFinitePoint(f64, f64),
    #[error("cell ({x}, {y}) out of range for scale {scale}")]
    CellOutOfRange { x: usize, y: usize, scale: usize },
    #[error("empty prediction list")]
    EmptyPredictions,
    #[error("mismatched lengths: {predictions} predictions, {groundtruths} groundtruths, {visibility} visibility flags")]
    LengthMismatch {
        predictions: usize,
        groundtruths: usize,
        visibility: usize,
    },
    #[error("bounding box edges must be positive, got ({0}, {1})")]
    BadBbox(f64, f64),
}

/// Cell + offset encoding of one keypoint at one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCode {
    pub scale: usize,
    /// 2-D cell index, x then y, each in `0..scale`.
    pub cell: [usize; 2],
    /// Flat label `cell_y * scale + cell_x`.
    pub flat: usize,
    /// Offset from the cell center in units of half a cell, each component
    /// in [-1, 1]; the bounds are attained only under boundary clamping.
    pub offset: Vec2,
}

/// One scale's decoded prediction with its per-scale covariance
/// (grid-offset units squared).
#[derive(Debug, Clone)]
pub struct ScalePrediction {
    pub scale: usize,
    pub cell: [usize; 2],
    pub offset: Vec2,
    pub covariance: Mat2,
}

/// Encode a ground-truth pixel position into cell + offset at scale `S`.
///
/// Points whose cell falls outside the grid (far edge, augmentation
/// spill-over) are clamped to the nearest valid cell and the offset is
/// recomputed against the clamped center, then clipped into [-1, 1].
pub fn encode_grid(u: Vec2, scale: usize, l0: f64) -> Result<GridCode, GridError> {
    assert!(l0 > 0.0 && scale >= 1, "encode_grid preconditions");
    if !u[0].is_finite() || !u[1].is_finite() {
        return Err(GridError::NonFinitePoint(u[0], u[1]));
    }
    let max_cell = (scale - 1) as f64;
    let mut cell = [0usize; 2];
    let mut offset = [0.0f64; 2];
    for axis in 0..2 {
        let t = u[axis] * scale as f64 / l0;
        let clamped = t.floor().clamp(0.0, max_cell);
        let center = clamped + 0.5;
        cell[axis] = clamped as usize;
        offset[axis] = (2.0 * (t - center)).clamp(-1.0, 1.0);
    }
    Ok(GridCode {
        scale,
        cell,
        flat: cell[1] * scale + cell[0],
        offset,
    })
}

/// Decode a cell + offset back to pixels: `(l0/S) (g + 0.5 + 0.5 v)`.
pub fn decode_grid(cell: [usize; 2], offset: Vec2, scale: usize, l0: f64) -> Result<Vec2, GridError> {
    if cell[0] >= scale || cell[1] >= scale {
        return Err(GridError::CellOutOfRange {
            x: cell[0],
            y: cell[1],
            scale,
        });
    }
    let k = l0 / scale as f64;
    Ok([
        k * (cell[0] as f64 + 0.5 + 0.5 * offset[0]),
        k * (cell[1] as f64 + 0.5 + 0.5 * offset[1]),
    ])
}

/// Unified keypoint position: arithmetic mean of per-scale decodes.
pub fn fuse_predictions(preds: &[ScalePrediction], l0: f64) -> Result<Vec2, GridError> {
    if preds.is_empty() {
        return Err(GridError::EmptyPredictions);
    }
    let mut acc = [0.0f64; 2];
    for p in preds {
        let u = decode_grid(p.cell, p.offset, p.scale, l0)?;
        acc[0] += u[0];
        acc[1] += u[1];
    }
    let n = preds.len() as f64;
    Ok([acc[0] / n, acc[1] / n])
}

/// Percentage of correct keypoints at threshold `tau * max(bbox edges)`.
///
/// Only keypoints visible in the ground truth are scored; a prediction is
/// correct when its Euclidean error is strictly below the threshold. With
/// zero visible keypoints there is no score (`None`), which callers must
/// exclude from averaging rather than count as zero.
pub fn pck(
    predictions: &[Vec2],
    groundtruths: &[Vec2],
    visibility: &[bool],
    bbox: (f64, f64),
    tau: f64,
) -> Result<Option<f64>, GridError> {
    if predictions.len() != groundtruths.len() || predictions.len() != visibility.len() {
        return Err(GridError::LengthMismatch {
            predictions: predictions.len(),
            groundtruths: groundtruths.len(),
            visibility: visibility.len(),
        });
    }
    if bbox.0 <= 0.0 || bbox.1 <= 0.0 {
        return Err(GridError::BadBbox(bbox.0, bbox.1));
    }
    let threshold = tau * bbox.0.max(bbox.1);
    let mut visible = 0usize;
    let mut correct = 0usize;
    for ((p, g), &vis) in predictions.iter().zip(groundtruths).zip(visibility) {
        if !vis {
            continue;
        }
        visible += 1;
        let err = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
        if err < threshold {
            correct += 1;
        }
    }
    if visible == 0 {
        return Ok(None);
    }
    Ok(Some(correct as f64 / visible as f64))
}
