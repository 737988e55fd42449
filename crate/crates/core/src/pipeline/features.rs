//! Frozen patch encoder, keypoint representation extraction (integer
//! indexing / bilinear / Gaussian pooling), prototypes, and feature
//! modulation. None of this is trainable, so it runs on plain tensors and
//! enters the tape as constants.

use super::model::DenseParams;
use super::PipelineError;
use crate::config::ExtractMode;
use crate::grid::Vec2;
use crate::io::image::ImageRgb;
use crate::tensor::Tensor;

/// Encoded image: an `l x l x C` feature map.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub side: usize,
    pub channels: usize,
    pub data: Tensor,
    /// Downsize factor f = side / l0.
    pub downsize: f64,
}

/// Encode a square image with the frozen patch projection: non-overlapping
/// `p x p` patches, linear map to C channels, relu, then per-channel
/// standardization over positions. Deterministic for fixed encoder
/// parameters.
///
/// The standardization stage turns the all-positive relu activations into
/// signed contrasts; without it the channel-wise correlation against a
/// prototype is dominated by feature magnitude and carries almost no
/// positional signal.
pub fn encode_image(
    img: &ImageRgb,
    encoder: &DenseParams,
    patch: usize,
) -> Result<FeatureMap, PipelineError> {
    if img.width != img.height || !img.width.is_multiple_of(patch) {
        return Err(PipelineError::BadImageSize {
            width: img.width,
            height: img.height,
            patch,
        });
    }
    let l0 = img.width;
    let side = l0 / patch;
    let channels = encoder.w.shape()[0];
    let mut data = Tensor::zeros(&[side, side, channels]);
    let mut patch_vec = vec![0.0f64; 3 * patch * patch];
    for gy in 0..side {
        for gx in 0..side {
            let mut i = 0;
            for dy in 0..patch {
                for dx in 0..patch {
                    let px = img.get(gx * patch + dx, gy * patch + dy);
                    patch_vec[i] = px[0] as f64 / 255.0;
                    patch_vec[i + 1] = px[1] as f64 / 255.0;
                    patch_vec[i + 2] = px[2] as f64 / 255.0;
                    i += 3;
                }
            }
            let x = Tensor::vector(&patch_vec);
            let projected = encoder.w.matmul(&x).expect("encoder shapes");
            for c in 0..channels {
                let v = (projected.data()[c] + encoder.b.data()[c]).max(0.0);
                data.set3(gy, gx, c, v);
            }
        }
    }
    let positions = (side * side) as f64;
    for c in 0..channels {
        let mut mean = 0.0;
        for y in 0..side {
            for x in 0..side {
                mean += data.at3(y, x, c);
            }
        }
        mean /= positions;
        let mut var = 0.0;
        for y in 0..side {
            for x in 0..side {
                let d = data.at3(y, x, c) - mean;
                var += d * d;
            }
        }
        let inv_sd = 1.0 / ((var / positions).sqrt() + 1e-6);
        for y in 0..side {
            for x in 0..side {
                data.set3(y, x, c, (data.at3(y, x, c) - mean) * inv_sd);
            }
        }
    }
    Ok(FeatureMap {
        side,
        channels,
        data,
        downsize: side as f64 / l0 as f64,
    })
}

/// Extract the representation of a keypoint at pixel position `u`.
///
/// Gaussian pooling sums `exp(-|x - u_f|^2 / 2 xi^2) * fm(x)` over every
/// grid position (`u_f = u * f`); `normalize` divides by the weight sum.
/// Integer indexing and bilinear interpolation are the cheaper variants.
pub fn extract_keypoint_repr(
    fm: &FeatureMap,
    u: Vec2,
    mode: ExtractMode,
    xi: f64,
    normalize: bool,
    l0: usize,
) -> Result<Vec<f64>, PipelineError> {
    if u[0] < 0.0 || u[1] < 0.0 || u[0] >= l0 as f64 || u[1] >= l0 as f64 {
        return Err(PipelineError::KeypointOutsideImage { x: u[0], y: u[1] });
    }
    let uf = [u[0] * fm.downsize, u[1] * fm.downsize];
    let last = (fm.side - 1) as f64;
    match mode {
        ExtractMode::Index => {
            let x = uf[0].floor().clamp(0.0, last) as usize;
            let y = uf[1].floor().clamp(0.0, last) as usize;
            Ok((0..fm.channels).map(|c| fm.data.at3(y, x, c)).collect())
        }
        ExtractMode::Bilinear => {
            let x = uf[0].clamp(0.0, last);
            let y = uf[1].clamp(0.0, last);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(fm.side - 1), (y0 + 1).min(fm.side - 1));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            Ok((0..fm.channels)
                .map(|c| {
                    let top = fm.data.at3(y0, x0, c) * (1.0 - fx) + fm.data.at3(y0, x1, c) * fx;
                    let bot = fm.data.at3(y1, x0, c) * (1.0 - fx) + fm.data.at3(y1, x1, c) * fx;
                    top * (1.0 - fy) + bot * fy
                })
                .collect())
        }
        ExtractMode::Gauss => {
            assert!(xi > 0.0, "gaussian pooling width must be positive");
            let mut acc = vec![0.0f64; fm.channels];
            let mut weight_sum = 0.0;
            let inv = 1.0 / (2.0 * xi * xi);
            for y in 0..fm.side {
                for x in 0..fm.side {
                    let d2 = (x as f64 - uf[0]).powi(2) + (y as f64 - uf[1]).powi(2);
                    let w = (-d2 * inv).exp();
                    weight_sum += w;
                    for (c, slot) in acc.iter_mut().enumerate() {
                        *slot += w * fm.data.at3(y, x, c);
                    }
                }
            }
            if normalize && weight_sum > 0.0 {
                for slot in &mut acc {
                    *slot /= weight_sum;
                }
            }
            Ok(acc)
        }
    }
}

/// Per-type support keypoint prototype: mean of the available
/// representations of that type across support images.
pub fn build_prototype(reprs: &[Vec<f64>]) -> Option<Vec<f64>> {
    if reprs.is_empty() {
        return None;
    }
    let dim = reprs[0].len();
    let mut mean = vec![0.0f64; dim];
    for r in reprs {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    let k = reprs.len() as f64;
    for m in &mut mean {
        *m /= k;
    }
    Some(mean)
}

/// Channel-wise modulation: `A_n(p) = fm(p) * prototype` at every position.
pub fn modulate(query: &FeatureMap, prototype: &[f64]) -> Result<Tensor, PipelineError> {
    if prototype.len() != query.channels {
        return Err(PipelineError::ChannelMismatch {
            features: query.channels,
            prototype: prototype.len(),
        });
    }
    let mut out = query.data.clone();
    let side = query.side;
    for y in 0..side {
        for x in 0..side {
            for (c, p) in prototype.iter().enumerate() {
                out.set3(y, x, c, query.data.at3(y, x, c) * p);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::pipeline::model::ModelParams;

    fn small_fm() -> FeatureMap {
        // 4x4 map, 2 channels, l0 = 48 (patch 12)
        let mut data = Tensor::zeros(&[4, 4, 2]);
        for y in 0..4 {
            for x in 0..4 {
                data.set3(y, x, 0, (y * 4 + x) as f64);
                data.set3(y, x, 1, 1.0);
            }
        }
        FeatureMap {
            side: 4,
            channels: 2,
            data,
            downsize: 4.0 / 48.0,
        }
    }

    #[test]
    fn encode_is_deterministic_and_shape_correct() {
        let c = RunConfig {
            channels: 8,
            ..Default::default()
        };
        let params = ModelParams::init(&c);
        let img = ImageRgb::filled(96, 96, [30, 60, 90]);
        let a = encode_image(&img, &params.encoder, 12).unwrap();
        let b = encode_image(&img, &params.encoder, 12).unwrap();
        assert_eq!(a.side, 8);
        assert_eq!(a.channels, 8);
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn zero_image_gives_uniform_bias_response() {
        // constant input: every position carries the encoder's bias
        // response, which standardizes to the same value (zero) everywhere
        let c = RunConfig {
            channels: 8,
            ..Default::default()
        };
        let params = ModelParams::init(&c);
        let img = ImageRgb::new(96, 96);
        let fm = encode_image(&img, &params.encoder, 12).unwrap();
        let first: Vec<f64> = (0..fm.channels).map(|ch| fm.data.at3(0, 0, ch)).collect();
        for y in 0..fm.side {
            for x in 0..fm.side {
                for (ch, expect) in first.iter().enumerate() {
                    assert_eq!(fm.data.at3(y, x, ch), *expect);
                    // a zero-variance channel standardizes to (numerically) zero
                    assert!(fm.data.at3(y, x, ch).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let c = RunConfig::default();
        let params = ModelParams::init(&c);
        let img = ImageRgb::new(95, 96);
        assert!(encode_image(&img, &params.encoder, 12).is_err());
    }

    #[test]
    fn index_mode_reads_cell() {
        let fm = small_fm();
        // pixel (30, 18) -> feature (2.5, 1.5) -> cell (2, 1) -> value 6
        let repr = extract_keypoint_repr(&fm, [30.0, 18.0], ExtractMode::Index, 1.0, false, 48)
            .unwrap();
        assert_eq!(repr[0], 6.0);
    }

    #[test]
    fn gauss_single_support_case() {
        // zero map except one cell; keypoint on that cell
        let mut data = Tensor::zeros(&[4, 4, 1]);
        data.set3(1, 2, 0, 5.0);
        let fm = FeatureMap {
            side: 4,
            channels: 1,
            data,
            downsize: 4.0 / 48.0,
        };
        // u_f = (2, 1), weight there is exp(0) = 1
        let raw =
            extract_keypoint_repr(&fm, [24.0, 12.0], ExtractMode::Gauss, 0.8, false, 48).unwrap();
        assert!((raw[0] - 5.0).abs() < 1e-12);
        let norm =
            extract_keypoint_repr(&fm, [24.0, 12.0], ExtractMode::Gauss, 0.8, true, 48).unwrap();
        // with normalization and all other cells zero: exactly the cell value
        assert!(norm[0] < raw[0] + 1e-12);
        assert!(norm[0] > 0.0);
    }

    #[test]
    fn gauss_constant_map_matches_bruteforce_weight_sum() {
        let c = 3.5f64;
        let side = 8usize;
        let fm = FeatureMap {
            side,
            channels: 1,
            data: Tensor::filled(&[side, side, 1], c),
            downsize: 8.0 / 96.0,
        };
        let xi = 3.5;
        let u = [48.0, 48.0]; // u_f = (4, 4)
        let repr = extract_keypoint_repr(&fm, u, ExtractMode::Gauss, xi, false, 96).unwrap();
        let mut wsum = 0.0;
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f64 - 4.0).powi(2) + (y as f64 - 4.0).powi(2);
                wsum += (-d2 / (2.0 * xi * xi)).exp();
            }
        }
        assert!((repr[0] - c * wsum).abs() < 1e-9);
    }

    #[test]
    fn outside_image_rejected() {
        let fm = small_fm();
        assert!(
            extract_keypoint_repr(&fm, [48.0, 10.0], ExtractMode::Index, 1.0, false, 48).is_err()
        );
    }

    #[test]
    fn prototypes_average() {
        assert_eq!(build_prototype(&[]), None);
        assert_eq!(build_prototype(&[vec![1.0, 2.0]]), Some(vec![1.0, 2.0]));
        assert_eq!(
            build_prototype(&[vec![0.0, 2.0], vec![2.0, 0.0]]),
            Some(vec![1.0, 1.0])
        );
    }

    #[test]
    fn modulation_is_channelwise_product() {
        let fm = small_fm();
        let all_ones = modulate(&fm, &[1.0, 1.0]).unwrap();
        assert_eq!(all_ones, fm.data);
        let zero = modulate(&fm, &[0.0, 0.0]).unwrap();
        assert_eq!(zero.sum(), 0.0);
        let mixed = modulate(&fm, &[2.0, 0.5]).unwrap();
        assert_eq!(mixed.at3(1, 2, 0), 12.0);
        assert_eq!(mixed.at3(1, 2, 1), 0.5);
        assert!(modulate(&fm, &[1.0]).is_err());
    }
}
