//! Inference: prototypes from supports, per-scale argmax localization,
//! fused keypoint position and fused pixel-space covariance.

use super::features::{build_prototype, encode_image, extract_keypoint_repr, modulate, FeatureMap};
use super::forward::{argmax_cell, bind_model, descriptor_node, head_forward, sd_map_node};
use super::model::ModelState;
use super::PipelineError;
use crate::autodiff::Tape;
use crate::config::EpisodeMode;
use crate::grid::{fuse_predictions, Mat2, ScalePrediction, Vec2};
use crate::io::image::ImageRgb;
use crate::linalg;
use crate::rng::Rng;
use crate::synth::{sample_episode, AnnotatedImage, Dataset};
use crate::tensor::Tensor;
use crate::uncertainty::fuse_covariances;
use std::collections::BTreeMap;

/// One detected keypoint: fused position, fused covariance, and the
/// per-scale intermediate predictions.
#[derive(Debug, Clone)]
pub struct KeypointEstimate {
    pub type_id: usize,
    pub position: Vec2,
    pub covariance: Mat2,
    pub per_scale: Vec<ScalePrediction>,
}

/// Detect the requested keypoint types on a query image given prototypes.
pub fn detect_with_prototypes(
    state: &ModelState,
    prototypes: &[(usize, Vec<f64>)],
    query: &ImageRgb,
) -> Result<Vec<KeypointEstimate>, PipelineError> {
    let config = &state.config;
    let query_fm = encode_image(query, &state.params.encoder, config.patch_size)?;
    let l0 = config.image_size as f64;
    let mut out = Vec::with_capacity(prototypes.len());
    for (type_id, prototype) in prototypes {
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &state.params, false);
        let attentive = modulate(&query_fm, prototype)?;
        let psi = descriptor_node(&mut tape, &bound, &attentive, config.descriptor_pool)?;
        let mut per_scale = Vec::with_capacity(bound.heads.len());
        for head in &bound.heads {
            let nodes = head_forward(&mut tape, head, psi, config.latent_dim)?;
            let prob = tape.value(nodes.prob).clone();
            let cell = argmax_cell(&prob);
            let offsets = tape.value(nodes.offsets);
            let offset = [
                offsets.at3(cell[1], cell[0], 0),
                offsets.at3(cell[1], cell[0], 1),
            ];
            let covariance = match nodes.latent {
                Some(latent) => {
                    let field = tape.value(latent);
                    let d = config.latent_dim;
                    let mut q = Tensor::zeros(&[2, d]);
                    for row in 0..2 {
                        for col in 0..d {
                            q.set2(row, col, field.at3(cell[1], cell[0], row * d + col));
                        }
                    }
                    let omega =
                        crate::uncertainty::precision_from_factor(&q, config.epsilon)?;
                    let l = linalg::cholesky(omega.data(), 2)
                        .map_err(crate::uncertainty::UncertaintyError::from)?;
                    let inv = linalg::chol_inverse(&l, 2);
                    // exact symmetry despite independent column solves
                    let cross = 0.5 * (inv[1] + inv[2]);
                    [[inv[0], cross], [cross, inv[3]]]
                }
                None => [[0.0; 2]; 2],
            };
            per_scale.push(ScalePrediction {
                scale: head.scale,
                cell,
                offset,
                covariance,
            });
        }
        let position = fuse_predictions(&per_scale, l0)?;
        let sigmas: Vec<(Mat2, usize)> =
            per_scale.iter().map(|p| (p.covariance, p.scale)).collect();
        let covariance = fuse_covariances(&sigmas, l0)?;
        out.push(KeypointEstimate {
            type_id: *type_id,
            position,
            covariance,
            per_scale,
        });
    }
    Ok(out)
}

/// Prototype per requested type id; `None` marks types with no visible
/// support keypoint.
pub type TypedPrototypes = Vec<(usize, Option<Vec<f64>>)>;

/// Build per-type prototypes from annotated supports; types with no
/// visible support keypoint are reported absent (`None`).
pub fn support_prototypes(
    state: &ModelState,
    supports: &[&AnnotatedImage],
    requested: &[usize],
) -> Result<TypedPrototypes, PipelineError> {
    let config = &state.config;
    let support_fms: Vec<FeatureMap> = supports
        .iter()
        .map(|img| encode_image(&img.pixels, &state.params.encoder, config.patch_size))
        .collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(requested.len());
    for &type_id in requested {
        let mut reprs = Vec::new();
        for (img, fm) in supports.iter().zip(&support_fms) {
            let kp = img.keypoint(type_id);
            if !kp.visible {
                continue;
            }
            reprs.push(extract_keypoint_repr(
                fm,
                kp.pos,
                config.extract_mode,
                config.pooling_xi(),
                config.normalize_pooling,
                config.image_size,
            )?);
        }
        out.push((type_id, build_prototype(&reprs)));
    }
    Ok(out)
}

/// Full detection: prototypes from supports, then per-type localization on
/// the query. A type with no visible support keypoint yields `None`.
pub fn detect(
    state: &ModelState,
    supports: &[&AnnotatedImage],
    query: &ImageRgb,
    requested: &[usize],
) -> Result<Vec<(usize, Option<KeypointEstimate>)>, PipelineError> {
    let prototypes = support_prototypes(state, supports, requested)?;
    let present: Vec<(usize, Vec<f64>)> = prototypes
        .iter()
        .filter_map(|(t, p)| p.clone().map(|p| (*t, p)))
        .collect();
    if present.is_empty() {
        return Err(PipelineError::NoVisibleSupport);
    }
    let estimates = detect_with_prototypes(state, &present, query)?;
    let mut by_type: BTreeMap<usize, KeypointEstimate> =
        estimates.into_iter().map(|e| (e.type_id, e)).collect();
    Ok(requested
        .iter()
        .map(|t| (*t, by_type.remove(t)))
        .collect())
}

/// Universal keypoint prototypes: per-type mean of the support keypoint
/// prototypes over sampled episodes. Types never visible in any sampled
/// support are absent from the result.
pub fn compute_ukp(
    state: &ModelState,
    dataset: &Dataset,
    pool: &[usize],
    requested: &[usize],
    num_episodes: usize,
    mode: EpisodeMode,
    seed: u64,
) -> Result<BTreeMap<usize, Vec<f64>>, PipelineError> {
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for i in 0..num_episodes {
        let mut rng = Rng::derive(seed, &[0x756b70, i as u64]);
        let episode = sample_episode(dataset, pool, requested, state.config.k_shots, mode, &mut rng)?;
        let supports: Vec<&AnnotatedImage> =
            episode.supports.iter().map(|&i| &dataset.images[i]).collect();
        for (type_id, proto) in support_prototypes(state, &supports, &episode.active_types)? {
            let Some(proto) = proto else { continue };
            let entry = sums.entry(type_id).or_insert_with(|| (vec![0.0; proto.len()], 0));
            for (acc, v) in entry.0.iter_mut().zip(&proto) {
                *acc += v;
            }
            entry.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(t, (sum, n))| (t, sum.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Distinctiveness map values of one image (uncertainty models only).
pub fn sd_values(state: &ModelState, img: &ImageRgb) -> Result<Option<Tensor>, PipelineError> {
    if state.params.sd.is_none() {
        return Ok(None);
    }
    let fm = encode_image(img, &state.params.encoder, state.config.patch_size)?;
    let mut tape = Tape::new();
    let bound = bind_model(&mut tape, &state.params, false);
    let map = sd_map_node(&mut tape, bound.sd.as_ref().unwrap(), &fm)?;
    Ok(Some(tape.value(map).clone()))
}
