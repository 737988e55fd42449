//! Episode loss assembly: main keypoints, auxiliary keypoints, and grouped
//! multi-keypoint terms across every configured scale.
//!
//! Per keypoint and scale S the loss is `alpha_uc * L_offset + alpha_cls *
//! L_cls`, where the offset term is the distinctiveness-weighted precision
//! NLL (uncertainty mode) or plain MSE (vanilla mode), and the
//! classification term is (weighted) cross-entropy at the ground-truth
//! cell. Scales are averaged per keypoint, keypoints averaged per term,
//! and the three terms combined with the gamma weights.

use super::aux::{generate_aux_keypoints, make_groups, select_paths, AuxPoint};
use super::features::{build_prototype, encode_image, extract_keypoint_repr, modulate, FeatureMap};
use super::forward::{
    descriptor_node, factor_at_cell, head_forward, offset_at_cell, sd_map_node, sd_sample_node,
    BoundModel,
};
use super::model::ModelParams;
use super::PipelineError;
use crate::autodiff::{Tape, VarId};
use crate::config::RunConfig;
use crate::grid::{encode_grid, Vec2};
use crate::rng::Rng;
use crate::synth::{Dataset, Episode};
use crate::tensor::Tensor;
use crate::uncertainty::graph::{cls_loss_node, mse_node, precision_node, uc_loss_node};

/// Encoded (frozen) features of an episode's images.
pub struct EncodedEpisode {
    pub supports: Vec<FeatureMap>,
    pub query: FeatureMap,
}

pub fn encode_episode(
    params: &ModelParams,
    dataset: &Dataset,
    episode: &Episode,
    patch: usize,
) -> Result<EncodedEpisode, PipelineError> {
    let supports = episode
        .supports
        .iter()
        .map(|&i| encode_image(&dataset.images[i].pixels, &params.encoder, patch))
        .collect::<Result<Vec<_>, _>>()?;
    let query = encode_image(&dataset.images[episode.query].pixels, &params.encoder, patch)?;
    Ok(EncodedEpisode { supports, query })
}

/// Per-term loss values of one episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub main: f64,
    pub aux: f64,
    pub group: f64,
    pub main_count: usize,
    pub aux_count: usize,
    pub group_count: usize,
}

/// One supervised keypoint (main or auxiliary) in the query frame.
struct Target {
    prototype: Vec<f64>,
    query_gt: Vec2,
    /// (support index, position) pairs for distinctiveness sampling.
    support_positions: Vec<(usize, Vec2)>,
}

struct ScaleNodes {
    offset_pred: VarId,
    gt_offset: Vec2,
    factor: Option<VarId>,
    cls_loss: VarId,
}

struct KeypointNodes {
    psi: VarId,
    weight: Option<VarId>,
    per_scale: Vec<ScaleNodes>,
}

fn build_target(
    dataset: &Dataset,
    episode: &Episode,
    encoded: &EncodedEpisode,
    config: &RunConfig,
    type_id: usize,
) -> Result<Option<Target>, PipelineError> {
    let query_kp = dataset.images[episode.query].keypoint(type_id);
    if !query_kp.visible {
        return Ok(None);
    }
    let mut reprs = Vec::new();
    let mut support_positions = Vec::new();
    for (si, &img_idx) in episode.supports.iter().enumerate() {
        let kp = dataset.images[img_idx].keypoint(type_id);
        if !kp.visible {
            continue;
        }
        reprs.push(extract_keypoint_repr(
            &encoded.supports[si],
            kp.pos,
            config.extract_mode,
            config.pooling_xi(),
            config.normalize_pooling,
            config.image_size,
        )?);
        support_positions.push((si, kp.pos));
    }
    let Some(prototype) = build_prototype(&reprs) else {
        return Ok(None);
    };
    Ok(Some(Target {
        prototype,
        query_gt: query_kp.pos,
        support_positions,
    }))
}

fn build_aux_target(
    dataset: &Dataset,
    episode: &Episode,
    encoded: &EncodedEpisode,
    config: &RunConfig,
    query_point: &AuxPoint,
) -> Result<Option<Target>, PipelineError> {
    let mut reprs = Vec::new();
    let mut support_positions = Vec::new();
    for (si, &img_idx) in episode.supports.iter().enumerate() {
        let img = &dataset.images[img_idx];
        let aux = generate_aux_keypoints(
            &img.keypoints,
            &[query_point.path],
            &config.interp_nodes,
            &img.mask,
        );
        let Some(point) = aux.iter().find(|p| p.node == query_point.node) else {
            continue;
        };
        reprs.push(extract_keypoint_repr(
            &encoded.supports[si],
            point.pos,
            config.extract_mode,
            config.pooling_xi(),
            config.normalize_pooling,
            config.image_size,
        )?);
        support_positions.push((si, point.pos));
    }
    let Some(prototype) = build_prototype(&reprs) else {
        return Ok(None);
    };
    Ok(Some(Target {
        prototype,
        query_gt: query_point.pos,
        support_positions,
    }))
}

fn mean_of(tape: &mut Tape, nodes: &[VarId]) -> Result<VarId, PipelineError> {
    assert!(!nodes.is_empty());
    let mut acc = nodes[0];
    for &n in &nodes[1..] {
        acc = tape.add(acc, n)?;
    }
    Ok(tape.scale(acc, 1.0 / nodes.len() as f64))
}

type SdMaps = (Vec<VarId>, VarId);

fn build_keypoint_nodes(
    tape: &mut Tape,
    bound: &BoundModel,
    encoded: &EncodedEpisode,
    config: &RunConfig,
    target: &Target,
    sd_maps: &Option<SdMaps>,
) -> Result<KeypointNodes, PipelineError> {
    let l0 = config.image_size as f64;
    let attentive = modulate(&encoded.query, &target.prototype)?;
    let psi = descriptor_node(tape, bound, &attentive, config.descriptor_pool)?;
    let weight = match sd_maps {
        Some((support_maps, query_map)) => {
            let mut support_nodes = Vec::new();
            for (si, pos) in &target.support_positions {
                support_nodes.push(sd_sample_node(
                    tape,
                    support_maps[*si],
                    encoded.supports[*si].side,
                    *pos,
                    encoded.supports[*si].downsize,
                )?);
            }
            let support_mean = mean_of(tape, &support_nodes)?;
            let query_sample = sd_sample_node(
                tape,
                *query_map,
                encoded.query.side,
                target.query_gt,
                encoded.query.downsize,
            )?;
            let sum = tape.add(support_mean, query_sample)?;
            Some(tape.scale(sum, 0.5))
        }
        None => None,
    };
    let mut per_scale = Vec::with_capacity(bound.heads.len());
    for head in &bound.heads {
        let nodes = head_forward(tape, head, psi, config.latent_dim)?;
        let code = encode_grid(target.query_gt, head.scale, l0)?;
        let offset_pred = offset_at_cell(tape, nodes.offsets, code.cell)?;
        let factor = match nodes.latent {
            Some(latent) => Some(factor_at_cell(tape, latent, code.cell, config.latent_dim)?),
            None => None,
        };
        let cls_loss = cls_loss_node(tape, nodes.prob, code.flat, weight)?;
        per_scale.push(ScaleNodes {
            offset_pred,
            gt_offset: code.offset,
            factor,
            cls_loss,
        });
    }
    Ok(KeypointNodes {
        psi,
        weight,
        per_scale,
    })
}

/// Offset + classification loss of one keypoint, averaged over scales.
fn keypoint_loss(
    tape: &mut Tape,
    kp: &KeypointNodes,
    config: &RunConfig,
) -> Result<VarId, PipelineError> {
    let mut per_scale = Vec::with_capacity(kp.per_scale.len());
    for scale in &kp.per_scale {
        let gt = tape.constant(Tensor::vector(&scale.gt_offset));
        let offset_term = match (&scale.factor, kp.weight) {
            (Some(q), weight) => {
                let omega = precision_node(tape, *q, config.epsilon)?;
                let weights: Vec<VarId> = weight.into_iter().collect();
                uc_loss_node(tape, scale.offset_pred, gt, omega, &weights, config.beta)?
            }
            (None, _) => mse_node(tape, scale.offset_pred, gt)?,
        };
        let weighted_offset = tape.scale(offset_term, config.alpha_uc);
        let weighted_cls = tape.scale(scale.cls_loss, config.alpha_cls);
        per_scale.push(tape.add(weighted_offset, weighted_cls)?);
    }
    mean_of(tape, &per_scale)
}

/// Identifies a member of a path sequence for grouping.
#[derive(Clone, Copy, PartialEq)]
enum Member {
    Main(usize),
    Aux(usize),
}

/// Build the full episode loss graph. Returns the scalar loss node and the
/// evaluated per-term breakdown.
///
/// `path_seed` pins the random path selection so the same episode always
/// produces the same graph.
pub fn episode_loss_graph(
    tape: &mut Tape,
    bound: &BoundModel,
    encoded: &EncodedEpisode,
    dataset: &Dataset,
    episode: &Episode,
    config: &RunConfig,
    path_seed: u64,
) -> Result<(VarId, LossBreakdown), PipelineError> {
    // distinctiveness maps, one per image, shared by every keypoint
    let sd_maps: Option<SdMaps> = match (&bound.sd, config.uncertainty) {
        (Some(sd), true) => {
            let mut support_maps = Vec::with_capacity(encoded.supports.len());
            for fm in &encoded.supports {
                support_maps.push(sd_map_node(tape, sd, fm)?);
            }
            let query_map = sd_map_node(tape, sd, &encoded.query)?;
            Some((support_maps, query_map))
        }
        _ => None,
    };

    // supervised main keypoints, in active-type order
    let mut main_targets: Vec<(usize, Target)> = Vec::new();
    for &type_id in &episode.active_types {
        if let Some(target) = build_target(dataset, episode, encoded, config, type_id)? {
            main_targets.push((type_id, target));
        }
    }

    // auxiliary keypoints surviving interpolation + pruning in the query
    let mut aux_targets: Vec<(AuxPoint, Target)> = Vec::new();
    let mut selected_paths: Vec<(usize, usize)> = Vec::new();
    if config.aux_keypoints {
        let candidates: Vec<usize> = main_targets.iter().map(|(t, _)| *t).collect();
        let mut path_rng = Rng::derive(path_seed, &[0x70617468]);
        selected_paths = select_paths(
            &dataset.split.limb_paths,
            &candidates,
            config.path_mode,
            config.rand_paths,
            &mut path_rng,
        );
        let query_img = &dataset.images[episode.query];
        let query_aux = generate_aux_keypoints(
            &query_img.keypoints,
            &selected_paths,
            &config.interp_nodes,
            &query_img.mask,
        );
        for point in query_aux {
            if let Some(target) = build_aux_target(dataset, episode, encoded, config, &point)? {
                aux_targets.push((point, target));
            }
        }
    }

    if main_targets.is_empty() && aux_targets.is_empty() {
        return Err(PipelineError::NoSupervision);
    }

    let main_nodes: Vec<KeypointNodes> = main_targets
        .iter()
        .map(|(_, t)| build_keypoint_nodes(tape, bound, encoded, config, t, &sd_maps))
        .collect::<Result<_, _>>()?;
    let aux_nodes: Vec<KeypointNodes> = aux_targets
        .iter()
        .map(|(_, t)| build_keypoint_nodes(tape, bound, encoded, config, t, &sd_maps))
        .collect::<Result<_, _>>()?;

    let zero = tape.constant(Tensor::scalar(0.0));

    let main_term = if main_nodes.is_empty() {
        zero
    } else {
        let losses = main_nodes
            .iter()
            .map(|kp| keypoint_loss(tape, kp, config))
            .collect::<Result<Vec<_>, _>>()?;
        mean_of(tape, &losses)?
    };

    let aux_term = if aux_nodes.is_empty() {
        zero
    } else {
        let losses = aux_nodes
            .iter()
            .map(|kp| keypoint_loss(tape, kp, config))
            .collect::<Result<Vec<_>, _>>()?;
        mean_of(tape, &losses)?
    };

    // grouped multi-keypoint term: sliding windows along each path's
    // ordered sequence [endpoint, node_0.25, node_0.5, node_0.75, endpoint]
    let mut group_losses: Vec<VarId> = Vec::new();
    if let Some(group_head) = &bound.group {
        if config.group_size >= 2 && !aux_nodes.is_empty() {
            let member_of = |m: Member| -> &KeypointNodes {
                match m {
                    Member::Main(i) => &main_nodes[i],
                    Member::Aux(i) => &aux_nodes[i],
                }
            };
            for &path in &selected_paths {
                let mut sequence: Vec<Member> = Vec::new();
                if let Some(i) = main_targets.iter().position(|(t, _)| *t == path.0) {
                    sequence.push(Member::Main(i));
                }
                for (i, (point, _)) in aux_targets.iter().enumerate() {
                    if point.path == path {
                        sequence.push(Member::Aux(i));
                    }
                }
                if let Some(i) = main_targets.iter().position(|(t, _)| *t == path.1) {
                    sequence.push(Member::Main(i));
                }
                for window in make_groups(&sequence, config.group_size) {
                    let members: Vec<&KeypointNodes> =
                        window.iter().map(|&m| member_of(m)).collect();
                    let mut per_scale = Vec::with_capacity(bound.heads.len());
                    for scale_idx in 0..bound.heads.len() {
                        let psis: Vec<VarId> = members.iter().map(|m| m.psi).collect();
                        let joint = tape.concat(&psis)?;
                        let raw = super::forward::mlp_head(tape, group_head, joint)?;
                        let m = config.group_size;
                        let q = tape.reshape(raw, &[2 * m, 2 * m])?;
                        let omega = precision_node(tape, q, config.epsilon)?;
                        let preds: Vec<VarId> = members
                            .iter()
                            .map(|kp| kp.per_scale[scale_idx].offset_pred)
                            .collect();
                        let stacked = tape.concat(&preds)?;
                        let mut gts = Vec::with_capacity(2 * m);
                        for kp in &members {
                            gts.extend_from_slice(&kp.per_scale[scale_idx].gt_offset);
                        }
                        let gt = tape.constant(Tensor::vector(&gts));
                        let weights: Vec<VarId> =
                            members.iter().filter_map(|kp| kp.weight).collect();
                        let loss = uc_loss_node(
                            tape,
                            stacked,
                            gt,
                            omega,
                            &weights,
                            if weights.len() == members.len() {
                                config.beta
                            } else {
                                0.0
                            },
                        )?;
                        per_scale.push(loss);
                    }
                    group_losses.push(mean_of(tape, &per_scale)?);
                }
            }
        }
    }
    let group_term = if group_losses.is_empty() {
        zero
    } else {
        mean_of(tape, &group_losses)?
    };

    let weighted_main = tape.scale(main_term, config.gamma_main);
    let weighted_aux = tape.scale(aux_term, config.gamma_aux);
    let weighted_group = tape.scale(group_term, config.gamma_group);
    let partial = tape.add(weighted_main, weighted_aux)?;
    let total = tape.add(partial, weighted_group)?;

    let breakdown = LossBreakdown {
        total: tape.value(total).item(),
        main: tape.value(main_term).item(),
        aux: tape.value(aux_term).item(),
        group: tape.value(group_term).item(),
        main_count: main_nodes.len(),
        aux_count: aux_nodes.len(),
        group_count: group_losses.len(),
    };
    Ok((total, breakdown))
}

/// Loss of one episode on plain parameters (fresh tape, no backward).
pub fn episode_loss_value(
    params: &ModelParams,
    encoded: &EncodedEpisode,
    dataset: &Dataset,
    episode: &Episode,
    config: &RunConfig,
    path_seed: u64,
) -> Result<LossBreakdown, PipelineError> {
    let mut tape = Tape::new();
    let bound = super::forward::bind_model(&mut tape, params, false);
    let (_, breakdown) =
        episode_loss_graph(&mut tape, &bound, encoded, dataset, episode, config, path_seed)?;
    Ok(breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::EpisodeMode;
    use crate::pipeline::forward::bind_model;
    use crate::pipeline::tests_support::{mini_config, mini_dataset};
    use crate::synth::sample_episode;

    fn mini_episode(dataset: &Dataset, config: &RunConfig, seed: u64) -> Episode {
        let mut rng = Rng::seed_from(seed);
        sample_episode(
            dataset,
            &dataset.split.train_images,
            &dataset.split.base_types,
            config.k_shots,
            EpisodeMode::Same,
            &mut rng,
        )
        .unwrap()
    }

    #[test]
    fn loss_is_finite_and_deterministic() {
        let config = mini_config();
        let dataset = mini_dataset(&config);
        let params = ModelParams::init(&config);
        let episode = mini_episode(&dataset, &config, 5);
        let encoded = encode_episode(&params, &dataset, &episode, config.patch_size).unwrap();
        let a = episode_loss_value(&params, &encoded, &dataset, &episode, &config, 17).unwrap();
        let b = episode_loss_value(&params, &encoded, &dataset, &episode, &config, 17).unwrap();
        assert!(a.total.is_finite());
        assert_eq!(a.total.to_bits(), b.total.to_bits());
        assert!(a.main_count > 0);
    }

    #[test]
    fn gamma_weights_combine_terms() {
        let config = mini_config();
        let dataset = mini_dataset(&config);
        let params = ModelParams::init(&config);
        let episode = mini_episode(&dataset, &config, 6);
        let encoded = encode_episode(&params, &dataset, &episode, config.patch_size).unwrap();
        let b = episode_loss_value(&params, &encoded, &dataset, &episode, &config, 3).unwrap();
        let expect =
            config.gamma_main * b.main + config.gamma_aux * b.aux + config.gamma_group * b.group;
        assert!((b.total - expect).abs() < 1e-12);
    }

    #[test]
    fn disabling_aux_zeroes_aux_and_group_terms() {
        let mut config = mini_config();
        config.aux_keypoints = false;
        let dataset = mini_dataset(&config);
        let params = ModelParams::init(&config);
        let episode = mini_episode(&dataset, &config, 7);
        let encoded = encode_episode(&params, &dataset, &episode, config.patch_size).unwrap();
        let b = episode_loss_value(&params, &encoded, &dataset, &episode, &config, 3).unwrap();
        assert_eq!(b.aux, 0.0);
        assert_eq!(b.group, 0.0);
        assert_eq!(b.aux_count, 0);
        assert_eq!(b.group_count, 0);
    }

    #[test]
    fn vanilla_single_scale_reduces_to_ce_plus_mse() {
        let mut config = mini_config();
        config.uncertainty = false;
        config.aux_keypoints = false;
        config.scales = vec![4];
        let dataset = mini_dataset(&config);
        let params = ModelParams::init(&config);
        let episode = mini_episode(&dataset, &config, 9);
        let encoded = encode_episode(&params, &dataset, &episode, config.patch_size).unwrap();
        let b = episode_loss_value(&params, &encoded, &dataset, &episode, &config, 3).unwrap();

        // term-by-term oracle over the same forward outputs
        let mut tape = Tape::new();
        let bound = bind_model(&mut tape, &params, false);
        let mut expected = 0.0;
        let mut count = 0usize;
        for &type_id in &episode.active_types {
            let Some(target) =
                build_target(&dataset, &episode, &encoded, &config, type_id).unwrap()
            else {
                continue;
            };
            let attentive = modulate(&encoded.query, &target.prototype).unwrap();
            let psi = descriptor_node(&mut tape, &bound, &attentive, config.descriptor_pool)
                .unwrap();
            let head = head_forward(&mut tape, &bound.heads[0], psi, config.latent_dim).unwrap();
            let code = encode_grid(target.query_gt, 4, config.image_size as f64).unwrap();
            let prob = tape.value(head.prob).clone();
            let ce = crate::uncertainty::vanilla_cls_loss(&prob, code.flat).unwrap().value;
            let off = tape.value(head.offsets).clone();
            let pred = [
                off.at3(code.cell[1], code.cell[0], 0),
                off.at3(code.cell[1], code.cell[0], 1),
            ];
            let mse = crate::uncertainty::vanilla_offset_loss(&pred, &code.offset);
            expected += config.alpha_uc * mse + config.alpha_cls * ce;
            count += 1;
        }
        expected /= count as f64;
        assert!((b.main - expected).abs() < 1e-10, "{} vs {expected}", b.main);
    }

    #[test]
    fn group_windows_form_along_paths() {
        let config = mini_config();
        let dataset = mini_dataset(&config);
        let params = ModelParams::init(&config);
        // search a few seeds for an episode with at least one full path
        for seed in 0..20 {
            let episode = mini_episode(&dataset, &config, seed);
            let encoded = encode_episode(&params, &dataset, &episode, config.patch_size).unwrap();
            if let Ok(b) =
                episode_loss_value(&params, &encoded, &dataset, &episode, &config, 3)
            {
                if b.group_count > 0 {
                    assert!(b.group.is_finite());
                    return;
                }
            }
        }
        panic!("no episode produced group terms");
    }
}
