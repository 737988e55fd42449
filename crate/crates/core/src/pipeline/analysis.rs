//! Evaluation: episode PCK, per-type breakdowns, confidence intervals, and
//! the uncertainty-calibration binning (normalized strength and
//! distinctiveness against normalized distance error).

use super::detect::{detect, sd_values, KeypointEstimate};
use super::model::ModelState;
use super::PipelineError;
use crate::config::RunConfig;
use crate::grid::{pck, Vec2};
use crate::rng::Rng;
use crate::synth::{sample_episode, AnnotatedImage, Dataset, Episode};
use crate::tensor::Tensor;
use crate::uncertainty::{keypoint_weight, uncertainty_ellipse};
use serde::Serialize;

/// PCK of one episode's active types on the query (None when no active
/// type is visible in the query).
pub fn episode_pck(
    state: &ModelState,
    dataset: &Dataset,
    episode: &Episode,
    tau: f64,
) -> Result<Option<f64>, PipelineError> {
    let supports: Vec<&AnnotatedImage> =
        episode.supports.iter().map(|&i| &dataset.images[i]).collect();
    let query = &dataset.images[episode.query];
    if episode.active_types.is_empty() {
        return Ok(None);
    }
    let results = detect(state, &supports, &query.pixels, &episode.active_types)?;
    let mut predictions = Vec::new();
    let mut gts = Vec::new();
    let mut visibility = Vec::new();
    for (type_id, estimate) in &results {
        let Some(estimate) = estimate else { continue };
        let kp = query.keypoint(*type_id);
        predictions.push(estimate.position);
        gts.push(kp.pos);
        visibility.push(kp.visible);
    }
    Ok(pck(
        &predictions,
        &gts,
        &visibility,
        (query.bbox.w, query.bbox.h),
        tau,
    )?)
}

#[derive(Debug, Clone, Serialize)]
pub struct TypeScore {
    pub name: String,
    pub correct: usize,
    pub visible: usize,
    pub pck: f64,
}

/// One calibration bin over normalized distance error.
#[derive(Debug, Clone, Serialize)]
pub struct BinRow {
    pub d_lo: f64,
    pub mean_d: f64,
    pub mean_value: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub episodes_requested: usize,
    pub episodes_scored: usize,
    pub pck_mean: f64,
    pub ci95_half_width: f64,
    pub per_type: Vec<TypeScore>,
    /// Bin-averaged normalized uncertainty strength J' against d'.
    pub calibration_strength: Vec<BinRow>,
    /// Bin-averaged distinctiveness w against d'.
    pub calibration_distinctiveness: Vec<BinRow>,
    pub spearman_strength: Option<f64>,
    pub spearman_distinctiveness: Option<f64>,
}

/// Detection artifacts of one evaluated episode, for overlay rendering.
pub struct EvalOverlay {
    pub episode: Episode,
    pub estimates: Vec<(usize, KeypointEstimate)>,
}

fn bilinear_map_sample(map: &Tensor, u: Vec2, downsize: f64) -> f64 {
    let side = map.shape()[0];
    let last = (side - 1) as f64;
    let x = (u[0] * downsize).clamp(0.0, last);
    let y = (u[1] * downsize).clamp(0.0, last);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(side - 1), (y0 + 1).min(side - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let top = map.at2(y0, x0) * (1.0 - fx) + map.at2(y0, x1) * fx;
    let bot = map.at2(y1, x0) * (1.0 - fx) + map.at2(y1, x1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..vals.len()).collect();
        order.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < order.len() {
            let mut j = i;
            while j + 1 < order.len() && vals[order[j + 1]] == vals[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &idx in &order[i..=j] {
                ranks[idx] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mean) * (b - mean);
        var_x += (a - mean) * (a - mean);
        var_y += (b - mean) * (b - mean);
    }
    if var_x == 0.0 || var_y == 0.0 {
        return None;
    }
    Some(cov / (var_x * var_y).sqrt())
}

fn binned(pairs: &[(f64, f64)], width: f64) -> Vec<BinRow> {
    use std::collections::BTreeMap;
    let mut bins: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for &(d, v) in pairs {
        let idx = (d / width).floor() as usize;
        let entry = bins.entry(idx).or_insert((0.0, 0.0, 0));
        entry.0 += d;
        entry.1 += v;
        entry.2 += 1;
    }
    bins.into_iter()
        .map(|(idx, (d_sum, v_sum, count))| BinRow {
            d_lo: idx as f64 * width,
            mean_d: d_sum / count as f64,
            mean_value: v_sum / count as f64,
            count,
        })
        .collect()
}

struct EpisodeOutcome {
    score: Option<f64>,
    /// (type id, correct) per visible active keypoint.
    hits: Vec<(usize, bool)>,
    strength_pairs: Vec<(f64, f64)>,
    distinct_pairs: Vec<(f64, f64)>,
    overlay: Option<EvalOverlay>,
}

#[allow(clippy::too_many_arguments)]
fn evaluate_episode(
    state: &ModelState,
    dataset: &Dataset,
    pool: &[usize],
    requested: &[usize],
    config: &RunConfig,
    seed: u64,
    index: usize,
    keep_overlay: bool,
) -> Result<Option<EpisodeOutcome>, PipelineError> {
    let mut rng = Rng::derive(seed, &[0x6576616c, index as u64]);
    let episode = sample_episode(
        dataset,
        pool,
        requested,
        config.k_shots,
        config.episode_mode,
        &mut rng,
    )?;
    if episode.active_types.is_empty() {
        return Ok(None);
    }
    let supports: Vec<&AnnotatedImage> =
        episode.supports.iter().map(|&idx| &dataset.images[idx]).collect();
    let query = &dataset.images[episode.query];
    let results = detect(state, &supports, &query.pixels, &episode.active_types)?;

    // distinctiveness maps for the calibration analysis
    let support_sd: Vec<Option<Tensor>> = supports
        .iter()
        .map(|img| sd_values(state, &img.pixels))
        .collect::<Result<_, _>>()?;
    let query_sd = sd_values(state, &query.pixels)?;
    let downsize = state.config.downsize_factor();

    let norm = query.bbox.w.max(query.bbox.h);
    let mut predictions = Vec::new();
    let mut gts = Vec::new();
    let mut visibility = Vec::new();
    let mut estimates = Vec::new();
    let mut hits = Vec::new();
    let mut strength_pairs = Vec::new();
    let mut distinct_pairs = Vec::new();
    for (type_id, estimate) in results {
        let Some(estimate) = estimate else { continue };
        let kp = query.keypoint(type_id);
        predictions.push(estimate.position);
        gts.push(kp.pos);
        visibility.push(kp.visible);
        if kp.visible {
            let d = ((estimate.position[0] - kp.pos[0]).powi(2)
                + (estimate.position[1] - kp.pos[1]).powi(2))
            .sqrt();
            let d_norm = d / norm;
            let threshold = config.tau * norm;
            hits.push((type_id, d < threshold));
            if state.config.uncertainty {
                let ellipse = uncertainty_ellipse(estimate.covariance)?;
                strength_pairs.push((d_norm, ellipse.strength / norm));
                // distinctiveness at the support keypoint and query GT
                let mut support_samples = Vec::new();
                for (img, sd) in supports.iter().zip(&support_sd) {
                    let skp = img.keypoint(type_id);
                    if let (true, Some(map)) = (skp.visible, sd.as_ref()) {
                        support_samples.push(bilinear_map_sample(map, skp.pos, downsize));
                    }
                }
                if let (Some(query_map), false) = (query_sd.as_ref(), support_samples.is_empty()) {
                    let s_mean =
                        support_samples.iter().sum::<f64>() / support_samples.len() as f64;
                    let q = bilinear_map_sample(query_map, kp.pos, downsize);
                    let (w, _) = keypoint_weight(s_mean, q)?;
                    distinct_pairs.push((d_norm, w));
                }
            }
        }
        estimates.push((type_id, estimate));
    }
    let score = pck(
        &predictions,
        &gts,
        &visibility,
        (query.bbox.w, query.bbox.h),
        config.tau,
    )?;
    let overlay = keep_overlay.then_some(EvalOverlay { episode, estimates });
    Ok(Some(EpisodeOutcome {
        score,
        hits,
        strength_pairs,
        distinct_pairs,
        overlay,
    }))
}

/// Evaluate a trained model over sampled episodes from `pool`, requesting
/// `requested` types. Episodes are processed on worker threads (the model
/// is read-only); aggregation order is fixed by episode index, so the
/// report is deterministic. Returns the aggregate report and detection
/// overlays for the first `overlay_count` episodes.
pub fn evaluate(
    state: &ModelState,
    dataset: &Dataset,
    pool: &[usize],
    requested: &[usize],
    config: &RunConfig,
    seed: u64,
    overlay_count: usize,
) -> Result<(EvalReport, Vec<EvalOverlay>), PipelineError> {
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .clamp(1, 8);
    let n_episodes = config.eval_episodes;
    let outcomes: Vec<Result<Option<EpisodeOutcome>, PipelineError>> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    scope.spawn(move || {
                        let mut results = Vec::new();
                        let mut i = w;
                        while i < n_episodes {
                            let keep = i < overlay_count;
                            results.push((
                                i,
                                evaluate_episode(
                                    state, dataset, pool, requested, config, seed, i, keep,
                                ),
                            ));
                            i += workers;
                        }
                        results
                    })
                })
                .collect();
            let mut merged: Vec<Option<Result<Option<EpisodeOutcome>, PipelineError>>> =
                (0..n_episodes).map(|_| None).collect();
            for handle in handles {
                for (i, r) in handle.join().expect("eval worker panicked") {
                    merged[i] = Some(r);
                }
            }
            merged.into_iter().map(|r| r.expect("every episode evaluated")).collect()
        });

    let mut episode_scores = Vec::new();
    let mut per_type: Vec<(usize, usize, usize)> = requested.iter().map(|&t| (t, 0, 0)).collect();
    let mut strength_pairs: Vec<(f64, f64)> = Vec::new();
    let mut distinct_pairs: Vec<(f64, f64)> = Vec::new();
    let mut overlays = Vec::new();
    for outcome in outcomes {
        let Some(outcome) = outcome? else { continue };
        if let Some(score) = outcome.score {
            episode_scores.push(score);
        }
        for (type_id, correct) in outcome.hits {
            for entry in per_type.iter_mut().filter(|(t, _, _)| *t == type_id) {
                entry.2 += 1;
                if correct {
                    entry.1 += 1;
                }
            }
        }
        strength_pairs.extend(outcome.strength_pairs);
        distinct_pairs.extend(outcome.distinct_pairs);
        if let Some(overlay) = outcome.overlay {
            if overlays.len() < overlay_count {
                overlays.push(overlay);
            }
        }
    }

    let n = episode_scores.len();
    let pck_mean = if n == 0 {
        0.0
    } else {
        episode_scores.iter().sum::<f64>() / n as f64
    };
    let ci95_half_width = if n < 2 {
        0.0
    } else {
        let var = episode_scores
            .iter()
            .map(|s| (s - pck_mean) * (s - pck_mean))
            .sum::<f64>()
            / (n as f64 - 1.0);
        1.96 * (var / n as f64).sqrt()
    };

    let calibration_strength = binned(&strength_pairs, config.bin_width);
    let calibration_distinctiveness = binned(&distinct_pairs, config.bin_width);
    let spearman_of = |rows: &[BinRow]| {
        let d: Vec<f64> = rows.iter().map(|r| r.mean_d).collect();
        let v: Vec<f64> = rows.iter().map(|r| r.mean_value).collect();
        spearman(&d, &v)
    };
    let report = EvalReport {
        episodes_requested: config.eval_episodes,
        episodes_scored: n,
        pck_mean,
        ci95_half_width,
        per_type: per_type
            .into_iter()
            .map(|(t, correct, visible)| TypeScore {
                name: dataset.split.type_names[t].clone(),
                correct,
                visible,
                pck: if visible == 0 {
                    0.0
                } else {
                    correct as f64 / visible as f64
                },
            })
            .collect(),
        spearman_strength: spearman_of(&calibration_strength),
        spearman_distinctiveness: spearman_of(&calibration_distinctiveness),
        calibration_strength,
        calibration_distinctiveness,
    };
    Ok((report, overlays))
}
