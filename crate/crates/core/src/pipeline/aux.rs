//! Auxiliary keypoints: linear interpolation along limb paths, foreground
//! pruning, path selection modes, and sliding-window grouping.

use crate::config::PathMode;
use crate::grid::Vec2;
use crate::io::image::ImageGray;
use crate::rng::Rng;
use crate::synth::Keypoint;

/// One generated auxiliary keypoint with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxPoint {
    /// Endpoint type ids of the path.
    pub path: (usize, usize),
    /// Index into the interpolation node list.
    pub node: usize,
    pub pos: Vec2,
}

/// Interpolate auxiliary keypoints on one annotated image.
///
/// Paths whose endpoints are not both visible produce nothing; points
/// landing on background are dropped. Fewer than two visible keypoints
/// always yields an empty result.
pub fn generate_aux_keypoints(
    keypoints: &[Keypoint],
    paths: &[(usize, usize)],
    nodes: &[f64],
    mask: &ImageGray,
) -> Vec<AuxPoint> {
    if keypoints.iter().filter(|k| k.visible).count() < 2 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for &(a, b) in paths {
        let (ka, kb) = (&keypoints[a], &keypoints[b]);
        if !ka.visible || !kb.visible {
            continue;
        }
        for (node, &t) in nodes.iter().enumerate() {
            let pos = [
                ka.pos[0] + t * (kb.pos[0] - ka.pos[0]),
                ka.pos[1] + t * (kb.pos[1] - ka.pos[1]),
            ];
            let on_foreground = mask.at_point(pos[0], pos[1]).map(|v| v > 0).unwrap_or(false);
            if on_foreground {
                out.push(AuxPoint {
                    path: (a, b),
                    node,
                    pos,
                });
            }
        }
    }
    out
}

/// Pick the episode's interpolation paths from `candidates` (type ids with
/// a usable query annotation).
pub fn select_paths(
    designated: &[(usize, usize)],
    candidates: &[usize],
    mode: PathMode,
    rand_count: usize,
    rng: &mut Rng,
) -> Vec<(usize, usize)> {
    match mode {
        PathMode::Default => designated.to_vec(),
        PathMode::Exhaust => {
            let mut all = Vec::new();
            for i in 0..candidates.len() {
                for j in i + 1..candidates.len() {
                    all.push((candidates[i], candidates[j]));
                }
            }
            all
        }
        PathMode::Rand => {
            let mut all = Vec::new();
            for i in 0..candidates.len() {
                for j in i + 1..candidates.len() {
                    all.push((candidates[i], candidates[j]));
                }
            }
            rng.shuffle(&mut all);
            all.truncate(rand_count);
            all.sort_unstable();
            all
        }
    }
}

/// Sliding windows of width `m`, stride 1, over an ordered path sequence.
/// `m = 1` yields no groups (singles carry no group term).
pub fn make_groups<T: Clone>(sequence: &[T], m: usize) -> Vec<Vec<T>> {
    if m <= 1 || sequence.len() < m {
        return Vec::new();
    }
    sequence.windows(m).map(|w| w.to_vec()).collect()
}
