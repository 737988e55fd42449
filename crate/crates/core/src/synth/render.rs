//! Pose sampling and rasterization of creature instances.

use super::template::{SpeciesTemplate, FLIP_PAIRS, TYPE_NAMES};
use super::{AnnotatedImage, DataError, Keypoint, Rect};
use crate::grid::Vec2;
use crate::io::image::{ImageGray, ImageRgb};
use crate::rng::Rng;

const MASK_FG: u8 = 255;

fn rotate(v: Vec2, angle: f64) -> Vec2 {
    let (s, c) = angle.sin_cos();
    [c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Forward kinematics: joint angles accumulate down the tree.
fn pose_joints(template: &SpeciesTemplate, angles: &[f64]) -> Vec<Vec2> {
    let n = template.joints.len();
    let mut pos = vec![[0.0f64; 2]; n];
    let mut cum = vec![0.0f64; n];
    for (i, joint) in template.joints.iter().enumerate() {
        match joint.parent {
            None => {
                pos[i] = [0.0, 0.0];
                cum[i] = angles[i];
            }
            Some(p) => {
                cum[i] = cum[p] + angles[i];
                let off = rotate(joint.offset, cum[i]);
                pos[i] = [pos[p][0] + off[0], pos[p][1] + off[1]];
            }
        }
    }
    pos
}

fn fill_capsule(parts: &mut ImageGray, a: Vec2, b: Vec2, radius: f64, id: u8) {
    let (w, h) = (parts.width as f64, parts.height as f64);
    let x0 = (a[0].min(b[0]) - radius).floor().max(0.0) as usize;
    let y0 = (a[1].min(b[1]) - radius).floor().max(0.0) as usize;
    let x1 = (a[0].max(b[0]) + radius).ceil().min(w - 1.0) as usize;
    let y1 = (a[1].max(b[1]) + radius).ceil().min(h - 1.0) as usize;
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let r2 = radius * radius;
    for y in y0..=y1 {
        for x in x0..=x1 {
            let p = [x as f64, y as f64];
            let t = if len2 > 0.0 {
                (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let cx = a[0] + t * ab[0];
            let cy = a[1] + t * ab[1];
            let d2 = (p[0] - cx) * (p[0] - cx) + (p[1] - cy) * (p[1] - cy);
            if d2 <= r2 {
                parts.put(x, y, id);
            }
        }
    }
}

fn collinear(points: &[Vec2]) -> bool {
    if points.len() < 3 {
        return true;
    }
    let a = points[0];
    let b = points[points.len() - 1];
    let ab = [b[0] - a[0], b[1] - a[1]];
    let norm = (ab[0] * ab[0] + ab[1] * ab[1]).sqrt().max(1e-12);
    points.iter().all(|p| {
        let cross = ab[0] * (p[1] - a[1]) - ab[1] * (p[0] - a[0]);
        (cross / norm).abs() < 1e-6
    })
}

/// Render one deterministic instance: pose the skeleton, draw parts back to
/// front, derive the mask, bounding box and per-joint visibility.
///
/// A keypoint is invisible when the topmost shape at its position belongs
/// to a part that does not own the joint (natural occlusion, e.g. far-side
/// knees behind the torso).
pub fn render_instance(
    template: &SpeciesTemplate,
    pose_seed: u64,
    l0: usize,
) -> Result<AnnotatedImage, DataError> {
    if l0 < 64 {
        return Err(DataError::ImageTooSmall(l0));
    }
    let mut rng = Rng::derive(pose_seed, &[0x706f7365, template.species as u64]);
    for _attempt in 0..8 {
        let angles: Vec<f64> = template
            .joints
            .iter()
            .map(|j| rng.uniform(-j.swing, j.swing))
            .collect();
        let joints = pose_joints(template, &angles);
        if collinear(&joints) {
            continue;
        }
        // global similarity: rotation, fit-to-image scale, jittered center
        let theta = rng.uniform(-0.3, 0.3);
        let flip = rng.chance(0.5);
        let rotated: Vec<Vec2> = joints.iter().map(|&p| rotate(p, theta)).collect();
        let pad = 9.0;
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for p in &rotated {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1.0);
        let fit = (l0 as f64 - 2.0 * pad) / span;
        let scale = fit * rng.uniform(0.88, 1.0);
        let jitter = [rng.uniform(-4.0, 4.0), rng.uniform(-4.0, 4.0)];
        let center = [
            0.5 * (lo[0] + hi[0]),
            0.5 * (lo[1] + hi[1]),
        ];
        let place = |p: Vec2| -> Vec2 {
            [
                (p[0] - center[0]) * scale + l0 as f64 / 2.0 + jitter[0],
                (p[1] - center[1]) * scale + l0 as f64 / 2.0 + jitter[1],
            ]
        };
        let world: Vec<Vec2> = rotated.iter().map(|&p| place(p)).collect();

        // paint part ids back to front; pixels remember the topmost part
        let mut part_ids = ImageGray::new(l0, l0);
        for (idx, part) in template.parts.iter().enumerate() {
            let a = world[part.ends.0];
            let b = world[part.ends.1];
            fill_capsule(&mut part_ids, a, b, part.radius * scale, idx as u8 + 1);
        }

        let mut pixels = ImageRgb::filled(l0, l0, template.background);
        let mut mask = ImageGray::new(l0, l0);
        for y in 0..l0 {
            for x in 0..l0 {
                let id = part_ids.get(x, y);
                if id > 0 {
                    pixels.put(x, y, template.parts[id as usize - 1].color);
                    mask.put(x, y, MASK_FG);
                }
            }
        }

        let keypoints: Vec<Keypoint> = template
            .keypoint_joints
            .iter()
            .enumerate()
            .map(|(type_id, &joint)| {
                let pos = world[joint];
                let inside = pos[0] >= 0.0
                    && pos[1] >= 0.0
                    && pos[0] < l0 as f64
                    && pos[1] < l0 as f64;
                let visible = inside
                    && part_ids
                        .at_point(pos[0], pos[1])
                        .map(|id| id > 0 && template.parts[id as usize - 1].owns.contains(&type_id))
                        .unwrap_or(false);
                Keypoint {
                    type_id,
                    pos,
                    visible,
                }
            })
            .collect();

        let bbox = mask_bbox(&mask).unwrap_or(Rect {
            x: 0.0,
            y: 0.0,
            w: l0 as f64,
            h: l0 as f64,
        });

        let instance = AnnotatedImage {
            pixels,
            mask,
            keypoints,
            bbox,
            species: template.species,
        };
        return Ok(if flip { flip_annotated(&instance) } else { instance });
    }
    Err(DataError::DegeneratePose { seed: pose_seed })
}

/// Horizontal-flip augmentation: mirrors the rasters, maps keypoint
/// `x -> l0 - x`, and swaps the left/right-paired types.
pub fn flip_annotated(img: &AnnotatedImage) -> AnnotatedImage {
    let l0 = img.pixels.width as f64;
    let pixels = img.pixels.flipped_horizontal();
    let mask = img.mask.flipped_horizontal();
    let mut keypoints = img.keypoints.clone();
    for kp in &mut keypoints {
        kp.pos[0] = l0 - kp.pos[0];
        // mirrored continuous coordinates can land exactly on the edge
        if kp.pos[0] >= l0 {
            kp.visible = false;
        }
    }
    for (a, b) in FLIP_PAIRS {
        let ia = TYPE_NAMES.iter().position(|&n| n == a).unwrap();
        let ib = TYPE_NAMES.iter().position(|&n| n == b).unwrap();
        keypoints.swap(ia, ib);
        keypoints[ia].type_id = ia;
        keypoints[ib].type_id = ib;
    }
    let bbox = mask_bbox(&mask).unwrap_or(img.bbox);
    AnnotatedImage {
        pixels,
        mask,
        keypoints,
        bbox,
        species: img.species,
    }
}

fn mask_bbox(mask: &ImageGray) -> Option<Rect> {
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) > 0 {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x);
                y1 = y1.max(y);
            }
        }
    }
    if x0 == usize::MAX {
        return None;
    }
    Some(Rect {
        x: x0 as f64,
        y: y0 as f64,
        w: (x1 - x0 + 1) as f64,
        h: (y1 - y0 + 1) as f64,
    })
}
