//! Species templates: an articulated quadruped skeleton with per-species
//! proportions and palette.
//!
//! The keypoint type set is shared across all species (the base/novel type
//! split is global); species differ in geometry and coloring. Knees sit on
//! real leg joints, so limb midpoints are meaningful interpolation targets.

use crate::rng::Rng;

/// Global keypoint type names; the index in this list is the type id.
pub const TYPE_NAMES: [&str; 12] = [
    "head", "neck", "hip", "tail_tip", "knee_fl", "knee_fr", "knee_bl", "knee_br", "foot_fl",
    "foot_fr", "foot_bl", "foot_br",
];

pub fn type_id(name: &str) -> Option<usize> {
    TYPE_NAMES.iter().position(|&n| n == name)
}

/// Left/right pairs swapped by horizontal flips.
pub const FLIP_PAIRS: [(&str, &str); 4] = [
    ("knee_fl", "knee_fr"),
    ("knee_bl", "knee_br"),
    ("foot_fl", "foot_fr"),
    ("foot_bl", "foot_br"),
];

/// Designated limb interpolation paths (type name pairs): the four legs,
/// the spine, and the tail.
pub const LIMB_PATHS: [(&str, &str); 6] = [
    ("neck", "foot_fl"),
    ("neck", "foot_fr"),
    ("hip", "foot_bl"),
    ("hip", "foot_br"),
    ("head", "hip"),
    ("hip", "tail_tip"),
];

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: &'static str,
    pub parent: Option<usize>,
    /// Rest offset from the parent, template units (x right, y down).
    pub offset: [f64; 2],
    /// Articulation range (radians) around the rest direction.
    pub swing: f64,
}

#[derive(Debug, Clone)]
pub struct Part {
    /// Joint indices of the capsule ends (equal indices draw a disc).
    pub ends: (usize, usize),
    pub radius: f64,
    pub color: [u8; 3],
    /// Keypoint type ids whose visibility this part vouches for.
    pub owns: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SpeciesTemplate {
    pub species: usize,
    pub joints: Vec<Joint>,
    /// joint index per keypoint type id.
    pub keypoint_joints: Vec<usize>,
    /// Draw order, back to front.
    pub parts: Vec<Part>,
    pub background: [u8; 3],
}

fn hsv(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

/// Deterministic species template. Proportions, articulation ranges and
/// palette all derive from the seed.
pub fn make_template(seed: u64) -> SpeciesTemplate {
    let mut rng = Rng::derive(seed, &[0x74656d70]);
    let torso = rng.uniform(24.0, 32.0);
    let rise = rng.uniform(2.0, 7.0);
    let head_out = rng.uniform(7.0, 11.0);
    let head_up = rng.uniform(10.0, 16.0);
    let tail = rng.uniform(16.0, 26.0);
    let upper = rng.uniform(11.0, 16.0);
    let lower = rng.uniform(10.0, 15.0);
    let bend = rng.uniform(1.5, 4.0); // forward knee bend off the straight limb line

    // joint layout: hip is the root at the origin
    let mut joints = vec![
        Joint { name: "hip", parent: None, offset: [0.0, 0.0], swing: 0.0 },
        Joint { name: "neck", parent: Some(0), offset: [torso, -rise], swing: 0.12 },
        Joint { name: "head", parent: Some(1), offset: [head_out, -head_up], swing: 0.25 },
        Joint { name: "tail_tip", parent: Some(0), offset: [-tail, -rng.uniform(2.0, 8.0)], swing: 0.5 },
    ];
    // legs: (attach joint, lateral shift) front at neck, back at hip
    let mut leg_joints = Vec::new();
    for (attach, shift) in [(1usize, 1.2), (1, -2.8), (0, 1.2), (0, -2.8)] {
        let knee = joints.len();
        joints.push(Joint {
            name: "knee",
            parent: Some(attach),
            offset: [shift + bend, upper],
            swing: 0.45,
        });
        joints.push(Joint {
            name: "foot",
            parent: Some(knee),
            offset: [-bend, lower],
            swing: 0.5,
        });
        leg_joints.push((knee, knee + 1));
    }

    // keypoint type id -> joint index, in TYPE_NAMES order
    let keypoint_joints = vec![
        2, // head
        1, // neck
        0, // hip
        3, // tail_tip
        leg_joints[0].0,
        leg_joints[1].0,
        leg_joints[2].0,
        leg_joints[3].0,
        leg_joints[0].1,
        leg_joints[1].1,
        leg_joints[2].1,
        leg_joints[3].1,
    ];

    let hue = rng.uniform(0.0, 360.0);
    let body = hsv(hue, rng.uniform(0.45, 0.7), rng.uniform(0.55, 0.8));
    let limb_near = hsv(hue + rng.uniform(15.0, 40.0), 0.6, 0.65);
    let limb_far = hsv(hue + rng.uniform(15.0, 40.0), 0.55, 0.4);
    let head_color = hsv(hue - rng.uniform(10.0, 30.0), 0.5, 0.85);
    let torso_radius = rng.uniform(7.5, 10.0);
    let leg_radius = rng.uniform(2.4, 3.2);

    let t = |n: &str| type_id(n).unwrap();
    let leg_part = |idx: usize, knee_t: &str, foot_t: &str, color: [u8; 3]| -> Vec<Part> {
        let (knee, foot) = leg_joints[idx];
        let attach = joints[knee].parent.unwrap();
        vec![
            Part {
                ends: (attach, knee),
                radius: leg_radius,
                color,
                owns: vec![t(knee_t)],
            },
            Part {
                ends: (knee, foot),
                radius: leg_radius * 0.85,
                color,
                owns: vec![t(knee_t), t(foot_t)],
            },
            Part {
                ends: (foot, foot),
                radius: leg_radius + 0.8,
                color,
                owns: vec![t(foot_t)],
            },
        ]
    };

    // painter order: far legs, tail, torso, near legs, neck, head
    let mut parts = Vec::new();
    parts.extend(leg_part(1, "knee_fr", "foot_fr", limb_far));
    parts.extend(leg_part(3, "knee_br", "foot_br", limb_far));
    parts.push(Part {
        ends: (0, 3),
        radius: rng.uniform(2.0, 3.0),
        color: limb_near,
        owns: vec![t("tail_tip"), t("hip")],
    });
    parts.push(Part {
        ends: (0, 1),
        radius: torso_radius,
        color: body,
        owns: vec![t("hip"), t("neck")],
    });
    parts.extend(leg_part(0, "knee_fl", "foot_fl", limb_near));
    parts.extend(leg_part(2, "knee_bl", "foot_bl", limb_near));
    parts.push(Part {
        ends: (1, 2),
        radius: rng.uniform(3.0, 4.5),
        color: body,
        owns: vec![t("neck"), t("head")],
    });
    parts.push(Part {
        ends: (2, 2),
        radius: rng.uniform(5.5, 7.5),
        color: head_color,
        owns: vec![t("head")],
    });

    SpeciesTemplate {
        species: seed as usize,
        joints,
        keypoint_joints,
        parts,
        background: hsv(rng.uniform(0.0, 360.0), 0.08, rng.uniform(0.85, 0.95)),
    }
}
