//! SVG figure builders: detection overlays (support keypoints as circles,
//! predictions as tilted crosses centered in 3-sigma ellipses, segments
//! linking prediction to ground truth) and warp comparisons.

use fskd_core::pipeline::analysis::EvalOverlay;
use fskd_core::io::svg::Svg;
use fskd_core::synth::Dataset;
use fskd_core::tps::Correspondences;
use fskd_core::uncertainty::uncertainty_ellipse;

const SUPPORT_COLOR: &str = "#2b6cb0";
const PREDICTION_COLOR: &str = "#c53030";
const GT_COLOR: &str = "#2f855a";
const LINK_COLOR: &str = "#805ad5";

/// Side-by-side support/query panel with the detection legend.
pub fn detection_overlay(dataset: &Dataset, overlay: &EvalOverlay, scale: f64) -> String {
    let episode = &overlay.episode;
    let support = &dataset.images[episode.supports[0]];
    let query = &dataset.images[episode.query];
    let l0 = support.pixels.width as f64 * scale;
    let gap = 12.0;
    let mut svg = Svg::new(2.0 * l0 + gap, l0 + 24.0);
    svg.raster(&support.pixels, 0.0, 0.0, scale);
    svg.raster(&query.pixels, l0 + gap, 0.0, scale);
    svg.text(2.0, l0 + 14.0, 9.0, "support (circles)");
    svg.text(
        l0 + gap + 2.0,
        l0 + 14.0,
        9.0,
        "query: cross = prediction, ellipse = 3-sigma, circle = GT",
    );
    for &t in &episode.active_types {
        let kp = support.keypoint(t);
        if kp.visible {
            svg.circle(kp.pos[0] * scale, kp.pos[1] * scale, 2.5, SUPPORT_COLOR, "none");
        }
    }
    let ox = l0 + gap;
    for (type_id, estimate) in &overlay.estimates {
        let gt = query.keypoint(*type_id);
        let px = ox + estimate.position[0] * scale;
        let py = estimate.position[1] * scale;
        if gt.visible {
            let gx = ox + gt.pos[0] * scale;
            let gy = gt.pos[1] * scale;
            svg.circle(gx, gy, 2.0, GT_COLOR, "none");
            svg.line(px, py, gx, gy, LINK_COLOR);
        }
        svg.tilted_cross(px, py, 3.0, PREDICTION_COLOR);
        if let Ok(ellipse) = uncertainty_ellipse(estimate.covariance) {
            svg.ellipse(
                px,
                py,
                ellipse.semi_axes[0] * scale,
                ellipse.semi_axes[1] * scale,
                ellipse.angle,
                PREDICTION_COLOR,
            );
        }
    }
    svg.finish()
}

/// Correspondence figure for the warp command: source keypoints, predicted
/// targets with uncertainty radii, and displacement segments.
pub fn warp_overview(query: &fskd_core::io::image::ImageRgb, corr: &Correspondences, scale: f64) -> String {
    let w = query.width as f64 * scale;
    let h = query.height as f64 * scale;
    let mut svg = Svg::new(w, h + 20.0);
    svg.raster(query, 0.0, 0.0, scale);
    for ((p, q), j) in corr.source.iter().zip(&corr.target).zip(&corr.strengths) {
        svg.circle(p[0] * scale, p[1] * scale, 2.0, SUPPORT_COLOR, "none");
        svg.tilted_cross(q[0] * scale, q[1] * scale, 3.0, PREDICTION_COLOR);
        svg.line(
            p[0] * scale,
            p[1] * scale,
            q[0] * scale,
            q[1] * scale,
            LINK_COLOR,
        );
        svg.circle(
            q[0] * scale,
            q[1] * scale,
            (j * scale).max(0.5),
            PREDICTION_COLOR,
            "none",
        );
    }
    svg.text(
        2.0,
        h + 13.0,
        9.0,
        "circle = support keypoint, cross = predicted target, radius = uncertainty strength",
    );
    svg.finish()
}
