//! SVG figure builder for detection overlays and warp comparisons.
//!
//! Keypoint overlays follow one legend throughout: support/GT keypoints as
//! circles, predictions as tilted crosses, localization uncertainty as
//! 3-sigma ellipses, and a line segment from prediction to GT.

use super::image::ImageRgb;
use super::png::png_data_uri;
use std::fmt::Write as _;

pub struct Svg {
    width: f64,
    height: f64,
    body: String,
}

/// Fixed-precision float formatting keeps documents byte-stable.
fn fmt(v: f64) -> String {
    format!("{v:.3}")
}

impl Svg {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn raster(&mut self, img: &ImageRgb, x: f64, y: f64, scale: f64) -> &mut Self {
        let w = img.width as f64 * scale;
        let h = img.height as f64 * scale;
        let _ = write!(
            self.body,
            "<image x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" href=\"{}\" style=\"image-rendering:pixelated\"/>",
            fmt(x),
            fmt(y),
            fmt(w),
            fmt(h),
            png_data_uri(img)
        );
        self
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, stroke: &str, fill: &str) -> &mut Self {
        let _ = write!(
            self.body,
            "<circle cx=\"{}\" cy=\"{}\" r=\"{}\" stroke=\"{stroke}\" fill=\"{fill}\" stroke-width=\"1\"/>",
            fmt(cx),
            fmt(cy),
            fmt(r)
        );
        self
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str) -> &mut Self {
        let _ = write!(
            self.body,
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{stroke}\" stroke-width=\"1\"/>",
            fmt(x1),
            fmt(y1),
            fmt(x2),
            fmt(y2)
        );
        self
    }

    /// Tilted (45 degree) cross marking a prediction.
    pub fn tilted_cross(&mut self, cx: f64, cy: f64, arm: f64, stroke: &str) -> &mut Self {
        self.line(cx - arm, cy - arm, cx + arm, cy + arm, stroke);
        self.line(cx - arm, cy + arm, cx + arm, cy - arm, stroke)
    }

    /// Ellipse with semi-axes `(a, b)` rotated by `angle` radians.
    pub fn ellipse(&mut self, cx: f64, cy: f64, a: f64, b: f64, angle: f64, stroke: &str) -> &mut Self {
        let deg = angle.to_degrees();
        let _ = write!(
            self.body,
            "<ellipse cx=\"0\" cy=\"0\" rx=\"{}\" ry=\"{}\" transform=\"translate({} {}) rotate({})\" stroke=\"{stroke}\" fill=\"none\" stroke-width=\"1\"/>",
            fmt(a.max(0.1)),
            fmt(b.max(0.1)),
            fmt(cx),
            fmt(cy),
            fmt(deg)
        );
        self
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, content: &str) -> &mut Self {
        let escaped = content
            .replace('&', "&amp;")
            .replace('<', "&lt;")
            .replace('>', "&gt;");
        let _ = write!(
            self.body,
            "<text x=\"{}\" y=\"{}\" font-size=\"{}\" font-family=\"monospace\">{escaped}</text>",
            fmt(x),
            fmt(y),
            fmt(size)
        );
        self
    }

    pub fn finish(&self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">{}</svg>\n",
            fmt(self.width),
            fmt(self.height),
            fmt(self.width),
            fmt(self.height),
            self.body
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn document_structure() {
        let mut svg = Svg::new(100.0, 50.0);
        svg.circle(10.0, 10.0, 2.0, "blue", "none")
            .tilted_cross(20.0, 20.0, 3.0, "red")
            .ellipse(30.0, 30.0, 6.0, 3.0, std::f64::consts::FRAC_PI_4, "red")
            .text(5.0, 45.0, 8.0, "a < b");
        let doc = svg.finish();
        assert!(doc.starts_with("<svg"));
        assert!(doc.ends_with("</svg>\n"));
        assert!(doc.contains("<ellipse"));
        assert!(doc.contains("a &lt; b"));
        assert!(doc.contains("rotate(45.000)"));
    }

    #[test]
    fn deterministic_output() {
        let build = || {
            let mut svg = Svg::new(10.0, 10.0);
            svg.raster(&ImageRgb::filled(2, 2, [9, 9, 9]), 0.0, 0.0, 1.0);
            svg.finish()
        };
        assert_eq!(build(), build());
    }
}
