//! Binary PPM overlays of decoded detections.

use mk_core::geometry::TensorField;
use mk_core::tasks::{Detected, Ellipse};

/// Output pixels per image pixel along each axis.
const SCALE: usize = 4;
const CLASS_COLORS: [[f64; 3]; 3] = [[0.95, 0.35, 0.2], [0.25, 0.85, 0.3], [0.3, 0.45, 1.0]];

/// The image in gray with each detection filled in its class colour at
/// opacity `0.2 × confidence`, and ground-truth outlines in white. Axis 0 of
/// the image runs down the rows.
pub fn render(image: &TensorField<f64>, dets: &[Detected], truths: &[Ellipse]) -> Vec<u8> {
    let dims = image.shape().dims();
    let (rows, cols) = (dims[0], dims[1]);
    let (lo, hi) = image
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (h, w) = (rows * SCALE, cols * SCALE);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            let g = (image.data()[(r / SCALE) * cols + c / SCALE] - lo) / span;
            let mut px = [g; 3];
            let x = [
                (r as f64 + 0.5) / SCALE as f64 - 0.5,
                (c as f64 + 0.5) / SCALE as f64 - 0.5,
            ];
            for d in dets {
                if d.ellipse.form(&x) <= 1.0 {
                    let alpha = (0.2 * d.confidence).clamp(0.0, 1.0);
                    let color = CLASS_COLORS[d.ellipse.class.index()];
                    for (p, k) in px.iter_mut().zip(color) {
                        *p = (1.0 - alpha) * *p + alpha * k;
                    }
                }
            }
            for t in truths {
                let rho = t.form(&x).sqrt();
                let extent = t
                    .half_extents()
                    .map_or(1.0, |e| e.iter().copied().fold(f64::INFINITY, f64::min));
                // about one output pixel wide
                if rho <= 1.0 && rho >= 1.0 - 1.0 / (SCALE as f64 * extent) {
                    px = [1.0; 3];
                }
            }
            out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        }
    }
    out
}
