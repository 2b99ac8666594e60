//! Three shape classes whose labels do not depend on orientation.

use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::sample_rng;
use crate::error::{Error, Result};
use crate::geometry::{GridShape, TensorField};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: TensorField<f64>,
    pub label: usize,
}

pub const CLASS_NAMES: [&str; 3] = ["ring", "blob", "lobes"];
pub const CLASSIFY_NOISE: f64 = 0.5;

/// Rendering parameters of one shape, in pixels and radians.
#[derive(Clone, Copy, Debug)]
struct Shape {
    label: usize,
    center: [f64; 2],
    radius: f64,
    amp: f64,
    phase: f64,
}

fn render(s: &Shape, x: [f64; 2]) -> f64 {
    let dx = [x[0] - s.center[0], x[1] - s.center[1]];
    let r = dx[0].hypot(dx[1]);
    match s.label {
        0 => {
            let w = 0.9;
            s.amp * (-(r - s.radius).powi(2) / (2.0 * w * w)).exp()
        }
        1 => s.amp / (1.0 + ((r - s.radius) / 0.6).exp()),
        _ => (0..3)
            .map(|k| {
                let t = s.phase + TAU * k as f64 / 3.0;
                let p = [s.radius * t.cos(), s.radius * t.sin()];
                let d2 = (dx[0] - p[0]).powi(2) + (dx[1] - p[1]).powi(2);
                s.amp * (-d2 / (2.0 * 1.1 * 1.1)).exp()
            })
            .sum(),
    }
}

/// `n` noisy `size × size` images, balanced over the three classes by
/// cycling labels. Positions, radii, amplitude and phase are random.
pub fn gen_classification(seed: u64, n: usize, size: usize, d: usize) -> Result<Vec<LabeledImage>> {
    if d != 2 {
        return Err(Error::DimensionMismatch(format!(
            "classification images are 2D, got {d}D"
        )));
    }
    if size < 16 {
        return Err(Error::Shape(format!(
            "classification images need size >= 16, got {size}"
        )));
    }
    let shape = GridShape::cube(2, size);
    let noise = Normal::new(0.0, CLASSIFY_NOISE).expect("valid sigma");
    let mid = (size as f64 - 1.0) / 2.0;
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let label = i % 3;
            let radius = match label {
                0 => rng.random_range(3.5..5.5),
                1 => rng.random_range(2.5..4.5),
                _ => rng.random_range(3.0..4.5),
            };
            let s = Shape {
                label,
                center: [mid + rng.random_range(-2.0..2.0), mid + rng.random_range(-2.0..2.0)],
                radius,
                amp: rng.random_range(0.6..1.2),
                phase: rng.random_range(0.0..TAU),
            };
            let image = TensorField::from_fn(shape.clone(), 0, |_, p| {
                render(&s, [p[0] as f64, p[1] as f64]) + noise.sample(&mut rng)
            });
            Ok(LabeledImage { image, label })
        })
        .collect()
}
