//! Elliptical cell images with ground-truth quadratic forms.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::sample_rng;
use crate::error::{Error, Result};
use crate::geometry::{GridShape, GroupElement, TensorField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellClass {
    Smooth,
    Sharp,
    Inhomogeneous,
}

impl CellClass {
    pub const ALL: [CellClass; 3] = [CellClass::Smooth, CellClass::Sharp, CellClass::Inhomogeneous];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or(Error::LabelOutOfRange { label: i, classes: 3 })
    }
}

/// The region `(x − c)ᵀ Q (x − c) ≤ 1`, in pixel coordinates ordered by
/// array axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Ellipse {
    pub center: Vec<f64>,
    /// row-major `d × d`
    pub q: Vec<f64>,
    pub class: CellClass,
}

fn cholesky_ok(q: &[f64], d: usize) -> bool {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            if i == j {
                let v = q[i * d + i] - s;
                if !(v > 0.0) {
                    return false;
                }
                l[i * d + i] = v.sqrt();
            } else {
                l[i * d + j] = (q[i * d + j] - s) / l[j * d + j];
            }
        }
    }
    true
}

impl Ellipse {
    pub fn new(center: Vec<f64>, q: Vec<f64>, class: CellClass) -> Result<Self> {
        let d = center.len();
        if q.len() != d * d {
            return Err(Error::Shape(format!("{d}D ellipse needs {} form entries", d * d)));
        }
        for i in 0..d {
            for j in 0..i {
                if (q[i * d + j] - q[j * d + i]).abs() > 1e-12 {
                    return Err(Error::Shape("quadratic form is not symmetric".into()));
                }
            }
        }
        if !cholesky_ok(&q, d) {
            return Err(Error::Shape("quadratic form is not positive definite".into()));
        }
        Ok(Self { center, q, class })
    }

    pub fn circle(center: Vec<f64>, radius: f64, class: CellClass) -> Self {
        let d = center.len();
        let mut q = vec![0.0; d * d];
        for i in 0..d {
            q[i * d + i] = 1.0 / (radius * radius);
        }
        Self { center, q, class }
    }

    /// 2D ellipse from semi-axes and the angle of the first axis.
    pub fn from_axes(center: [f64; 2], a: f64, b: f64, angle: f64, class: CellClass) -> Self {
        let (s, c) = angle.sin_cos();
        let (ia, ib) = (1.0 / (a * a), 1.0 / (b * b));
        let q = vec![
            c * c * ia + s * s * ib,
            c * s * (ia - ib),
            c * s * (ia - ib),
            s * s * ia + c * c * ib,
        ];
        Self {
            center: center.to_vec(),
            q,
            class,
        }
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `(x − c)ᵀ Q (x − c)`
    pub fn form(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut acc = 0.0;
        for i in 0..d {
            let di = x[i] - self.center[i];
            for j in 0..d {
                acc += di * self.q[i * d + j] * (x[j] - self.center[j]);
            }
        }
        acc
    }

    /// Half extent of the bounding box along each axis, `√(Q⁻¹)_ii`.
    pub fn half_extents(&self) -> Option<Vec<f64>> {
        let inv = invert(&self.q, self.dim())?;
        let d = self.dim();
        (0..d)
            .map(|i| {
                let v = inv[i * d + i];
                (v > 0.0 && v.is_finite()).then(|| v.sqrt())
            })
            .collect()
    }

    /// Image of the ellipse under `R` acting about the center of a grid with
    /// the given extents: `c ↦ R(c − m) + m`, `Q ↦ R Q Rᵀ`.
    pub fn transform(&self, r: &GroupElement, dims: &[usize]) -> Self {
        let d = self.dim();
        let m: Vec<f64> = dims.iter().map(|&n| (n as f64 - 1.0) / 2.0).collect();
        let rel: Vec<f64> = (0..d).map(|i| self.center[i] - m[i]).collect();
        let moved = r.apply(&rel);
        let center = (0..d).map(|i| moved[i] + m[i]).collect();
        Self {
            center,
            q: conjugate(r, &self.q, d),
            class: self.class,
        }
    }
}

/// `R M Rᵀ` for a row-major `d × d` matrix.
pub fn conjugate(r: &GroupElement, m: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                for l in 0..d {
                    acc += r.entry(i, k) * m[k * d + l] * r.entry(j, l);
                }
            }
            out[i * d + j] = acc;
        }
    }
    out
}

fn invert(m: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        inv[i * d + i] = 1.0;
    }
    for c in 0..d {
        let p = (c..d).max_by(|&x, &y| a[x * d + c].abs().total_cmp(&a[y * d + c].abs()))?;
        if a[p * d + c].abs() < 1e-300 {
            return None;
        }
        for k in 0..d {
            a.swap(c * d + k, p * d + k);
            inv.swap(c * d + k, p * d + k);
        }
        let piv = a[c * d + c];
        for k in 0..d {
            a[c * d + k] /= piv;
            inv[c * d + k] /= piv;
        }
        for r in 0..d {
            if r != c {
                let f = a[r * d + c];
                for k in 0..d {
                    a[r * d + k] -= f * a[c * d + k];
                    inv[r * d + k] -= f * inv[c * d + k];
                }
            }
        }
    }
    Some(inv)
}

/// Eigen-decomposition of the symmetric 2×2 matrix `[[a, b], [b, c]]`:
/// eigenvalues ascending and the unit eigenvector of the first.
pub fn sym2_eigen(a: f64, b: f64, c: f64) -> ([f64; 2], [f64; 2]) {
    let mean = (a + c) / 2.0;
    let diff = (a - c) / 2.0;
    let rad = diff.hypot(b);
    let (l0, l1) = (mean - rad, mean + rad);
    // eigenvector of l0 via the larger of the two available forms
    let v = if diff <= 0.0 {
        [rad - diff, -b]
    } else {
        [-b, rad + diff]
    };
    let n = v[0].hypot(v[1]);
    let v = if n > 0.0 { [v[0] / n, v[1] / n] } else { [1.0, 0.0] };
    ([l0, l1], v)
}

/// Symmetrizes and floors the eigenvalues of a 2×2 form at `floor`.
pub fn make_positive_definite(m: &[f64], floor: f64) -> Vec<f64> {
    let b = (m[1] + m[2]) / 2.0;
    let ([l0, l1], v) = sym2_eigen(m[0], b, m[3]);
    let (l0, l1) = (l0.max(floor), l1.max(floor));
    let w = [-v[1], v[0]];
    let e = |i: usize, j: usize| l0 * [v[0], v[1]][i] * [v[0], v[1]][j] + l1 * w[i] * w[j];
    vec![e(0, 0), e(0, 1), e(0, 1), e(1, 1)]
}

/// Intersection over union of two rasterized ellipses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// set when either form is not usable; `value` is then 0
    pub degenerate: bool,
}

/// Rasterizes both ellipses on `resolution` samples per axis over their joint
/// bounding box.
pub fn iou_ellipse(a: &Ellipse, b: &Ellipse, resolution: usize) -> Iou {
    let degenerate = Iou {
        value: 0.0,
        degenerate: true,
    };
    let d = a.dim();
    if b.dim() != d || resolution == 0 {
        return degenerate;
    }
    let (Some(ea), Some(eb)) = (a.half_extents(), b.half_extents()) else {
        return degenerate;
    };
    let lo: Vec<f64> = (0..d).map(|i| (a.center[i] - ea[i]).min(b.center[i] - eb[i])).collect();
    let hi: Vec<f64> = (0..d).map(|i| (a.center[i] + ea[i]).max(b.center[i] + eb[i])).collect();
    if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
        return degenerate;
    }
    // disjoint boxes: no sample can lie in both
    if (0..d).any(|i| a.center[i] + ea[i] < b.center[i] - eb[i] || b.center[i] + eb[i] < a.center[i] - ea[i]) {
        return Iou {
            value: 0.0,
            degenerate: false,
        };
    }
    let (inter, union) = if d == 2 {
        raster_counts_2d(a, b, &lo, &hi, resolution)
    } else {
        raster_counts(a, b, &lo, &hi, resolution)
    };
    Iou {
        value: if union == 0 { 0.0 } else { inter as f64 / union as f64 },
        degenerate: false,
    }
}

/// Sample counts `(intersection, union)` testing every sample.
fn raster_counts(a: &Ellipse, b: &Ellipse, lo: &[f64], hi: &[f64], resolution: usize) -> (u64, u64) {
    let d = a.dim();
    let grid = GridShape::cube(d, resolution);
    let mut idx = vec![0; d];
    let mut x = vec![0.0; d];
    let (mut inter, mut union) = (0u64, 0u64);
    for p in 0..grid.numel() {
        grid.unravel(p, &mut idx);
        for i in 0..d {
            x[i] = lo[i] + (hi[i] - lo[i]) * (idx[i] as f64 + 0.5) / resolution as f64;
        }
        let (ia, ib) = (a.form(&x) <= 1.0, b.form(&x) <= 1.0);
        inter += (ia && ib) as u64;
        union += (ia || ib) as u64;
    }
    (inter, union)
}

/// Index range of the samples of one raster row inside `e`, or `None`.
fn row_span(e: &Ellipse, u: f64, lo: f64, step: f64, resolution: usize) -> Option<(i64, i64)> {
    // q11 v² + 2 q01 u v + q00 u² − 1 ≤ 0 with u, v offsets from the centre
    let u = u - e.center[0];
    let (qa, qb, qc) = (e.q[3], 2.0 * e.q[1] * u, e.q[0] * u * u - 1.0);
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return None;
    }
    let r = disc.sqrt();
    let (v0, v1) = (
        (-qb - r) / (2.0 * qa) + e.center[1],
        (-qb + r) / (2.0 * qa) + e.center[1],
    );
    let first = ((v0 - lo) / step - 0.5).ceil().max(0.0) as i64;
    let last = ((v1 - lo) / step - 0.5).floor().min(resolution as f64 - 1.0) as i64;
    (first <= last).then_some((first, last))
}

/// Same counts as [`raster_counts`] in 2D, one interval per row.
fn raster_counts_2d(a: &Ellipse, b: &Ellipse, lo: &[f64], hi: &[f64], resolution: usize) -> (u64, u64) {
    let res = resolution as f64;
    let step = [(hi[0] - lo[0]) / res, (hi[1] - lo[1]) / res];
    let (mut inter, mut union) = (0u64, 0u64);
    for i in 0..resolution {
        let u = lo[0] + (hi[0] - lo[0]) * (i as f64 + 0.5) / res;
        let sa = row_span(a, u, lo[1], step[1], resolution);
        let sb = row_span(b, u, lo[1], step[1], resolution);
        let len = |s: Option<(i64, i64)>| s.map_or(0, |(f, l)| (l - f + 1) as u64);
        let both = match (sa, sb) {
            (Some((fa, la)), Some((fb, lb))) => (la.min(lb) - fa.max(fb) + 1).max(0) as u64,
            _ => 0,
        };
        inter += both;
        union += len(sa) + len(sb) - both;
    }
    (inter, union)
}

/// One simulated microscopy image.
#[derive(Clone, Debug, PartialEq)]
pub struct CellImage {
    pub image: TensorField<f64>,
    pub cells: Vec<Ellipse>,
}

pub const CELL_MIN_AXIS: f64 = 3.0;
pub const CELL_MAX_AXIS: f64 = 6.0;
pub const CELL_NOISE: f64 = 0.05;

/// Spots inside an inhomogeneous cell, in the cell's own unit-disk frame.
#[derive(Clone, Debug)]
struct Texture {
    spots: Vec<([f64; 2], f64)>,
}

fn render_cell(e: &Ellipse, amp: f64, texture: Option<&Texture>, x: &[f64]) -> f64 {
    let rho = e.form(x).sqrt();
    // approximate signed distance to the boundary in pixels
    let scale = e.half_extents().map_or(1.0, |h| (h[0] * h[1]).sqrt());
    let dist = (rho - 1.0) * scale;
    let sig = |t: f64| 1.0 / (1.0 + (-t).exp());
    match e.class {
        CellClass::Smooth => amp * sig(-dist / 0.8),
        CellClass::Sharp => amp * sig(-dist / 0.12),
        CellClass::Inhomogeneous => {
            let inside = sig(-dist / 0.12);
            let t = texture.expect("inhomogeneous cells carry a texture");
            let rel = [x[0] - e.center[0], x[1] - e.center[1]];
            let spots: f64 = t
                .spots
                .iter()
                .map(|&(p, w)| {
                    let dx = [rel[0] - p[0] * scale, rel[1] - p[1] * scale];
                    w * (-(dx[0] * dx[0] + dx[1] * dx[1]) / 1.5).exp()
                })
                .sum();
            amp * inside * (0.35 + spots.min(0.9))
        }
    }
}

/// `n` images of `size × size` pixels. `density` is the expected number of
/// cells per 32×32 area; cells are placed by rejection sampling so their
/// bounding circles do not overlap.
pub fn gen_cells(seed: u64, n: usize, size: usize, density: f64) -> Result<Vec<CellImage>> {
    if size < 2 * CELL_MAX_AXIS as usize + 2 {
        return Err(Error::Shape(format!("cell images need at least 14 pixels, got {size}")));
    }
    if !(density >= 0.0) {
        return Err(Error::Config("density must be non-negative".into()));
    }
    let shape = GridShape::cube(2, size);
    let noise = Normal::new(0.0, CELL_NOISE).expect("valid sigma");
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let expected = density * (size * size) as f64 / 1024.0;
            let count = (expected + rng.random::<f64>()).floor() as usize;
            let mut cells: Vec<(Ellipse, f64, Option<Texture>)> = Vec::new();
            let mut attempts = 0;
            while cells.len() < count && attempts < 200 {
                attempts += 1;
                let a = rng.random_range(CELL_MIN_AXIS..CELL_MAX_AXIS);
                let b = rng.random_range(CELL_MIN_AXIS..CELL_MAX_AXIS);
                let angle = rng.random_range(0.0..std::f64::consts::PI);
                let r = a.max(b);
                let lo = r;
                let hi = size as f64 - 1.0 - r;
                let c = [rng.random_range(lo..hi), rng.random_range(lo..hi)];
                let class = CellClass::ALL[rng.random_range(0..3)];
                let amp = rng.random_range(0.7..1.0);
                let texture = (class == CellClass::Inhomogeneous).then(|| Texture {
                    spots: (0..4)
                        .map(|_| {
                            let t = rng.random_range(0.0..std::f64::consts::TAU);
                            let s = rng.random_range(0.0..0.7);
                            ([s * t.cos(), s * t.sin()], rng.random_range(0.3..0.8))
                        })
                        .collect(),
                });
                let clear = cells.iter().all(|(o, _, _)| {
                    let ro = o.half_extents().map_or(CELL_MAX_AXIS, |h| h[0].max(h[1]));
                    let ro = ro.max(CELL_MIN_AXIS);
                    let dx = o.center[0] - c[0];
                    let dy = o.center[1] - c[1];
                    dx.hypot(dy) >= r + ro + 1.0
                });
                if clear {
                    cells.push((Ellipse::from_axes(c, a, b, angle, class), amp, texture));
                }
            }
            let mut idx = [0usize; 2];
            let image = TensorField::from_fn(shape.clone(), 0, |_, p| {
                idx.copy_from_slice(p);
                let x = [idx[0] as f64, idx[1] as f64];
                cells
                    .iter()
                    .map(|(e, amp, t)| render_cell(e, *amp, t.as_ref(), &x))
                    .fold(0.0, f64::max)
            });
            let mut data = image.into_data();
            for v in &mut data {
                *v += noise.sample(&mut rng);
            }
            Ok(CellImage {
                image: TensorField::new(shape.clone(), 0, data)?,
                cells: cells.into_iter().map(|(e, _, _)| e).collect(),
            })
        })
        .collect()
}

/// Checks that a label list describes the image: every cell is bright inside
/// and dark in a ring around it (away from other cells), and every form is a
/// symmetric positive-definite matrix. Returns a description of the first
/// violation.
pub fn check_cells_consistency(sample: &CellImage) -> std::result::Result<(), String> {
    let shape = sample.image.shape();
    let mut idx = [0usize; 2];
    for (k, e) in sample.cells.iter().enumerate() {
        Ellipse::new(e.center.clone(), e.q.clone(), e.class).map_err(|err| format!("cell {k}: {err}"))?;
        let (mut inner, mut ni, mut ring, mut nr) = (0.0, 0, 0.0, 0);
        for p in 0..shape.numel() {
            shape.unravel(p, &mut idx);
            let x = [idx[0] as f64, idx[1] as f64];
            let f = e.form(&x);
            let v = sample.image.data()[p];
            if f < 0.4 {
                inner += v;
                ni += 1;
            } else if (2.2..4.0).contains(&f)
                && sample.cells.iter().enumerate().all(|(j, o)| j == k || o.form(&x) > 2.2)
            {
                ring += v;
                nr += 1;
            }
        }
        if ni == 0 {
            return Err(format!("cell {k} covers no pixel center"));
        }
        let inner = inner / ni as f64;
        if inner < 0.3 {
            return Err(format!("cell {k}: mean interior intensity {inner:.3}"));
        }
        if nr > 0 && ring / nr as f64 > 0.15 {
            return Err(format!("cell {k}: mean surround intensity {:.3}", ring / nr as f64));
        }
    }
    Ok(())
}
