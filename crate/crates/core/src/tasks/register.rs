//! Volumes made by warping a fixed asymmetric atlas with random affine maps.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::sample_rng;
use crate::error::{Error, Result};
use crate::geometry::{GridShape, GroupElement, TensorField};

/// `x ↦ A x + t` in voxel coordinates centred on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineLabel {
    /// `d` columns of `A`
    pub columns: Vec<Vec<f64>>,
    pub translation: Vec<f64>,
}

impl AffineLabel {
    pub fn identity(d: usize) -> Self {
        Self {
            columns: (0..d)
                .map(|j| (0..d).map(|i| (i == j) as u8 as f64).collect())
                .collect(),
            translation: vec![0.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.translation.len()
    }

    /// Columns then translation, the order the registration head emits.
    pub fn to_vec(&self) -> Vec<f64> {
        self.columns
            .iter()
            .flatten()
            .chain(&self.translation)
            .copied()
            .collect()
    }

    pub fn from_vec(d: usize, v: &[f64]) -> Result<Self> {
        if v.len() != d * (d + 1) {
            return Err(Error::Shape(format!(
                "affine label in {d}D has {} numbers",
                d * (d + 1)
            )));
        }
        Ok(Self {
            columns: v[..d * d].chunks(d).map(<[f64]>::to_vec).collect(),
            translation: v[d * d..].to_vec(),
        })
    }

    /// `A[i][j]`
    pub fn linear(&self, i: usize, j: usize) -> f64 {
        self.columns[j][i]
    }

    /// Label of the volume after `R` acts on it: every column and the
    /// translation are rotated.
    pub fn transform(&self, r: &GroupElement) -> Self {
        Self {
            columns: self.columns.iter().map(|c| r.apply(c)).collect(),
            translation: r.apply(&self.translation),
        }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..d)
            .map(|i| (0..d).map(|j| self.linear(i, j) * x[j]).sum::<f64>() + self.translation[i])
            .collect()
    }
}

/// Gaussian blobs `(centre, sigma, amplitude)`: a broad body plus one
/// landmark on the positive half of each axis. Landmark amplitudes differ, so
/// no signed permutation maps the atlas to itself.
fn atlas_blobs(d: usize) -> Vec<(Vec<f64>, f64, f64)> {
    let mut blobs = vec![(vec![0.0; d], 2.5, 0.5)];
    for (axis, amp) in [1.5, 1.0, 0.5].into_iter().enumerate().take(d) {
        let mut c = vec![0.0; d];
        c[axis] = 2.5;
        blobs.push((c, 0.9, amp));
    }
    blobs
}

pub fn atlas_value(x: &[f64]) -> f64 {
    atlas_blobs(x.len())
        .iter()
        .map(|(c, s, a)| {
            let r2: f64 = x.iter().zip(c).map(|(u, v)| (u - v) * (u - v)).sum();
            a * (-r2 / (2.0 * s * s)).exp()
        })
        .sum()
}

fn invert(a: &[f64], d: usize) -> Result<Vec<f64>> {
    let mut m = a.to_vec();
    let mut inv = vec![0.0; d * d];
    for i in 0..d {
        inv[i * d + i] = 1.0;
    }
    for c in 0..d {
        let p = (c..d)
            .max_by(|&x, &y| m[x * d + c].abs().total_cmp(&m[y * d + c].abs()))
            .expect("non-empty range");
        if m[p * d + c].abs() < 1e-12 {
            return Err(Error::Shape("affine map is singular".into()));
        }
        for k in 0..d {
            m.swap(c * d + k, p * d + k);
            inv.swap(c * d + k, p * d + k);
        }
        let piv = m[c * d + c];
        for k in 0..d {
            m[c * d + k] /= piv;
            inv[c * d + k] /= piv;
        }
        for r in 0..d {
            if r != c {
                let f = m[r * d + c];
                for k in 0..d {
                    m[r * d + k] -= f * m[c * d + k];
                    inv[r * d + k] -= f * inv[c * d + k];
                }
            }
        }
    }
    Ok(inv)
}

/// Renders `atlas(A⁻¹(x − t))` with `x` measured from the grid centre.
pub fn render_registration(label: &AffineLabel, size: usize) -> Result<TensorField<f64>> {
    let d = label.dim();
    let a: Vec<f64> = (0..d * d).map(|k| label.linear(k / d, k % d)).collect();
    let inv = invert(&a, d)?;
    let mid = (size as f64 - 1.0) / 2.0;
    let mut rel = vec![0.0; d];
    let mut y = vec![0.0; d];
    Ok(TensorField::from_fn(GridShape::cube(d, size), 0, |_, p| {
        for i in 0..d {
            rel[i] = p[i] as f64 - mid - label.translation[i];
        }
        for i in 0..d {
            y[i] = (0..d).map(|j| inv[i * d + j] * rel[j]).sum();
        }
        atlas_value(&y)
    }))
}

pub const MAX_TRANSLATION: f64 = 1.5;
pub const MAX_SHEAR: f64 = 0.1;

/// Random orthogonal matrix (Haar) from the QR factorization of a Gaussian
/// matrix with sign-corrected diagonal, row-major.
fn random_orthogonal(d: usize, rng: &mut impl Rng) -> Vec<f64> {
    let g: Vec<f64> = (0..d * d).map(|_| StandardNormal.sample(rng)).collect();
    // Gram-Schmidt on columns
    let mut q = vec![0.0; d * d];
    for j in 0..d {
        let mut v: Vec<f64> = (0..d).map(|i| g[i * d + j]).collect();
        for k in 0..j {
            let dot: f64 = (0..d).map(|i| v[i] * q[i * d + k]).sum();
            (0..d).for_each(|i| v[i] -= dot * q[i * d + k]);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        (0..d).for_each(|i| q[i * d + j] = v[i] / n);
    }
    q
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegistrationSample {
    pub volume: TensorField<f64>,
    pub label: AffineLabel,
}

/// `n` cubes of extent `size` warped by `A = O (I + S)` with `O` a random
/// orthogonal matrix, `S` a small random perturbation, and a translation of
/// at most 1.5 voxels per axis. No noise.
pub fn gen_registration(seed: u64, n: usize, size: usize, d: usize) -> Result<Vec<RegistrationSample>> {
    if !(2..=3).contains(&d) {
        return Err(Error::DimensionMismatch(format!(
            "registration volumes are 2D or 3D, got {d}D"
        )));
    }
    if size < 8 {
        return Err(Error::Shape(format!("registration volumes need size >= 8, got {size}")));
    }
    (0..n)
        .map(|i| {
            let mut rng = sample_rng(seed, i as u64);
            let o = random_orthogonal(d, &mut rng);
            let s: Vec<f64> = (0..d * d)
                .map(|k| (k / d == k % d) as u8 as f64 + rng.random_range(-MAX_SHEAR..MAX_SHEAR))
                .collect();
            let label = AffineLabel {
                columns: (0..d)
                    .map(|j| {
                        (0..d)
                            .map(|r| (0..d).map(|k| o[r * d + k] * s[k * d + j]).sum())
                            .collect()
                    })
                    .collect(),
                translation: (0..d)
                    .map(|_| rng.random_range(-MAX_TRANSLATION..MAX_TRANSLATION))
                    .collect(),
            };
            Ok(RegistrationSample {
                volume: render_registration(&label, size)?,
                label,
            })
        })
        .collect()
}

/// Largest difference between a volume and the atlas re-rendered under its label.
pub fn registration_consistency(sample: &RegistrationSample) -> Result<f64> {
    let n = sample.volume.shape().dims()[0];
    let fresh = render_registration(&sample.label, n)?;
    Ok(fresh.max_abs_diff(&sample.volume))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{act_on_field, enumerate_hyperoctahedral};

    #[test]
    fn identity_and_translation() {
        let id = AffineLabel::identity(3);
        assert_eq!(
            id.to_vec(),
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]
        );
        let v = render_registration(&id, 9).unwrap();
        // centre voxel sits on the central blob
        assert!((v.data()[4 * 81 + 4 * 9 + 4] - atlas_value(&[0.0; 3])).abs() < 1e-15);
        let shifted = AffineLabel {
            translation: vec![1.0, 0.0, 0.0],
            ..id
        };
        let w = render_registration(&shifted, 9).unwrap();
        assert_eq!(w.data()[5 * 81 + 4 * 9 + 4], v.data()[4 * 81 + 4 * 9 + 4]);
    }

    #[test]
    fn atlas_has_no_symmetry() {
        let probe: Vec<Vec<f64>> = (0..30)
            .map(|k| {
                vec![
                    (k as f64 * 0.37).sin() * 3.0,
                    (k as f64 * 0.71).cos() * 3.0,
                    (k as f64 * 1.3).sin() * 2.0,
                ]
            })
            .collect();
        for g in enumerate_hyperoctahedral(3).iter().skip(1) {
            let diff = probe
                .iter()
                .map(|x| (atlas_value(&g.apply(x)) - atlas_value(x)).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-2);
        }
    }

    #[test]
    fn labels_follow_the_group() {
        let samples = gen_registration(2, 3, 10, 3).unwrap();
        for s in &samples {
            assert!(registration_consistency(s).unwrap() < 1e-12);
            for g in enumerate_hyperoctahedral(3) {
                let moved = RegistrationSample {
                    volume: act_on_field(&g, &s.volume).unwrap(),
                    label: s.label.transform(&g),
                };
                assert!(registration_consistency(&moved).unwrap() < 1e-12);
            }
        }
    }

    #[test]
    fn vec_round_trip() {
        let s = &gen_registration(9, 1, 8, 3).unwrap()[0];
        assert_eq!(AffineLabel::from_vec(3, &s.label.to_vec()).unwrap(), s.label);
    }
}
