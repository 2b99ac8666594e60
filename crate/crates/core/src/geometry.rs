//! Tensor fields on regular grids and the action of orthogonal transforms on them.
//!
//! A rank-`r` field on a `d`-dimensional grid stores `d^r` components per grid
//! point. Components are enumerated lexicographically over the `r` tensor
//! indices, first index slowest, and stored component-major: all grid values of
//! component 0, then component 1, and so on. Array axis `i` is spatial
//! coordinate `i`, so tensor index `i` and grid axis `i` rotate together.
//!
//! Transforms act about the array center `(n - 1) / 2` of each axis, which makes
//! quarter turns and flips exact array permutations for odd and even extents.

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Orthogonality tolerance for [`GroupElement::from_matrix`].
const ORTHO_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GridShape {
    dims: Vec<usize>,
}

impl GridShape {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Shape("grid needs at least one axis".into()));
        }
        if dims.contains(&0) {
            return Err(Error::Shape(format!("zero extent in {dims:?}")));
        }
        Ok(Self { dims })
    }

    /// `d` axes of extent `n`.
    pub fn cube(d: usize, n: usize) -> Self {
        Self::new(vec![n; d]).expect("cube extents are positive")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major strides, first axis slowest.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dims.len()];
        for i in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.dims[i + 1];
        }
        strides
    }

    pub fn unravel(&self, mut index: usize, out: &mut [usize]) {
        for i in (0..self.dims.len()).rev() {
            out[i] = index % self.dims[i];
            index /= self.dims[i];
        }
    }

    pub fn ravel(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn center(&self, axis: usize) -> f64 {
        (self.dims[axis] as f64 - 1.0) / 2.0
    }
}

/// Number of components of a rank-`rank` tensor in `d` dimensions.
pub fn components(d: usize, rank: usize) -> usize {
    d.pow(rank as u32)
}

/// A single geometric channel: a rank-`r` tensor at every grid point.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorField<T> {
    shape: GridShape,
    rank: usize,
    data: Vec<T>,
}

impl<T: Real> TensorField<T> {
    pub fn new(shape: GridShape, rank: usize, data: Vec<T>) -> Result<Self> {
        let expected = shape.numel() * components(shape.ndim(), rank);
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "rank-{rank} field on {:?} needs {expected} values, got {}",
                shape.dims(),
                data.len()
            )));
        }
        Ok(Self { shape, rank, data })
    }

    pub fn zeros(shape: GridShape, rank: usize) -> Self {
        let len = shape.numel() * components(shape.ndim(), rank);
        Self {
            shape,
            rank,
            data: vec![T::zero(); len],
        }
    }

    /// Builds a field from a function of (component index, grid multi-index).
    pub fn from_fn(shape: GridShape, rank: usize, mut f: impl FnMut(usize, &[usize]) -> T) -> Self {
        let ncomp = components(shape.ndim(), rank);
        let npix = shape.numel();
        let mut idx = vec![0; shape.ndim()];
        let mut data = Vec::with_capacity(ncomp * npix);
        for c in 0..ncomp {
            for p in 0..npix {
                shape.unravel(p, &mut idx);
                data.push(f(c, &idx));
            }
        }
        Self { shape, rank, data }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn dim(&self) -> usize {
        self.shape.ndim()
    }

    pub fn num_components(&self) -> usize {
        components(self.dim(), self.rank)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn component(&self, c: usize) -> &[T] {
        let npix = self.shape.numel();
        &self.data[c * npix..(c + 1) * npix]
    }

    /// The tensor at grid point `pixel`, lexicographic component order.
    pub fn tensor_at(&self, pixel: usize) -> Vec<T> {
        let npix = self.shape.numel();
        (0..self.num_components())
            .map(|c| self.data[c * npix + pixel])
            .collect()
    }

    /// Point-major layout: grid points outermost, the `d^r` components of each
    /// point contiguous.
    pub fn to_pointwise(&self) -> Vec<T> {
        let npix = self.shape.numel();
        let ncomp = self.num_components();
        let mut out = Vec::with_capacity(self.data.len());
        for p in 0..npix {
            for c in 0..ncomp {
                out.push(self.data[c * npix + p]);
            }
        }
        out
    }

    pub fn from_pointwise(shape: GridShape, rank: usize, values: &[T]) -> Result<Self> {
        let npix = shape.numel();
        let ncomp = components(shape.ndim(), rank);
        if values.len() != npix * ncomp {
            return Err(Error::Shape(format!(
                "expected {} pointwise values, got {}",
                npix * ncomp,
                values.len()
            )));
        }
        let mut data = vec![T::zero(); values.len()];
        for p in 0..npix {
            for c in 0..ncomp {
                data[c * npix + p] = values[p * ncomp + c];
            }
        }
        Ok(Self { shape, rank, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupKind {
    SignedPermutation,
    General,
}

/// An orthogonal `d × d` matrix, row-major. Signed permutations additionally
/// carry their permutation form: row `i` has `signs[i]` in column `perm[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupElement {
    dim: usize,
    matrix: Vec<f64>,
    perm: Option<(Vec<usize>, Vec<i8>)>,
}

impl GroupElement {
    pub fn identity(d: usize) -> Self {
        Self::signed_permutation((0..d).collect(), vec![1; d]).expect("identity is valid")
    }

    pub fn signed_permutation(perm: Vec<usize>, signs: Vec<i8>) -> Result<Self> {
        let d = perm.len();
        if signs.len() != d {
            return Err(Error::DimensionMismatch(format!(
                "{} signs for a permutation of {d}",
                signs.len()
            )));
        }
        let mut seen = vec![false; d];
        for &p in &perm {
            if p >= d || seen[p] {
                return Err(Error::DimensionMismatch(format!("{perm:?} is not a permutation")));
            }
            seen[p] = true;
        }
        if signs.iter().any(|&s| s != 1 && s != -1) {
            return Err(Error::DimensionMismatch(format!("signs must be ±1, got {signs:?}")));
        }
        let mut matrix = vec![0.0; d * d];
        for i in 0..d {
            matrix[i * d + perm[i]] = f64::from(signs[i]);
        }
        Ok(Self {
            dim: d,
            matrix,
            perm: Some((perm, signs)),
        })
    }

    /// Accepts any orthogonal matrix; entries within tolerance of a signed
    /// permutation are snapped to it.
    pub fn from_matrix(d: usize, matrix: Vec<f64>) -> Result<Self> {
        if matrix.len() != d * d {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a {d}×{d} matrix",
                matrix.len()
            )));
        }
        for i in 0..d {
            for j in 0..d {
                let dot: f64 = (0..d).map(|k| matrix[k * d + i] * matrix[k * d + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                if (dot - target).abs() > ORTHO_TOL {
                    return Err(Error::DimensionMismatch("matrix is not orthogonal".into()));
                }
            }
        }
        let mut perm = vec![0; d];
        let mut signs = vec![0i8; d];
        let mut is_perm = true;
        'rows: for i in 0..d {
            let mut found = false;
            for j in 0..d {
                let v = matrix[i * d + j];
                if (v.abs() - 1.0).abs() <= ORTHO_TOL {
                    if found {
                        is_perm = false;
                        break 'rows;
                    }
                    found = true;
                    perm[i] = j;
                    signs[i] = if v > 0.0 { 1 } else { -1 };
                } else if v.abs() > ORTHO_TOL {
                    is_perm = false;
                    break 'rows;
                }
            }
            if !found {
                is_perm = false;
                break;
            }
        }
        if is_perm {
            return Self::signed_permutation(perm, signs);
        }
        Ok(Self {
            dim: d,
            matrix,
            perm: None,
        })
    }

    /// Counter-clockwise rotation in the (axis 0, axis 1) plane. Multiples of
    /// 90° come back as exact signed permutations.
    pub fn rotation_2d(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let snap = |v: f64| {
            let r = v.round();
            if (v - r).abs() < 1e-12 {
                r
            } else {
                v
            }
        };
        let (s, c) = (snap(s), snap(c));
        Self::from_matrix(2, vec![c, -s, s, c]).expect("rotation matrices are orthogonal")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[i * self.dim + j]
    }

    pub fn kind(&self) -> GroupKind {
        if self.perm.is_some() {
            GroupKind::SignedPermutation
        } else {
            GroupKind::General
        }
    }

    pub fn is_signed_permutation(&self) -> bool {
        self.perm.is_some()
    }

    /// `(perm, signs)` with `R[i][perm[i]] = signs[i]`.
    pub fn as_signed_permutation(&self) -> Option<(&[usize], &[i8])> {
        self.perm.as_ref().map(|(p, s)| (p.as_slice(), s.as_slice()))
    }

    pub fn is_identity(&self) -> bool {
        self.matrix
            .iter()
            .enumerate()
            .all(|(k, &v)| v == if k / self.dim == k % self.dim { 1.0 } else { 0.0 })
    }

    /// Matrix product `self · other`.
    pub fn compose(&self, other: &Self) -> Self {
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m[i * d + j] = (0..d).map(|k| self.entry(i, k) * other.entry(k, j)).sum();
            }
        }
        Self::from_matrix(d, m).expect("product of orthogonal matrices is orthogonal")
    }

    pub fn transpose(&self) -> Self {
        let d = self.dim;
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                m[j * d + i] = self.entry(i, j);
            }
        }
        Self::from_matrix(d, m).expect("transpose of orthogonal matrix is orthogonal")
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.entry(i, j) * v[j]).sum())
            .collect()
    }
}

/// All `2^d · d!` signed permutation matrices, identity first. Permutations run
/// in lexicographic order; within a permutation, sign patterns follow the bits
/// of a counter (bit `i` set flips row `i`).
pub fn enumerate_hyperoctahedral(d: usize) -> Vec<GroupElement> {
    let mut out = Vec::with_capacity((1 << d) * (1..=d).product::<usize>());
    for perm in permutations(d) {
        for mask in 0..(1usize << d) {
            let signs = (0..d).map(|i| if mask >> i & 1 == 1 { -1 } else { 1 }).collect();
            out.push(GroupElement::signed_permutation(perm.clone(), signs).expect("valid"));
        }
    }
    out
}

fn permutations(d: usize) -> Vec<Vec<usize>> {
    fn rec(prefix: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if prefix.len() == used.len() {
            out.push(prefix.clone());
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                prefix.push(j);
                rec(prefix, used, out);
                prefix.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(d), &mut vec![false; d], &mut out);
    out
}

/// `R^{i1,j1} ··· R^{ir,jr} t^{j1..jr}`: the component-mixing half of the
/// tensor transformation law.
pub fn act_on_components<T: Real>(r: &GroupElement, t: &[T], rank: usize) -> Result<Vec<T>> {
    let d = r.dim();
    let n = components(d, rank);
    if t.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "rank-{rank} tensor in {d}D has {n} components, got {}",
            t.len()
        )));
    }
    let mut cur = t.to_vec();
    let mut next = vec![T::zero(); n];
    for slot in 0..rank {
        let stride = components(d, rank - 1 - slot);
        for (k, out) in next.iter_mut().enumerate() {
            let i = (k / stride) % d;
            let base = k - i * stride;
            let mut acc = T::zero();
            for j in 0..d {
                let rij = r.entry(i, j);
                if rij != 0.0 {
                    acc = acc + T::lit(rij) * cur[base + j * stride];
                }
            }
            *out = acc;
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

/// Index form of a signed-permutation action on a rank-`r` field:
/// `out[c][y] = comp_sign[c] · in[comp_src[c]][pix_src[y]]`.
#[derive(Clone, Debug)]
pub struct FieldPermutation {
    pub pix_src: Vec<usize>,
    pub comp_src: Vec<usize>,
    pub comp_sign: Vec<f64>,
}

impl FieldPermutation {
    pub fn new(r: &GroupElement, shape: &GridShape, rank: usize) -> Result<Self> {
        let (perm, signs) = r.as_signed_permutation().ok_or(Error::UnsupportedExactAction)?;
        let d = r.dim();
        if shape.ndim() != d {
            return Err(Error::DimensionMismatch(format!(
                "{d}D transform on a {}D grid",
                shape.ndim()
            )));
        }
        let dims = shape.dims();
        for i in 0..d {
            if dims[i] != dims[perm[i]] {
                return Err(Error::DimensionMismatch(format!(
                    "transform exchanges axes {i} and {} with extents {} and {}",
                    perm[i], dims[i], dims[perm[i]]
                )));
            }
        }

        let npix = shape.numel();
        let mut pix_src = Vec::with_capacity(npix);
        let mut y = vec![0; d];
        let mut x = vec![0; d];
        for p in 0..npix {
            shape.unravel(p, &mut y);
            for i in 0..d {
                x[perm[i]] = if signs[i] > 0 { y[i] } else { dims[i] - 1 - y[i] };
            }
            pix_src.push(shape.ravel(&x));
        }

        let ncomp = components(d, rank);
        let mut comp_src = Vec::with_capacity(ncomp);
        let mut comp_sign = Vec::with_capacity(ncomp);
        for c in 0..ncomp {
            let mut src = 0;
            let mut sign = 1.0;
            let mut rem = c;
            let mut stride = ncomp;
            for _ in 0..rank {
                stride /= d;
                let i = rem / stride;
                rem %= stride;
                src += perm[i] * stride;
                sign *= f64::from(signs[i]);
            }
            comp_src.push(src);
            comp_sign.push(sign);
        }
        Ok(Self {
            pix_src,
            comp_src,
            comp_sign,
        })
    }

    /// Applies the action to one component-major channel block.
    pub fn apply<T: Real>(&self, input: &[T], out: &mut [T]) {
        let npix = self.pix_src.len();
        for (c, (&src, &sign)) in self.comp_src.iter().zip(&self.comp_sign).enumerate() {
            let src_block = &input[src * npix..(src + 1) * npix];
            let out_block = &mut out[c * npix..(c + 1) * npix];
            let sign = T::lit(sign);
            for (o, &sp) in out_block.iter_mut().zip(&self.pix_src) {
                *o = sign * src_block[sp];
            }
        }
    }
}

/// Exact action `[R·f](x) = R^{⊗r} f(R⁻¹x)` for signed permutations.
pub fn act_on_field<T: Real>(r: &GroupElement, f: &TensorField<T>) -> Result<TensorField<T>> {
    let map = FieldPermutation::new(r, f.shape(), f.rank())?;
    let mut out = TensorField::zeros(f.shape().clone(), f.rank());
    map.apply(f.data(), out.data_mut());
    Ok(out)
}

/// Interpolated action for arbitrary orthogonal `R`: grid values are sampled at
/// `R⁻¹x` by multilinear interpolation (zero outside the grid), then mixed by
/// `R^{⊗r}`.
pub fn act_on_field_approx<T: Real>(r: &GroupElement, f: &TensorField<T>) -> TensorField<T> {
    let shape = f.shape().clone();
    let d = shape.ndim();
    assert_eq!(d, r.dim(), "transform and field dimension differ");
    let npix = shape.numel();
    let ncomp = f.num_components();
    let rinv = r.transpose();
    let dims = shape.dims().to_vec();
    let centers: Vec<f64> = (0..d).map(|a| shape.center(a)).collect();
    let strides = shape.strides();

    let mut sampled = vec![T::zero(); ncomp * npix];
    let mut y = vec![0; d];
    let mut yc = vec![0.0; d];
    for p in 0..npix {
        shape.unravel(p, &mut y);
        for a in 0..d {
            yc[a] = y[a] as f64 - centers[a];
        }
        let xc = rinv.apply(&yc);
        let pos: Vec<f64> = xc.iter().zip(&centers).map(|(x, c)| x + c).collect();
        let base: Vec<f64> = pos.iter().map(|v| v.floor()).collect();
        let frac: Vec<f64> = pos.iter().zip(&base).map(|(v, b)| v - b).collect();
        for corner in 0..(1usize << d) {
            let mut w = 1.0;
            let mut offset = 0usize;
            let mut inside = true;
            for a in 0..d {
                let hi = corner >> a & 1 == 1;
                let idx = base[a] as i64 + i64::from(hi);
                if idx < 0 || idx >= dims[a] as i64 {
                    inside = false;
                    break;
                }
                w *= if hi { frac[a] } else { 1.0 - frac[a] };
                offset += idx as usize * strides[a];
            }
            if !inside || w == 0.0 {
                continue;
            }
            let w = T::lit(w);
            for c in 0..ncomp {
                sampled[c * npix + p] = sampled[c * npix + p] + w * f.data()[c * npix + offset];
            }
        }
    }

    if f.rank() == 0 {
        return TensorField::new(shape, 0, sampled).expect("shape preserved");
    }
    let mut out = vec![T::zero(); ncomp * npix];
    let mut t = vec![T::zero(); ncomp];
    for p in 0..npix {
        for c in 0..ncomp {
            t[c] = sampled[c * npix + p];
        }
        let mixed = act_on_components(r, &t, f.rank()).expect("component count matches");
        for c in 0..ncomp {
            out[c * npix + p] = mixed[c];
        }
    }
    TensorField::new(shape, f.rank(), out).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rot90() -> GroupElement {
        GroupElement::from_matrix(2, vec![0.0, -1.0, 1.0, 0.0]).unwrap()
    }

    fn random_field(rng: &mut ChaCha8Rng, dims: Vec<usize>, rank: usize) -> TensorField<f64> {
        let shape = GridShape::new(dims).unwrap();
        TensorField::from_fn(shape, rank, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn group_orders() {
        assert_eq!(enumerate_hyperoctahedral(1).len(), 2);
        assert_eq!(enumerate_hyperoctahedral(2).len(), 8);
        assert_eq!(enumerate_hyperoctahedral(3).len(), 48);
        for d in 1..=3 {
            let g = enumerate_hyperoctahedral(d);
            assert!(g[0].is_identity());
            for (a, x) in g.iter().enumerate() {
                for y in &g[a + 1..] {
                    assert_ne!(x.matrix(), y.matrix());
                }
            }
        }
    }

    #[test]
    fn group_is_closed() {
        for d in 2..=3 {
            let g = enumerate_hyperoctahedral(d);
            for a in &g {
                for b in &g {
                    let ab = a.compose(b);
                    assert!(ab.is_signed_permutation());
                    assert!(g.iter().any(|e| e.matrix() == ab.matrix()));
                }
            }
        }
    }

    #[test]
    fn identity_leaves_field_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_field(&mut rng, vec![5, 4], 2);
        assert_eq!(act_on_field(&GroupElement::identity(2), &f).unwrap(), f);
    }

    #[test]
    fn scalar_quarter_turn_moves_pixels_only() {
        let shape = GridShape::cube(2, 3);
        let f = TensorField::from_fn(shape, 0, |_, idx| (idx[0] * 3 + idx[1]) as f64);
        let g = act_on_field(&rot90(), &f).unwrap();
        // out[y0][y1] = f[y1][2 - y0]
        let expected = [2.0, 5.0, 8.0, 1.0, 4.0, 7.0, 0.0, 3.0, 6.0];
        assert_eq!(g.data(), &expected);
    }

    #[test]
    fn constant_vector_field_rotates() {
        let shape = GridShape::cube(2, 4);
        let v = TensorField::from_fn(shape, 1, |c, _| if c == 0 { 1.0 } else { 0.0 });
        let out = act_on_field(&rot90(), &v).unwrap();
        assert!(out.component(0).iter().all(|&x| x == 0.0));
        assert!(out.component(1).iter().all(|&x| x == 1.0));
    }

    #[test]
    fn mismatched_swap_is_rejected() {
        let f = TensorField::<f64>::zeros(GridShape::new(vec![3, 4]).unwrap(), 0);
        assert!(matches!(act_on_field(&rot90(), &f), Err(Error::DimensionMismatch(_))));
        // a flip keeps axes in place and is fine on rectangles
        let flip = GroupElement::signed_permutation(vec![0, 1], vec![-1, 1]).unwrap();
        assert!(act_on_field(&flip, &f).is_ok());
    }

    #[test]
    fn general_rotation_needs_approx() {
        let f = TensorField::<f64>::zeros(GridShape::cube(2, 3), 0);
        let r = GroupElement::rotation_2d(0.3);
        assert!(matches!(act_on_field(&r, &f), Err(Error::UnsupportedExactAction)));
    }

    #[test]
    fn action_composes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for d in 2..=3 {
            let g = enumerate_hyperoctahedral(d);
            let dims = vec![if d == 2 { 6 } else { 3 }; d];
            for rank in 0..=2 {
                let f = random_field(&mut rng, dims.clone(), rank);
                for _ in 0..10 {
                    let a = &g[rng.random_range(0..g.len())];
                    let b = &g[rng.random_range(0..g.len())];
                    let lhs = act_on_field(b, &act_on_field(a, &f).unwrap()).unwrap();
                    let rhs = act_on_field(&b.compose(a), &f).unwrap();
                    assert_eq!(lhs, rhs);
                }
            }
        }
    }

    #[test]
    fn component_action_examples() {
        let r = GroupElement::signed_permutation(vec![0, 1], vec![1, -1]).unwrap();
        assert_eq!(act_on_components(&r, &[3.0, 4.0], 1).unwrap(), vec![3.0, -4.0]);

        let rot = GroupElement::rotation_2d(0.7);
        let id = [1.0f64, 0.0, 0.0, 1.0];
        let out = act_on_components(&rot, &id, 2).unwrap();
        for (a, b) in out.iter().zip(id) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn rank2_component_action_is_conjugation() {
        let r = GroupElement::rotation_2d(0.4);
        let m = [1.0, 2.0, 3.0, 4.0];
        let out = act_on_components(&r, &m, 2).unwrap();
        // R M R^T by hand
        for i in 0..2 {
            for j in 0..2 {
                let mut v = 0.0;
                for k in 0..2 {
                    for l in 0..2 {
                        v += r.entry(i, k) * m[k * 2 + l] * r.entry(j, l);
                    }
                }
                assert!((out[i * 2 + j] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rank4_inverse_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = enumerate_hyperoctahedral(3);
        let t: Vec<f64> = (0..81).map(|_| rng.random_range(-1.0..1.0)).collect();
        for _ in 0..10 {
            let r = &g[rng.random_range(0..g.len())];
            let fwd = act_on_components(r, &t, 4).unwrap();
            let back = act_on_components(&r.transpose(), &fwd, 4).unwrap();
            for (a, b) in back.iter().zip(&t) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn approx_matches_exact_on_signed_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = random_field(&mut rng, vec![6, 6], 1);
        for r in enumerate_hyperoctahedral(2) {
            let exact = act_on_field(&r, &f).unwrap();
            let approx = act_on_field_approx(&r, &f);
            assert!(exact.max_abs_diff(&approx) < 1e-12);
        }
        let quarter = GroupElement::rotation_2d(std::f64::consts::FRAC_PI_2);
        assert!(quarter.is_signed_permutation());
    }

    #[test]
    fn pointwise_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_field(&mut rng, vec![3, 4], 2);
        let flat = f.to_pointwise();
        let back = TensorField::from_pointwise(f.shape().clone(), 2, &flat).unwrap();
        assert_eq!(back, f);
    }

    #[test]
    fn from_matrix_rejects_non_orthogonal() {
        assert!(GroupElement::from_matrix(2, vec![1.0, 0.1, 0.0, 1.0]).is_err());
    }
}
