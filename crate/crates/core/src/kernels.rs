//! Moment kernels: a learned radial profile times a product of position
//! components, with some index pairs replaced by Kronecker deltas.
//!
//! A rank-`r` kernel assigns a rank-`r` tensor to every voxel of an odd `s^d`
//! support. Used between a rank-`i` input and a rank-`r-i` output it contracts
//! its last `i` indices with the input, so a block of the dense convolution
//! weight is the kernel reshaped to `d^{r-i} × d^i` per voxel.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{components, GridShape, TensorField};
use crate::scalar::Real;

/// Disjoint unordered index pairs (0-based) that become Kronecker deltas.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Signature {
    rank: usize,
    pairs: Vec<(usize, usize)>,
}

impl Signature {
    pub fn new(rank: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut used = vec![false; rank];
        let mut norm = Vec::with_capacity(pairs.len());
        for (a, b) in pairs {
            let (a, b) = if a < b { (a, b) } else { (b, a) };
            if a == b || b >= rank || used[a] || used[b] {
                return Err(Error::ParameterShape(format!(
                    "invalid pair ({a}, {b}) for rank {rank}"
                )));
            }
            used[a] = true;
            used[b] = true;
            norm.push((a, b));
        }
        norm.sort_unstable();
        Ok(Self { rank, pairs: norm })
    }

    pub fn empty(rank: usize) -> Self {
        Self {
            rank,
            pairs: Vec::new(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Indices not covered by a pair; each contributes a factor `x^{i_j}`.
    pub fn unpaired(&self) -> Vec<usize> {
        (0..self.rank)
            .filter(|j| !self.pairs.iter().any(|&(a, b)| a == *j || b == *j))
            .collect()
    }

    /// `Π δ(i_a, i_b) · Π x^{i_j}` for tensor index tuple `idx`.
    pub fn template(&self, idx: &[usize], x: &[f64]) -> f64 {
        if self.pairs.iter().any(|&(a, b)| idx[a] != idx[b]) {
            return 0.0;
        }
        self.unpaired().iter().map(|&j| x[idx[j]]).product()
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, (a, b)) in self.pairs.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{{{},{}}}", a + 1, b + 1)?;
        }
        write!(f, "}}")
    }
}

/// Every set of disjoint pairs over `rank` indices, ordered by pair count and
/// then lexicographically. The empty signature comes first.
pub fn enumerate_signatures(rank: usize) -> Vec<Signature> {
    fn rec(
        next: usize,
        rank: usize,
        used: &mut Vec<bool>,
        pairs: &mut Vec<(usize, usize)>,
        out: &mut Vec<Vec<(usize, usize)>>,
    ) {
        if next == rank {
            out.push(pairs.clone());
            return;
        }
        if used[next] {
            rec(next + 1, rank, used, pairs, out);
            return;
        }
        rec(next + 1, rank, used, pairs, out);
        for partner in next + 1..rank {
            if !used[partner] {
                used[next] = true;
                used[partner] = true;
                pairs.push((next, partner));
                rec(next + 1, rank, used, pairs, out);
                pairs.pop();
                used[next] = false;
                used[partner] = false;
            }
        }
    }
    let mut raw = Vec::new();
    rec(0, rank, &mut vec![false; rank], &mut Vec::new(), &mut raw);
    raw.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
    raw.into_iter().map(|pairs| Signature { rank, pairs }).collect()
}

/// Samples of a radial function at radii `0, 1, …, n-1` (pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct RadialProfile<T> {
    pub samples: Vec<T>,
}

impl<T: Real> RadialProfile<T> {
    pub fn new(samples: Vec<T>) -> Self {
        Self { samples }
    }

    pub fn constant(n: usize, value: T) -> Self {
        Self {
            samples: vec![value; n],
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Integer voxel offsets of a centered odd support, row-major.
pub fn kernel_offsets(d: usize, support: usize) -> Vec<Vec<f64>> {
    let shape = GridShape::cube(d, support);
    let half = (support as f64 - 1.0) / 2.0;
    let mut idx = vec![0; d];
    (0..shape.numel())
        .map(|v| {
            shape.unravel(v, &mut idx);
            idx.iter().map(|&i| i as f64 - half).collect()
        })
        .collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Linear interpolation of a radial profile onto the voxels of a support.
#[derive(Clone, Debug)]
pub struct InterpolationMatrix {
    support: usize,
    dim: usize,
    samples: usize,
    /// voxel-major, `voxels × samples`
    weights: Vec<f64>,
}

impl InterpolationMatrix {
    pub fn support(&self) -> usize {
        self.support
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn voxels(&self) -> usize {
        self.weights.len() / self.samples
    }

    pub fn row(&self, voxel: usize) -> &[f64] {
        &self.weights[voxel * self.samples..(voxel + 1) * self.samples]
    }

    pub fn apply<T: Real>(&self, profile: &RadialProfile<T>) -> Vec<T> {
        (0..self.voxels())
            .map(|v| {
                self.row(v)
                    .iter()
                    .zip(&profile.samples)
                    .fold(T::zero(), |acc, (&w, &s)| acc + T::lit(w) * s)
            })
            .collect()
    }
}

/// Radius of the support's corner voxel, `√d · (s-1)/2`.
pub fn max_radius(support: usize, d: usize) -> f64 {
    (d as f64).sqrt() * (support as f64 - 1.0) / 2.0
}

pub fn build_interpolation(support: usize, samples: usize, d: usize) -> Result<InterpolationMatrix> {
    if support.is_multiple_of(2) {
        return Err(Error::ParameterShape(format!("support must be odd, got {support}")));
    }
    let radius = max_radius(support, d);
    let needed = (radius - 1e-9).ceil().max(0.0) as usize + 1;
    if samples < needed {
        return Err(Error::InsufficientSamples {
            needed,
            got: samples,
            radius,
        });
    }
    let offsets = kernel_offsets(d, support);
    let mut weights = vec![0.0; offsets.len() * samples];
    for (v, x) in offsets.iter().enumerate() {
        let r = norm(x);
        let lo = r.floor() as usize;
        let t = r - lo as f64;
        let row = &mut weights[v * samples..(v + 1) * samples];
        if lo + 1 >= samples || t == 0.0 {
            row[lo.min(samples - 1)] = 1.0;
        } else {
            row[lo] = 1.0 - t;
            row[lo + 1] = t;
        }
    }
    Ok(InterpolationMatrix {
        support,
        dim: d,
        samples,
        weights,
    })
}

#[derive(Clone, Debug)]
pub struct MomentKernel<T> {
    pub dim: usize,
    pub signature: Signature,
    pub profile: RadialProfile<T>,
    pub support: usize,
}

impl<T: Real> MomentKernel<T> {
    pub fn rank(&self) -> usize {
        self.signature.rank()
    }
}

/// Evaluates `f(|x|) · Π δ · Π x` on the support as a rank-`r` field.
pub fn assemble_moment_kernel<T: Real>(k: &MomentKernel<T>) -> Result<TensorField<T>> {
    let interp = build_interpolation(k.support, k.profile.len(), k.dim)?;
    let radial = interp.apply(&k.profile);
    let offsets = kernel_offsets(k.dim, k.support);
    let shape = GridShape::cube(k.dim, k.support);
    let rank = k.rank();
    let d = k.dim;
    let mut idx = vec![0; rank];
    Ok(TensorField::from_fn(shape, rank, |c, grid| {
        let v = grid.iter().fold(0, |acc, &i| acc * k.support + i);
        tensor_index(c, d, rank, &mut idx);
        radial[v] * T::lit(k.signature.template(&idx, &offsets[v]))
    }))
}

/// Unpacks a lexicographic component index into per-slot indices.
pub fn tensor_index(mut c: usize, d: usize, rank: usize, out: &mut [usize]) {
    for slot in (0..rank).rev() {
        out[slot] = c % d;
        c /= d;
    }
}

/// One geometric channel inside a flattened feature stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Channel {
    pub rank: usize,
    /// first row in the flattened stack
    pub offset: usize,
    /// `d^rank`
    pub size: usize,
}

/// Ordered groups of `(rank, multiplicity)`.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ChannelSpec {
    groups: Vec<(usize, usize)>,
}

impl ChannelSpec {
    pub fn new(groups: Vec<(usize, usize)>) -> Self {
        Self { groups }
    }

    /// Scalars, vectors and matrices in that order; empty groups are dropped.
    pub fn standard(scalars: usize, vectors: usize, matrices: usize) -> Self {
        Self::new(
            [(0, scalars), (1, vectors), (2, matrices)]
                .into_iter()
                .filter(|&(_, m)| m > 0)
                .collect(),
        )
    }

    pub fn scalars(n: usize) -> Self {
        Self::new(vec![(0, n)])
    }

    pub fn groups(&self) -> &[(usize, usize)] {
        &self.groups
    }

    pub fn scaled(&self, factor: usize) -> Self {
        Self::new(self.groups.iter().map(|&(r, m)| (r, m * factor)).collect())
    }

    pub fn num_channels(&self) -> usize {
        self.groups.iter().map(|&(_, m)| m).sum()
    }

    pub fn width(&self, d: usize) -> usize {
        self.groups.iter().map(|&(r, m)| m * components(d, r)).sum()
    }

    pub fn count_rank(&self, rank: usize) -> usize {
        self.groups.iter().filter(|&&(r, _)| r == rank).map(|&(_, m)| m).sum()
    }

    pub fn channels(&self, d: usize) -> Vec<Channel> {
        let mut out = Vec::with_capacity(self.num_channels());
        let mut offset = 0;
        for &(rank, mult) in &self.groups {
            let size = components(d, rank);
            for _ in 0..mult {
                out.push(Channel { rank, offset, size });
                offset += size;
            }
        }
        out
    }
}

impl fmt::Display for ChannelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.groups.iter().map(|(r, m)| format!("{m}x{r}")).collect();
        write!(f, "{}", parts.join("+"))
    }
}

/// One (output channel, input channel, signature) triple, owning one radial
/// profile in the parameter vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Triple {
    pub out_channel: usize,
    pub in_channel: usize,
    pub signature: Signature,
}

#[derive(Clone, Copy, Debug)]
struct BasisEntry {
    dense: u32,
    param: u32,
    weight: f64,
}

/// The fixed linear map from stacked radial profiles to the dense convolution
/// weight `[out_width][in_width][voxel]`. Its transpose carries weight
/// gradients back to the profiles.
#[derive(Clone, Debug)]
pub struct KernelBasis {
    in_spec: ChannelSpec,
    out_spec: ChannelSpec,
    dim: usize,
    support: usize,
    samples: usize,
    voxels: usize,
    in_width: usize,
    out_width: usize,
    triples: Vec<Triple>,
    entries: Vec<BasisEntry>,
    mask: Vec<bool>,
}

impl KernelBasis {
    pub fn new(
        in_spec: &ChannelSpec,
        out_spec: &ChannelSpec,
        dim: usize,
        support: usize,
        samples: usize,
    ) -> Result<Self> {
        let interp = build_interpolation(support, samples, dim)?;
        let offsets = kernel_offsets(dim, support);
        let voxels = offsets.len();
        let in_width = in_spec.width(dim);
        let out_width = out_spec.width(dim);
        let dense_len = out_width * in_width * voxels;
        if dense_len > u32::MAX as usize {
            return Err(Error::Build("dense kernel too large".into()));
        }

        let mut triples = Vec::new();
        let mut entries = Vec::new();
        let mut idx = Vec::new();
        for (co, out_ch) in out_spec.channels(dim).iter().enumerate() {
            for (ci, in_ch) in in_spec.channels(dim).iter().enumerate() {
                let rank = out_ch.rank + in_ch.rank;
                idx.resize(rank, 0);
                let ncomp = components(dim, rank);
                for signature in enumerate_signatures(rank) {
                    let t = triples.len();
                    for (v, x) in offsets.iter().enumerate() {
                        let row = interp.row(v);
                        for c in 0..ncomp {
                            tensor_index(c, dim, rank, &mut idx);
                            let tv = signature.template(&idx, x);
                            if tv == 0.0 {
                                continue;
                            }
                            let o = out_ch.offset + c / in_ch.size;
                            let i = in_ch.offset + c % in_ch.size;
                            let dense = ((o * in_width + i) * voxels + v) as u32;
                            for (n, &w) in row.iter().enumerate() {
                                if w != 0.0 {
                                    entries.push(BasisEntry {
                                        dense,
                                        param: (t * samples + n) as u32,
                                        weight: tv * w,
                                    });
                                }
                            }
                        }
                    }
                    triples.push(Triple {
                        out_channel: co,
                        in_channel: ci,
                        signature,
                    });
                }
            }
        }
        entries.sort_by_key(|e| (e.dense, e.param));
        let mut mask = vec![false; dense_len];
        for e in &entries {
            mask[e.dense as usize] = true;
        }
        Ok(Self {
            in_spec: in_spec.clone(),
            out_spec: out_spec.clone(),
            dim,
            support,
            samples,
            voxels,
            in_width,
            out_width,
            triples,
            entries,
            mask,
        })
    }

    pub fn in_spec(&self) -> &ChannelSpec {
        &self.in_spec
    }

    pub fn out_spec(&self) -> &ChannelSpec {
        &self.out_spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn support(&self) -> usize {
        self.support
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn voxels(&self) -> usize {
        self.voxels
    }

    pub fn in_width(&self) -> usize {
        self.in_width
    }

    pub fn out_width(&self) -> usize {
        self.out_width
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn num_params(&self) -> usize {
        self.triples.len() * self.samples
    }

    pub fn dense_len(&self) -> usize {
        self.out_width * self.in_width * self.voxels
    }

    /// Dense weight entries that some template can reach.
    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn assemble<T: Real>(&self, params: &[T]) -> Result<Vec<T>> {
        if params.len() != self.num_params() {
            return Err(Error::ParameterShape(format!(
                "expected {} profile samples, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut dense = vec![T::zero(); self.dense_len()];
        for e in &self.entries {
            let w = &mut dense[e.dense as usize];
            *w = *w + T::lit(e.weight) * params[e.param as usize];
        }
        Ok(dense)
    }

    /// Transpose of [`assemble`](Self::assemble).
    pub fn assemble_transpose<T: Real>(&self, dense_grad: &[T]) -> Vec<T> {
        let mut grad = vec![T::zero(); self.num_params()];
        for e in &self.entries {
            let g = &mut grad[e.param as usize];
            *g = *g + T::lit(e.weight) * dense_grad[e.dense as usize];
        }
        grad
    }

    /// Uniform in `[-b, b]` with `b = 1/√(in_width · s^d)`.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vec<f64> {
        let fan_in = (self.in_width * self.voxels).max(1) as f64;
        let b = 1.0 / fan_in.sqrt();
        (0..self.num_params()).map(|_| rng.random_range(-b..=b)).collect()
    }
}

/// A dense weight `[out_width][in_width][voxel]` built from moment kernels.
#[derive(Clone, Debug)]
pub struct BlockKernel<T> {
    pub in_spec: ChannelSpec,
    pub out_spec: ChannelSpec,
    pub dim: usize,
    pub support: usize,
    pub weights: Vec<T>,
}

impl<T: Real> BlockKernel<T> {
    pub fn voxels(&self) -> usize {
        self.support.pow(self.dim as u32)
    }

    pub fn in_width(&self) -> usize {
        self.in_spec.width(self.dim)
    }

    pub fn out_width(&self) -> usize {
        self.out_spec.width(self.dim)
    }

    /// The block between two channels as a rank `r_out + r_in` kernel.
    pub fn block(&self, out_channel: usize, in_channel: usize) -> TensorField<T> {
        let outs = self.out_spec.channels(self.dim);
        let ins = self.in_spec.channels(self.dim);
        let (oc, ic) = (outs[out_channel], ins[in_channel]);
        let shape = GridShape::cube(self.dim, self.support);
        let voxels = self.voxels();
        let in_w = self.in_width();
        let support = self.support;
        TensorField::from_fn(shape, oc.rank + ic.rank, |c, grid| {
            let v = grid.iter().fold(0, |acc, &i| acc * support + i);
            let o = oc.offset + c / ic.size;
            let i = ic.offset + c % ic.size;
            self.weights[(o * in_w + i) * voxels + v]
        })
    }
}

/// Builds the dense weight from one profile per triple, in the order of
/// [`KernelBasis::triples`].
pub fn build_block_kernel<T: Real>(
    in_spec: &ChannelSpec,
    out_spec: &ChannelSpec,
    dim: usize,
    profiles: &[RadialProfile<T>],
    support: usize,
) -> Result<BlockKernel<T>> {
    let samples = profiles.first().map_or(0, RadialProfile::len);
    if profiles.iter().any(|p| p.len() != samples) {
        return Err(Error::ParameterShape("profiles differ in sample count".into()));
    }
    let basis = KernelBasis::new(in_spec, out_spec, dim, support, samples.max(1))?;
    if profiles.len() != basis.triples().len() {
        return Err(Error::ParameterShape(format!(
            "expected {} profiles (one per channel pair and signature), got {}",
            basis.triples().len(),
            profiles.len()
        )));
    }
    let params: Vec<T> = profiles.iter().flat_map(|p| p.samples.iter().copied()).collect();
    Ok(BlockKernel {
        in_spec: in_spec.clone(),
        out_spec: out_spec.clone(),
        dim,
        support,
        weights: basis.assemble(&params)?,
    })
}

/// Telephone numbers: `a(r) = a(r-1) + (r-1) a(r-2)`.
pub fn signature_count(rank: usize) -> usize {
    let (mut a, mut b) = (1usize, 1usize);
    for r in 2..=rank {
        let next = b + (r - 1) * a;
        a = b;
        b = next;
    }
    b
}

/// Kernel parameters of one layer: one profile of `samples` values per
/// channel pair and signature. Bias parameters are counted by [`bias_count`].
pub fn param_count(in_spec: &ChannelSpec, out_spec: &ChannelSpec, samples: usize) -> usize {
    let mut total = 0;
    for &(ro, mo) in out_spec.groups() {
        for &(ri, mi) in in_spec.groups() {
            total += mo * mi * signature_count(ro + ri);
        }
    }
    total * samples
}

/// One bias per scalar channel and one identity multiplier per matrix channel.
pub fn bias_count(out_spec: &ChannelSpec) -> usize {
    out_spec.count_rank(0) + out_spec.count_rank(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{act_on_field, enumerate_hyperoctahedral};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn signature_counts() {
        let counts: Vec<usize> = (0..=4).map(|r| enumerate_signatures(r).len()).collect();
        assert_eq!(counts, vec![1, 1, 2, 4, 10]);
        for r in 0..=7 {
            assert_eq!(enumerate_signatures(r).len(), signature_count(r));
        }
        assert_eq!(enumerate_signatures(0), vec![Signature::empty(0)]);
    }

    #[test]
    fn rank3_and_rank4_order() {
        let s3: Vec<String> = enumerate_signatures(3).iter().map(|s| s.to_string()).collect();
        assert_eq!(s3, ["{}", "{{1,2}}", "{{1,3}}", "{{2,3}}"]);
        let s4: Vec<String> = enumerate_signatures(4).iter().map(|s| s.to_string()).collect();
        assert_eq!(
            s4,
            [
                "{}",
                "{{1,2}}",
                "{{1,3}}",
                "{{1,4}}",
                "{{2,3}}",
                "{{2,4}}",
                "{{3,4}}",
                "{{1,2},{3,4}}",
                "{{1,3},{2,4}}",
                "{{1,4},{2,3}}"
            ]
        );
    }

    #[test]
    fn signature_rejects_overlap() {
        assert!(Signature::new(4, vec![(0, 1), (1, 2)]).is_err());
        assert!(Signature::new(2, vec![(0, 2)]).is_err());
    }

    #[test]
    fn interpolation_examples() {
        let m = build_interpolation(3, 3, 2).unwrap();
        let ones = m.apply(&RadialProfile::new(vec![1.0, 1.0, 1.0]));
        assert!(ones.iter().all(|&v| (v - 1.0f64).abs() < 1e-15));

        let bump = m.apply(&RadialProfile::new(vec![0.0, 1.0, 0.0]));
        let corner = 2.0 - 2f64.sqrt();
        let expected = [corner, 1.0, corner, 1.0, 0.0, 1.0, corner, 1.0, corner];
        for (a, b) in bump.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for v in 0..m.voxels() {
            let row = m.row(v);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().filter(|&&w| w != 0.0).count() <= 2);
        }
    }

    #[test]
    fn interpolation_guard() {
        assert!(matches!(
            build_interpolation(3, 2, 3),
            Err(Error::InsufficientSamples { needed: 3, .. })
        ));
        assert!(build_interpolation(3, 3, 3).is_ok());
        assert!(build_interpolation(4, 5, 2).is_err());
        assert!(build_interpolation(1, 1, 3).is_ok());
    }

    fn kernel(d: usize, sig: Signature, samples: Vec<f64>) -> TensorField<f64> {
        assemble_moment_kernel(&MomentKernel {
            dim: d,
            signature: sig,
            profile: RadialProfile::new(samples),
            support: 3,
        })
        .unwrap()
    }

    #[test]
    fn assembly_examples() {
        // vector kernel vanishes at the origin
        let k = kernel(2, Signature::empty(1), vec![0.7, 1.0, 2.0]);
        assert_eq!(k.tensor_at(4), vec![0.0, 0.0]);

        // identity term
        let k = kernel(2, Signature::new(2, vec![(0, 1)]).unwrap(), vec![1.0; 3]);
        for p in 0..9 {
            assert_eq!(k.tensor_at(p), vec![1.0, 0.0, 0.0, 1.0]);
        }

        // x x^T at offset (1, 0), which is voxel (2, 1)
        let k = kernel(2, Signature::empty(2), vec![0.0, 1.0, 0.0]);
        assert_eq!(k.tensor_at(7), vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn assembled_kernels_obey_transformation_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for d in 2..=3 {
            let group = enumerate_hyperoctahedral(d);
            for rank in 0..=3 {
                for sig in enumerate_signatures(rank) {
                    let samples = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
                    let k = kernel(d, sig, samples);
                    for g in &group {
                        let moved = act_on_field(g, &k).unwrap();
                        assert!(moved.max_abs_diff(&k) < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn parity_follows_rank() {
        for rank in 0..=4 {
            for sig in enumerate_signatures(rank) {
                let k = kernel(2, sig, vec![0.3, -1.2, 0.8]);
                let n = k.num_components();
                let sign = if rank % 2 == 0 { 1.0 } else { -1.0 };
                for c in 0..n {
                    let comp = k.component(c);
                    for v in 0..9 {
                        assert!((comp[8 - v] - sign * comp[v]).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn assembly_is_linear() {
        let a = kernel(3, Signature::new(3, vec![(0, 2)]).unwrap(), vec![0.5, -0.25, 1.5]);
        let b = kernel(3, Signature::new(3, vec![(0, 2)]).unwrap(), vec![1.5, -0.75, 4.5]);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((3.0 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn block_profile_counts() {
        let s = ChannelSpec::scalars(1);
        let v = ChannelSpec::new(vec![(1, 1)]);
        let m = ChannelSpec::new(vec![(2, 1)]);
        let count = |a: &ChannelSpec, b: &ChannelSpec| KernelBasis::new(a, b, 2, 3, 3).unwrap().triples().len();
        assert_eq!(count(&s, &s), 1);
        assert_eq!(count(&v, &v), 2);
        assert_eq!(count(&s, &m), 2);

        let k = build_block_kernel(&s, &m, 2, &vec![RadialProfile::new(vec![1.0; 3]); 2], 3).unwrap();
        assert_eq!(k.out_width(), 4);
        assert!(build_block_kernel(&s, &m, 2, &[RadialProfile::new(vec![1.0; 3])], 3).is_err());
    }

    #[test]
    fn scalar_block_is_isotropic() {
        let s = ChannelSpec::scalars(1);
        let k = build_block_kernel(&s, &s, 2, &[RadialProfile::new(vec![0.2, 0.5, 0.9])], 3).unwrap();
        let w = &k.weights;
        assert_eq!(w[1], w[3]);
        assert_eq!(w[1], w[5]);
        assert_eq!(w[0], w[8]);
    }

    #[test]
    fn block_reshape_matches_moment_kernel() {
        let vs = ChannelSpec::new(vec![(1, 1)]);
        let ms = ChannelSpec::new(vec![(2, 1)]);
        let basis = KernelBasis::new(&vs, &ms, 3, 3, 3).unwrap();
        let profiles: Vec<RadialProfile<f64>> = (0..basis.triples().len())
            .map(|t| RadialProfile::new(vec![0.1 * t as f64, 1.0, -0.5]))
            .collect();
        let bk = build_block_kernel(&vs, &ms, 3, &profiles, 3).unwrap();
        let mut expected = TensorField::zeros(GridShape::cube(3, 3), 3);
        for (t, p) in basis.triples().iter().zip(&profiles) {
            let k = assemble_moment_kernel(&MomentKernel {
                dim: 3,
                signature: t.signature.clone(),
                profile: p.clone(),
                support: 3,
            })
            .unwrap();
            for (e, v) in expected.data_mut().iter_mut().zip(k.data()) {
                *e += v;
            }
        }
        assert!(bk.block(0, 0).max_abs_diff(&expected) < 1e-14);
    }

    #[test]
    fn transpose_is_adjoint() {
        let spec = ChannelSpec::standard(1, 1, 1);
        let basis = KernelBasis::new(&spec, &spec, 2, 3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p: Vec<f64> = (0..basis.num_params()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g: Vec<f64> = (0..basis.dense_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs: f64 = basis.assemble(&p).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = basis.assemble_transpose(&g).iter().zip(&p).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn param_counts() {
        let s = ChannelSpec::scalars(1);
        let v = ChannelSpec::new(vec![(1, 1)]);
        assert_eq!(param_count(&s, &s, 3), 3);
        assert_eq!(param_count(&v, &v, 3), 6);

        // brute force over every channel pair of a 4s+4v+4m layer
        let spec = ChannelSpec::standard(4, 4, 4);
        let chans = spec.channels(2);
        let brute: usize = chans
            .iter()
            .flat_map(|o| chans.iter().map(move |i| enumerate_signatures(o.rank + i.rank).len()))
            .sum::<usize>()
            * 3;
        assert_eq!(brute, 1296);
        assert_eq!(param_count(&spec, &spec, 3), brute);
        assert_eq!(KernelBasis::new(&spec, &spec, 2, 3, 3).unwrap().num_params(), brute);
        assert_eq!(bias_count(&spec), 8);
    }
}
