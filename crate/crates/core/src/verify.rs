//! Numerical checks of the symmetry claims: the group-fixed kernel subspace
//! computed by brute force, membership of moment kernels in it, and
//! end-to-end equivariance audits of whole models.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::components;
use crate::geometry::{enumerate_hyperoctahedral, FieldPermutation, GridShape, GroupElement};
use crate::network::{FieldStack, Model};
use crate::scalar::Real;

/// Largest system [`fixed_subspace_basis`] will solve.
pub const MAX_COLUMNS: usize = 10_000;

/// Pivots below this fraction of the largest pivot count as zero.
pub const PIVOT_THRESHOLD: f64 = 1e-10;

/// One sparse equation `sign · k[src] − k[dst] = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Constraint {
    pub src: usize,
    pub dst: usize,
    pub sign: f64,
}

/// Stacked equations `(ρ(g) − I) vec(k) = 0` for every group element, where
/// `ρ(g)` moves grid points and mixes components of a rank-`r` kernel on an
/// `s^d` grid. Each row has at most two nonzeros because `ρ(g)` is a signed
/// permutation.
#[derive(Clone, Debug)]
pub struct ConstraintSystem {
    pub rank: usize,
    pub dim: usize,
    pub support: usize,
    columns: usize,
    rows: Vec<Constraint>,
}

impl ConstraintSystem {
    pub fn new(rank: usize, dim: usize, support: usize, group: &[GroupElement]) -> Result<Self> {
        let shape = GridShape::cube(dim, support);
        let npix = shape.numel();
        let columns = npix * components(dim, rank);
        if columns > MAX_COLUMNS {
            return Err(Error::SizeGuard {
                columns,
                limit: MAX_COLUMNS,
            });
        }
        let mut rows = Vec::with_capacity(group.len() * columns);
        for g in group {
            if g.dim() != dim {
                return Err(Error::DimensionMismatch(format!(
                    "{}D group element for a {dim}D kernel",
                    g.dim()
                )));
            }
            let p = FieldPermutation::new(g, &shape, rank)?;
            for (c, (&cs, &sign)) in p.comp_src.iter().zip(&p.comp_sign).enumerate() {
                for (y, &ps) in p.pix_src.iter().enumerate() {
                    rows.push(Constraint {
                        src: cs * npix + ps,
                        dst: c * npix + y,
                        sign,
                    });
                }
            }
        }
        Ok(Self {
            rank,
            dim,
            support,
            columns,
            rows,
        })
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn rows(&self) -> &[Constraint] {
        &self.rows
    }

    /// `max |(ρ(g) − I) k|` over all rows.
    pub fn residual(&self, k: &[f64]) -> f64 {
        self.rows
            .iter()
            .map(|r| (r.sign * k[r.src] - k[r.dst]).abs())
            .fold(0.0, f64::max)
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Null space of a dense row-major `rows × cols` matrix by Gaussian
/// elimination with partial pivoting.
fn dense_null_space(mut a: Vec<Vec<f64>>, cols: usize) -> Vec<Vec<f64>> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut pivots: Vec<usize> = Vec::new();
    let mut largest = scale;
    let mut r = 0;
    for c in 0..cols {
        if r == a.len() {
            break;
        }
        let (best, val) = (r..a.len())
            .map(|i| (i, a[i][c].abs()))
            .fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if val <= PIVOT_THRESHOLD * largest.max(f64::MIN_POSITIVE) {
            continue;
        }
        largest = largest.max(val);
        a.swap(r, best);
        let p = a[r][c];
        for v in a[r].iter_mut() {
            *v /= p;
        }
        for i in 0..a.len() {
            if i != r && a[i][c] != 0.0 {
                let f = a[i][c];
                let (pivot_row, row) = if i < r {
                    let (lo, hi) = a.split_at_mut(r);
                    (&hi[0], &mut lo[i])
                } else {
                    let (lo, hi) = a.split_at_mut(i);
                    (&lo[r], &mut hi[0])
                };
                for (x, &y) in row.iter_mut().zip(pivot_row) {
                    *x -= f * y;
                }
            }
        }
        pivots.push(c);
        r += 1;
    }
    let mut is_pivot = vec![false; cols];
    pivots.iter().for_each(|&c| is_pivot[c] = true);
    (0..cols)
        .filter(|&f| !is_pivot[f])
        .map(|f| {
            let mut x = vec![0.0; cols];
            x[f] = 1.0;
            for (row, &pc) in pivots.iter().enumerate() {
                x[pc] = -a[row][f];
            }
            x
        })
        .collect()
}

/// Orthonormalizes in place (modified Gram-Schmidt), dropping dependent vectors.
fn orthonormalize(vs: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(vs.len());
    for mut v in vs {
        for _ in 0..2 {
            for b in &out {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > PIVOT_THRESHOLD {
            v.iter_mut().for_each(|x| *x /= n);
            out.push(v);
        }
    }
    out
}

/// Orthonormal basis of kernels left unchanged by every group element.
#[derive(Clone, Debug)]
pub struct FixedSubspace {
    pub columns: usize,
    pub basis: Vec<Vec<f64>>,
}

impl FixedSubspace {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }
}

/// Solves the constraint system. Columns coupled by some constraint are
/// grouped first (union-find), then each group is eliminated densely.
pub fn fixed_subspace_basis(rank: usize, dim: usize, support: usize, group: &[GroupElement]) -> Result<FixedSubspace> {
    let sys = ConstraintSystem::new(rank, dim, support, group)?;
    let n = sys.columns();
    let mut parent: Vec<usize> = (0..n).collect();
    for r in sys.rows() {
        let (a, b) = (find(&mut parent, r.src), find(&mut parent, r.dst));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); n];
    for c in 0..n {
        let root = find(&mut parent, c);
        blocks[root].push(c);
    }
    let mut block_rows: Vec<Vec<Constraint>> = vec![Vec::new(); n];
    for r in sys.rows() {
        if r.src == r.dst && r.sign == 1.0 {
            continue;
        }
        block_rows[find(&mut parent, r.dst)].push(*r);
    }
    let mut local = vec![usize::MAX; n];
    let mut basis = Vec::new();
    for (root, cols) in blocks.iter().enumerate() {
        if cols.is_empty() {
            continue;
        }
        for (i, &c) in cols.iter().enumerate() {
            local[c] = i;
        }
        let mut seen = std::collections::HashSet::new();
        let mut dense: Vec<Vec<f64>> = Vec::new();
        for r in &block_rows[root] {
            let key = (r.src, r.dst, r.sign.to_bits());
            if !seen.insert(key) {
                continue;
            }
            let mut row = vec![0.0; cols.len()];
            row[local[r.src]] += r.sign;
            row[local[r.dst]] -= 1.0;
            dense.push(row);
        }
        let null = orthonormalize(dense_null_space(dense, cols.len()));
        for v in null {
            let mut full = vec![0.0; n];
            for (i, &c) in cols.iter().enumerate() {
                full[c] = v[i];
            }
            basis.push(full);
        }
    }
    Ok(FixedSubspace { columns: n, basis })
}

/// Number of grid-point orbits of an `s^d` grid under `group`.
pub fn orbit_count(dim: usize, support: usize, group: &[GroupElement]) -> Result<usize> {
    let shape = GridShape::cube(dim, support);
    let mut parent: Vec<usize> = (0..shape.numel()).collect();
    for g in group {
        let p = FieldPermutation::new(g, &shape, 0)?;
        for (y, &src) in p.pix_src.iter().enumerate() {
            let (a, b) = (find(&mut parent, y), find(&mut parent, src));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    Ok((0..shape.numel()).filter(|&i| find(&mut parent, i) == i).count())
}

/// ℓ₂ distance from `kernel` to its projection onto the subspace.
pub fn check_membership(kernel: &[f64], basis: &FixedSubspace) -> Result<f64> {
    if kernel.len() != basis.columns {
        return Err(Error::Shape(format!(
            "kernel has {} entries, subspace lives in {}",
            kernel.len(),
            basis.columns
        )));
    }
    let mut r = kernel.to_vec();
    for b in &basis.basis {
        let d: f64 = r.iter().zip(b).map(|(x, y)| x * y).sum();
        r.iter_mut().zip(b).for_each(|(x, y)| *x -= d * y);
    }
    Ok(r.iter().map(|x| x * x).sum::<f64>().sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub group_element_index: usize,
    pub layer: String,
    pub deviation: f64,
}

/// Per group element and per layer deviations of an audit.
#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceReport {
    pub rows: Vec<ReportRow>,
    pub tolerance: f64,
}

impl EquivarianceReport {
    pub fn max_deviation(&self) -> f64 {
        self.rows.iter().map(|r| r.deviation).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.deviation <= self.tolerance)
    }

    /// Largest deviation of the model output for each group element.
    pub fn output_deviations(&self) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.layer == "output")
            .map(|r| r.deviation)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("group_element_index,layer,deviation\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{:e}", r.group_element_index, r.layer, r.deviation);
        }
        s
    }

    pub fn summary(&self) -> String {
        let elements = self
            .rows
            .iter()
            .map(|r| r.group_element_index)
            .max()
            .map_or(0, |m| m + 1);
        format!(
            "group elements: {elements}\nmax deviation: {:e}\ntolerance: {:e}\nresult: {}\n",
            self.max_deviation(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Relative deviation `max|a − b| / max(1, max|b|)`.
pub fn deviation<T: Real>(a: &FieldStack<T>, reference: &FieldStack<T>) -> f64 {
    a.max_abs_diff(reference) / reference.max_abs().max(1.0)
}

/// Runs the model on every signed-permutation view of `input` and compares
/// each layer and the output with the transformed reference. Pooled heads
/// live on a single-pixel grid, so the same comparison covers invariant
/// scores, vector columns and per-pixel matrices.
pub fn audit_model<T: Real>(model: &Model<T>, input: &FieldStack<T>, tolerance: f64) -> Result<EquivarianceReport> {
    let dims = input.shape().dims();
    if dims.iter().any(|&n| n != dims[0]) {
        return Err(Error::Shape(format!(
            "audit needs a square or cubic grid, got {dims:?}"
        )));
    }
    let (out, layers) = model.predict_layers(input)?;
    let group = enumerate_hyperoctahedral(input.dim());
    let per_element: Vec<Vec<ReportRow>> = group
        .par_iter()
        .enumerate()
        .map(|(gi, g)| -> Result<Vec<ReportRow>> {
            let (o, ls) = model.predict_layers(&input.act(g)?)?;
            let mut rows = Vec::with_capacity(ls.len() + 1);
            for (li, (l, reference)) in ls.iter().zip(&layers).enumerate() {
                rows.push(ReportRow {
                    group_element_index: gi,
                    layer: format!("layer{}", li + 1),
                    deviation: deviation(l, &reference.act(g)?),
                });
            }
            rows.push(ReportRow {
                group_element_index: gi,
                layer: "output".into(),
                deviation: deviation(&o, &out.act(g)?),
            });
            Ok(rows)
        })
        .collect::<Result<_>>()?;
    Ok(EquivarianceReport {
        rows: per_element.into_iter().flatten().collect(),
        tolerance,
    })
}

/// Output deviation under interpolated rotations by each angle (radians).
/// Diagnostic only: the grid has no exact symmetry away from quarter turns.
pub fn approx_equivariance_curve<T: Real>(model: &Model<T>, input: &FieldStack<T>, angles: &[f64]) -> Result<Vec<f64>> {
    if input.dim() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "rotation curves need a 2D input, got {}D",
            input.dim()
        )));
    }
    let out = model.predict(input)?;
    angles
        .iter()
        .map(|&a| {
            let r = GroupElement::rotation_2d(a);
            let y = model.predict(&input.act_approx(&r))?;
            Ok(deviation(&y, &out.act_approx(&r)))
        })
        .collect()
}
