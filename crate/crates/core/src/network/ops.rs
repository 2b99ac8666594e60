//! Slice-level forward and adjoint kernels shared by the layer API and the tape.
//!
//! Feature maps are `[batch][width][pixel]`, pixels row-major.

use rayon::prelude::*;

use crate::geometry::GridShape;
use crate::kernels::Channel;
use crate::scalar::Real;

/// `√(ln φ)`: multiplying a standard normal log-magnitude by this gives a
/// lognormal magnitude of unit variance.
pub fn lognormal_unit_scale() -> f64 {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    phi.ln().sqrt()
}

pub const VARIANCE_CLAMP: f64 = 1e-8;

/// Same-size cross-correlation geometry with zero padding.
#[derive(Clone, Debug)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_width: usize,
    pub out_width: usize,
    pub shape: GridShape,
    pub support: usize,
}

/// Contiguous runs along the last axis where a kernel offset stays inside the
/// grid: `(out_start, in_start)` pairs sharing one run length.
struct Segments {
    len: usize,
    starts: Vec<(usize, usize)>,
}

fn segments(shape: &GridShape, support: usize) -> Vec<Segments> {
    let d = shape.ndim();
    let dims = shape.dims();
    let strides = shape.strides();
    let half = (support / 2) as i64;
    let kshape = GridShape::cube(d, support);
    let mut u = vec![0; d];
    (0..kshape.numel())
        .map(|v| {
            kshape.unravel(v, &mut u);
            let off: Vec<i64> = u.iter().map(|&k| k as i64 - half).collect();
            // valid output range per axis
            let ranges: Vec<(i64, i64)> = (0..d)
                .map(|a| {
                    let n = dims[a] as i64;
                    ((-off[a]).max(0), (n - off[a]).min(n))
                })
                .collect();
            if ranges.iter().any(|&(lo, hi)| lo >= hi) {
                return Segments {
                    len: 0,
                    starts: Vec::new(),
                };
            }
            let last = d - 1;
            let len = (ranges[last].1 - ranges[last].0) as usize;
            let outer: usize = ranges[..last].iter().map(|&(lo, hi)| (hi - lo) as usize).product();
            let mut starts = Vec::with_capacity(outer);
            let mut pos: Vec<i64> = ranges[..last].iter().map(|r| r.0).collect();
            for _ in 0..outer {
                let mut o = ranges[last].0 as usize * strides[last];
                let mut i = (ranges[last].0 + off[last]) as usize * strides[last];
                for a in 0..last {
                    o += pos[a] as usize * strides[a];
                    i += (pos[a] + off[a]) as usize * strides[a];
                }
                starts.push((o, i));
                for a in (0..last).rev() {
                    pos[a] += 1;
                    if pos[a] < ranges[a].1 {
                        break;
                    }
                    pos[a] = ranges[a].0;
                }
            }
            Segments { len, starts }
        })
        .collect()
}

#[inline]
fn axpy<T: Real>(w: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y = *y + w * x;
    }
}

#[inline]
fn axpy_wide<T: Real>(w: f64, x: &[T], y: &mut [f64]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += w * x.as_f64();
    }
}

#[inline]
fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    x.iter().zip(y).fold(T::zero(), |acc, (&a, &b)| acc + a * b)
}

/// `out[b][o][x] = Σ_i Σ_u w[o][i][u] · in[b][i][x + u]`, zero outside the grid.
///
/// Forward reductions accumulate in `f64` and round once. A group view sums
/// the same terms in another order; with one final rounding an `f32` model
/// still gives the same values in every view, which the magnitude
/// nonlinearity would otherwise amplify layer by layer.
pub fn conv_forward_raw<T: Real>(g: &ConvGeom, input: &[T], weights: &[T]) -> Vec<T> {
    let npix = g.shape.numel();
    let voxels = g.support.pow(g.shape.ndim() as u32);
    let segs = segments(&g.shape, g.support);
    let mut out = vec![T::zero(); g.batch * g.out_width * npix];
    out.par_chunks_mut(npix).enumerate().for_each(|(bo, row)| {
        let (b, o) = (bo / g.out_width, bo % g.out_width);
        let mut acc = vec![0.0f64; npix];
        for i in 0..g.in_width {
            let src = &input[(b * g.in_width + i) * npix..][..npix];
            let wrow = &weights[(o * g.in_width + i) * voxels..][..voxels];
            for (w, seg) in wrow.iter().zip(&segs) {
                if *w == T::zero() {
                    continue;
                }
                for &(os, is) in &seg.starts {
                    axpy_wide(w.as_f64(), &src[is..is + seg.len], &mut acc[os..os + seg.len]);
                }
            }
        }
        for (y, a) in row.iter_mut().zip(acc) {
            *y = T::lit(a);
        }
    });
    out
}

pub fn conv_grad_input<T: Real>(g: &ConvGeom, grad_out: &[T], weights: &[T]) -> Vec<T> {
    let npix = g.shape.numel();
    let voxels = g.support.pow(g.shape.ndim() as u32);
    let segs = segments(&g.shape, g.support);
    let mut grad = vec![T::zero(); g.batch * g.in_width * npix];
    grad.par_chunks_mut(npix).enumerate().for_each(|(bi, row)| {
        let (b, i) = (bi / g.in_width, bi % g.in_width);
        for o in 0..g.out_width {
            let go = &grad_out[(b * g.out_width + o) * npix..][..npix];
            let wrow = &weights[(o * g.in_width + i) * voxels..][..voxels];
            for (w, seg) in wrow.iter().zip(&segs) {
                if *w == T::zero() {
                    continue;
                }
                for &(os, is) in &seg.starts {
                    axpy(*w, &go[os..os + seg.len], &mut row[is..is + seg.len]);
                }
            }
        }
    });
    grad
}

/// Weight gradient; entries outside `mask` are left at zero.
pub fn conv_grad_weight<T: Real>(g: &ConvGeom, input: &[T], grad_out: &[T], mask: Option<&[bool]>) -> Vec<T> {
    let npix = g.shape.numel();
    let voxels = g.support.pow(g.shape.ndim() as u32);
    let segs = segments(&g.shape, g.support);
    let mut grad = vec![T::zero(); g.out_width * g.in_width * voxels];
    grad.par_chunks_mut(voxels).enumerate().for_each(|(oi, wrow)| {
        let (o, i) = (oi / g.in_width, oi % g.in_width);
        for (v, (w, seg)) in wrow.iter_mut().zip(&segs).enumerate() {
            if let Some(m) = mask {
                if !m[oi * voxels + v] {
                    continue;
                }
            }
            let mut acc = T::zero();
            for b in 0..g.batch {
                let go = &grad_out[(b * g.out_width + o) * npix..][..npix];
                let src = &input[(b * g.in_width + i) * npix..][..npix];
                for &(os, is) in &seg.starts {
                    acc = acc + dot(&go[os..os + seg.len], &src[is..is + seg.len]);
                }
            }
            *w = acc;
        }
    });
    grad
}

/// Row-to-parameter map for biases: scalar rows get their own parameter, the
/// diagonal rows of a matrix channel share one, everything else gets none.
pub fn equivariant_bias_layout(channels: &[Channel], d: usize) -> (Vec<Option<usize>>, usize) {
    let width = channels.last().map_or(0, |c| c.offset + c.size);
    let mut layout = vec![None; width];
    let mut next = 0;
    for ch in channels {
        match ch.rank {
            0 => {
                layout[ch.offset] = Some(next);
                next += 1;
            }
            2 => {
                for i in 0..d {
                    layout[ch.offset + i * d + i] = Some(next);
                }
                next += 1;
            }
            _ => {}
        }
    }
    (layout, next)
}

pub fn add_bias_raw<T: Real>(data: &mut [T], layout: &[Option<usize>], bias: &[T], batch: usize, npix: usize) {
    let width = layout.len();
    for b in 0..batch {
        for (row, slot) in layout.iter().enumerate() {
            if let Some(k) = *slot {
                let v = bias[k];
                for x in &mut data[(b * width + row) * npix..][..npix] {
                    *x = *x + v;
                }
            }
        }
    }
}

pub fn bias_grad<T: Real>(grad: &[T], layout: &[Option<usize>], nbias: usize, batch: usize, npix: usize) -> Vec<T> {
    let width = layout.len();
    let mut out = vec![T::zero(); nbias];
    for b in 0..batch {
        for (row, slot) in layout.iter().enumerate() {
            if let Some(k) = *slot {
                let s: T = grad[(b * width + row) * npix..][..npix].iter().copied().sum();
                out[k] = out[k] + s;
            }
        }
    }
    out
}

/// Squared magnitude plus `eps`, per `(batch, channel, pixel)`.
fn magnitudes_sq<T: Real>(data: &[T], channels: &[Channel], width: usize, batch: usize, npix: usize, eps: T) -> Vec<T> {
    let mut out = vec![eps.as_f64(); batch * channels.len() * npix];
    for b in 0..batch {
        for (k, ch) in channels.iter().enumerate() {
            let dst = &mut out[(b * channels.len() + k) * npix..][..npix];
            for c in 0..ch.size {
                let src = &data[(b * width + ch.offset + c) * npix..][..npix];
                for (m, &x) in dst.iter_mut().zip(src) {
                    *m += x.as_f64() * x.as_f64();
                }
            }
        }
    }
    out.into_iter().map(T::lit).collect()
}

/// Rescales each tensor to magnitude `max(1, m)`, with `m = √(|x|² + eps)`.
pub fn magnitude_forward<T: Real>(data: &[T], channels: &[Channel], batch: usize, npix: usize, eps: T) -> Vec<T> {
    let width = data.len() / (batch * npix);
    let msq = magnitudes_sq(data, channels, width, batch, npix, eps);
    let mut out = data.to_vec();
    for b in 0..batch {
        for (k, ch) in channels.iter().enumerate() {
            let mags = &msq[(b * channels.len() + k) * npix..][..npix];
            for c in 0..ch.size {
                let row = &mut out[(b * width + ch.offset + c) * npix..][..npix];
                for (x, &m2) in row.iter_mut().zip(mags) {
                    let m = m2.sqrt();
                    if m <= T::one() {
                        *x = *x / m;
                    }
                }
            }
        }
    }
    out
}

pub fn magnitude_backward<T: Real>(
    input: &[T],
    grad_out: &[T],
    channels: &[Channel],
    batch: usize,
    npix: usize,
    eps: T,
) -> Vec<T> {
    let width = input.len() / (batch * npix);
    let msq = magnitudes_sq(input, channels, width, batch, npix, eps);
    let mut grad = grad_out.to_vec();
    for b in 0..batch {
        for (k, ch) in channels.iter().enumerate() {
            let mags = &msq[(b * channels.len() + k) * npix..][..npix];
            for p in 0..npix {
                let m2 = mags[p];
                let m = m2.sqrt();
                if m > T::one() {
                    continue;
                }
                let row = |c: usize| (b * width + ch.offset + c) * npix + p;
                let gx: T = (0..ch.size).map(|c| grad_out[row(c)] * input[row(c)]).sum();
                let m3 = m2 * m;
                for c in 0..ch.size {
                    let r = row(c);
                    grad[r] = grad_out[r] / m - input[r] * gx / m3;
                }
            }
        }
    }
    grad
}

/// What the log-magnitude batchnorm backward pass needs.
#[derive(Clone, Debug)]
pub struct LogNormSaved<T> {
    /// standardized log magnitude per `(batch, channel, pixel)`
    pub z: Vec<T>,
    /// `exp(l' - l)` per `(batch, channel, pixel)`
    pub factor: Vec<T>,
    pub sigma: Vec<T>,
    /// per channel: statistics came from this batch and the variance was not clamped
    pub coupled: Vec<bool>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Standardizes the log magnitude of every channel, scales it by
/// [`lognormal_unit_scale`] and rescales each tensor to the new magnitude.
/// `stats = None` uses batch statistics, otherwise the given running
/// `(mean, var)`.
pub fn lognorm_forward<T: Real>(
    data: &[T],
    channels: &[Channel],
    batch: usize,
    npix: usize,
    eps: T,
    stats: Option<(&[T], &[T])>,
) -> (Vec<T>, LogNormSaved<T>) {
    let width = data.len() / (batch * npix);
    let nch = channels.len();
    let msq = magnitudes_sq(data, channels, width, batch, npix, eps);
    let logm: Vec<T> = msq.iter().map(|&m2| m2.ln() / T::lit(2.0)).collect();
    let count = T::lit((batch * npix) as f64);
    let clamp = T::lit(VARIANCE_CLAMP);
    let s = T::lit(lognormal_unit_scale());

    let mut batch_mean = vec![T::zero(); nch];
    let mut batch_var = vec![T::zero(); nch];
    for k in 0..nch {
        let vals = (0..batch).flat_map(|b| logm[(b * nch + k) * npix..][..npix].iter());
        let mean = vals.clone().map(|l| l.as_f64()).sum::<f64>() / count.as_f64();
        let var = vals.map(|&l| (l.as_f64() - mean).powi(2)).sum::<f64>() / count.as_f64();
        batch_mean[k] = T::lit(mean);
        batch_var[k] = T::lit(var);
    }
    let (mean, var, coupled): (Vec<T>, Vec<T>, Vec<bool>) = match stats {
        None => (
            batch_mean.clone(),
            batch_var.iter().map(|&v| v.max(clamp)).collect(),
            batch_var.iter().map(|&v| v >= clamp).collect(),
        ),
        Some((m, v)) => (m.to_vec(), v.iter().map(|&v| v.max(clamp)).collect(), vec![false; nch]),
    };
    let sigma: Vec<T> = var.iter().map(|v| v.sqrt()).collect();

    let mut z = vec![T::zero(); logm.len()];
    let mut factor = vec![T::zero(); logm.len()];
    let mut out = data.to_vec();
    for b in 0..batch {
        for (k, ch) in channels.iter().enumerate() {
            let base = (b * nch + k) * npix;
            for p in 0..npix {
                let zz = (logm[base + p] - mean[k]) / sigma[k];
                z[base + p] = zz;
                factor[base + p] = (s * zz - logm[base + p]).exp();
            }
            for c in 0..ch.size {
                let row = &mut out[(b * width + ch.offset + c) * npix..][..npix];
                for (x, &f) in row.iter_mut().zip(&factor[base..base + npix]) {
                    *x = *x * f;
                }
            }
        }
    }
    (
        out,
        LogNormSaved {
            z,
            factor,
            sigma,
            coupled,
            batch_mean,
            batch_var,
        },
    )
}

pub fn lognorm_backward<T: Real>(
    input: &[T],
    grad_out: &[T],
    channels: &[Channel],
    batch: usize,
    npix: usize,
    eps: T,
    saved: &LogNormSaved<T>,
    batch_stats: bool,
) -> Vec<T> {
    let width = input.len() / (batch * npix);
    let nch = channels.len();
    let msq = magnitudes_sq(input, channels, width, batch, npix, eps);
    let s = T::lit(lognormal_unit_scale());
    let count = T::lit((batch * npix) as f64);

    // a = dL/dl' per element, using d out_c / d l' = out_c = x_c · factor
    let mut a = vec![T::zero(); msq.len()];
    for b in 0..batch {
        for (k, ch) in channels.iter().enumerate() {
            let base = (b * nch + k) * npix;
            for c in 0..ch.size {
                let r = (b * width + ch.offset + c) * npix;
                for p in 0..npix {
                    a[base + p] = a[base + p] + grad_out[r + p] * input[r + p] * saved.factor[base + p];
                }
            }
        }
    }

    let mut grad = vec![T::zero(); input.len()];
    for (k, ch) in channels.iter().enumerate() {
        let idx = |b: usize, p: usize| (b * nch + k) * npix + p;
        let (mut mean_a, mut mean_az) = (T::zero(), T::zero());
        if batch_stats {
            for b in 0..batch {
                for p in 0..npix {
                    mean_a = mean_a + a[idx(b, p)];
                    mean_az = mean_az + a[idx(b, p)] * saved.z[idx(b, p)];
                }
            }
            mean_a = mean_a / count;
            mean_az = mean_az / count;
            if !saved.coupled[k] {
                mean_az = T::zero();
            }
        }
        let scale = s / saved.sigma[k];
        for b in 0..batch {
            for p in 0..npix {
                let e = idx(b, p);
                let dl = if batch_stats {
                    scale * (a[e] - mean_a - saved.z[e] * mean_az)
                } else {
                    scale * a[e]
                } - a[e];
                let coef = dl / msq[e];
                for c in 0..ch.size {
                    let r = (b * width + ch.offset + c) * npix + p;
                    grad[r] = grad_out[r] * saved.factor[e] + coef * input[r];
                }
            }
        }
    }
    grad
}

/// Per-row standard batchnorm with affine parameters (baseline network).
#[derive(Clone, Debug)]
pub struct StdNormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

pub const STD_NORM_EPS: f64 = 1e-5;

pub fn std_norm_forward<T: Real>(
    data: &[T],
    gamma: &[T],
    beta: &[T],
    batch: usize,
    npix: usize,
    stats: Option<(&[T], &[T])>,
) -> (Vec<T>, StdNormSaved<T>) {
    let width = gamma.len();
    let count = T::lit((batch * npix) as f64);
    let mut batch_mean = vec![T::zero(); width];
    let mut batch_var = vec![T::zero(); width];
    for w in 0..width {
        let vals = (0..batch).flat_map(|b| data[(b * width + w) * npix..][..npix].iter());
        let m = vals.clone().copied().sum::<T>() / count;
        batch_mean[w] = m;
        batch_var[w] = vals.map(|&x| (x - m) * (x - m)).sum::<T>() / count;
    }
    let (mean, var) = match stats {
        None => (batch_mean.clone(), batch_var.clone()),
        Some((m, v)) => (m.to_vec(), v.to_vec()),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::one() / (v + T::lit(STD_NORM_EPS)).sqrt())
        .collect();
    let mut xhat = vec![T::zero(); data.len()];
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        for w in 0..width {
            let r = (b * width + w) * npix;
            for p in 0..npix {
                let h = (data[r + p] - mean[w]) * inv_std[w];
                xhat[r + p] = h;
                out[r + p] = gamma[w] * h + beta[w];
            }
        }
    }
    (
        out,
        StdNormSaved {
            xhat,
            inv_std,
            batch_mean,
            batch_var,
        },
    )
}

/// Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn std_norm_backward<T: Real>(
    grad_out: &[T],
    gamma: &[T],
    batch: usize,
    npix: usize,
    saved: &StdNormSaved<T>,
    batch_stats: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let width = gamma.len();
    let count = T::lit((batch * npix) as f64);
    let mut gg = vec![T::zero(); width];
    let mut gb = vec![T::zero(); width];
    for b in 0..batch {
        for w in 0..width {
            let r = (b * width + w) * npix;
            for p in 0..npix {
                gg[w] = gg[w] + grad_out[r + p] * saved.xhat[r + p];
                gb[w] = gb[w] + grad_out[r + p];
            }
        }
    }
    let mut gx = vec![T::zero(); grad_out.len()];
    for b in 0..batch {
        for w in 0..width {
            let r = (b * width + w) * npix;
            for p in 0..npix {
                let dxhat = grad_out[r + p] * gamma[w];
                gx[r + p] = if batch_stats {
                    saved.inv_std[w] * (dxhat - gamma[w] * (gb[w] + saved.xhat[r + p] * gg[w]) / count)
                } else {
                    saved.inv_std[w] * dxhat
                };
            }
        }
    }
    (gx, gg, gb)
}

/// Output extent of [`downsample_forward`] along one axis.
pub fn downsampled_extent(n: usize) -> usize {
    if n == 1 {
        1
    } else if n.is_multiple_of(2) {
        n / 2
    } else {
        n.div_ceil(2)
    }
}

pub fn downsampled_shape(shape: &GridShape) -> GridShape {
    GridShape::new(shape.dims().iter().map(|&n| downsampled_extent(n)).collect()).expect("extents stay positive")
}

/// Per-axis taps: even extents average adjacent pairs, odd extents keep every
/// other sample starting at 0, extent 1 is untouched.
fn axis_taps(n: usize) -> Vec<Vec<(usize, f64)>> {
    let m = downsampled_extent(n);
    (0..m)
        .map(|j| {
            if n == 1 {
                vec![(0, 1.0)]
            } else if n.is_multiple_of(2) {
                vec![(2 * j, 0.5), (2 * j + 1, 0.5)]
            } else {
                vec![(2 * j, 1.0)]
            }
        })
        .collect()
}

/// Input pixels feeding each output pixel; all taps of one output share the
/// same weight.
fn downsample_taps(shape: &GridShape) -> (Vec<Vec<usize>>, Vec<f64>) {
    let d = shape.ndim();
    let taps: Vec<_> = shape.dims().iter().map(|&n| axis_taps(n)).collect();
    let out_shape = downsampled_shape(shape);
    let strides = shape.strides();
    let mut idx = vec![0; d];
    (0..out_shape.numel())
        .map(|q| {
            out_shape.unravel(q, &mut idx);
            let mut acc = vec![(0usize, 1.0f64)];
            for a in 0..d {
                acc = acc
                    .iter()
                    .flat_map(|&(off, w)| {
                        let st = strides[a];
                        taps[a][idx[a]].iter().map(move |&(i, tw)| (off + i * st, w * tw))
                    })
                    .collect();
            }
            let w = acc[0].1;
            (acc.into_iter().map(|(i, _)| i).collect::<Vec<_>>(), w)
        })
        .unzip()
}

/// Positive and negative taps are summed separately in sorted order of
/// magnitude, so the result does not depend on how the grid axes are
/// labelled or on sign flips of components: the group commutes with it bit
/// for bit.
pub fn downsample_forward<T: Real>(data: &[T], rows: usize, shape: &GridShape) -> Vec<T> {
    let (taps, weights) = downsample_taps(shape);
    let npix = shape.numel();
    let mut out = Vec::with_capacity(rows * taps.len());
    let mut vals = Vec::with_capacity(8);
    for r in 0..rows {
        let src = &data[r * npix..][..npix];
        for (t, &w) in taps.iter().zip(&weights) {
            vals.clear();
            vals.extend(t.iter().map(|&i| src[i]));
            vals.sort_by(|a, b| a.abs().partial_cmp(&b.abs()).unwrap_or(std::cmp::Ordering::Equal));
            let pos = vals
                .iter()
                .filter(|v| **v > T::zero())
                .fold(T::zero(), |acc, &v| acc + v);
            let neg = vals
                .iter()
                .filter(|v| **v < T::zero())
                .fold(T::zero(), |acc, &v| acc - v);
            out.push((pos - neg) * T::lit(w));
        }
    }
    out
}

pub fn downsample_backward<T: Real>(grad_out: &[T], rows: usize, shape: &GridShape) -> Vec<T> {
    let (taps, weights) = downsample_taps(shape);
    let npix = shape.numel();
    let mut grad = vec![T::zero(); rows * npix];
    for r in 0..rows {
        let dst = &mut grad[r * npix..][..npix];
        for (q, (t, &w)) in taps.iter().zip(&weights).enumerate() {
            let g = grad_out[r * taps.len() + q] * T::lit(w);
            for &i in t {
                dst[i] = dst[i] + g;
            }
        }
    }
    grad
}

/// Spatial mean of every row.
pub fn pool_forward<T: Real>(data: &[T], rows: usize, npix: usize) -> Vec<T> {
    (0..rows)
        .map(|r| T::lit(data[r * npix..][..npix].iter().map(|v| v.as_f64()).sum::<f64>() / npix as f64))
        .collect()
}

pub fn pool_backward<T: Real>(grad_out: &[T], npix: usize) -> Vec<T> {
    let n = T::lit(npix as f64);
    grad_out
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g / n, npix))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_rules() {
        let even = GridShape::new(vec![4]).unwrap();
        assert_eq!(downsample_forward(&[1.0, 3.0, 5.0, 9.0], 1, &even), vec![2.0, 7.0]);
        let odd = GridShape::new(vec![3]).unwrap();
        assert_eq!(downsample_forward(&[1.0, 3.0, 5.0], 1, &odd), vec![1.0, 5.0]);
        let one = GridShape::new(vec![1]).unwrap();
        assert_eq!(downsample_forward(&[4.0], 1, &one), vec![4.0]);
    }

    #[test]
    fn downsample_backward_is_transpose() {
        let shape = GridShape::new(vec![4, 5]).unwrap();
        let x: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let out_len = downsampled_shape(&shape).numel();
        let g: Vec<f64> = (0..out_len).map(|i| (i as f64 * 1.3).cos()).collect();
        let lhs: f64 = downsample_forward(&x, 1, &shape)
            .iter()
            .zip(&g)
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = downsample_backward(&g, 1, &shape)
            .iter()
            .zip(&x)
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_adjoints() {
        let shape = GridShape::new(vec![4, 5]).unwrap();
        let g = ConvGeom {
            batch: 2,
            in_width: 3,
            out_width: 2,
            shape: shape.clone(),
            support: 3,
        };
        let f = |n: usize, s: f64| (0..n).map(|i| ((i as f64 + 1.0) * s).sin()).collect::<Vec<f64>>();
        let x = f(2 * 3 * 20, 0.71);
        let w = f(2 * 3 * 9, 1.37);
        let go = f(2 * 2 * 20, 0.53);
        let y = conv_forward_raw(&g, &x, &w);
        let lhs: f64 = y.iter().zip(&go).map(|(a, b)| a * b).sum();
        let gx = conv_grad_input(&g, &go, &w);
        let rhs: f64 = gx.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        let gw = conv_grad_weight(&g, &x, &go, None);
        let rhs: f64 = gw.iter().zip(&w).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let shape = GridShape::new(vec![3, 3, 4]).unwrap();
        let g = ConvGeom {
            batch: 1,
            in_width: 1,
            out_width: 1,
            shape: shape.clone(),
            support: 3,
        };
        let x: Vec<f64> = (0..36).map(|i| i as f64).collect();
        let w: Vec<f64> = (0..27).map(|i| (i as f64 - 13.0) / 7.0).collect();
        let y = conv_forward_raw(&g, &x, &w);
        let ks = GridShape::cube(3, 3);
        let mut idx = [0; 3];
        let mut u = [0; 3];
        for p in 0..36 {
            shape.unravel(p, &mut idx);
            let mut acc = 0.0;
            for v in 0..27 {
                ks.unravel(v, &mut u);
                let src: Vec<i64> = (0..3).map(|a| idx[a] as i64 + u[a] as i64 - 1).collect();
                if src.iter().zip(shape.dims()).all(|(&s, &n)| s >= 0 && s < n as i64) {
                    let s: Vec<usize> = src.iter().map(|&s| s as usize).collect();
                    acc += w[v] * x[shape.ravel(&s)];
                }
            }
            assert!((acc - y[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_constant() {
        let s = lognormal_unit_scale();
        assert!((s - 0.693_67).abs() < 1e-4);
        let e = (s * s).exp();
        assert!(((e - 1.0) * e - 1.0).abs() < 1e-12);
    }
}
