//! Feature stacks and the equivariant layers built on them.

pub mod model;
pub mod ops;

pub use model::{build_backbone, build_baseline, Arch, ArchConfig, HeadKind, Model, Trace, NUM_CLASSES};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::geometry::{act_on_field_approx, FieldPermutation, GridShape, GroupElement, TensorField};
use crate::kernels::{bias_count, BlockKernel, Channel, ChannelSpec};
use crate::scalar::{cast_vec, Real};

/// A batch of channel stacks on one grid, laid out `[batch][width][pixel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldStack<T> {
    shape: GridShape,
    spec: ChannelSpec,
    batch: usize,
    data: Vec<T>,
}

impl<T: Real> FieldStack<T> {
    pub fn new(shape: GridShape, spec: ChannelSpec, batch: usize, data: Vec<T>) -> Result<Self> {
        let want = batch * spec.width(shape.ndim()) * shape.numel();
        if data.len() != want {
            return Err(Error::Shape(format!(
                "stack {spec} x{batch} on {:?} needs {want} values, got {}",
                shape.dims(),
                data.len()
            )));
        }
        Ok(Self {
            shape,
            spec,
            batch,
            data,
        })
    }

    pub fn zeros(shape: GridShape, spec: ChannelSpec, batch: usize) -> Self {
        let n = batch * spec.width(shape.ndim()) * shape.numel();
        Self {
            shape,
            spec,
            batch,
            data: vec![T::zero(); n],
        }
    }

    /// One batch item from per-channel fields, in channel order.
    pub fn from_fields(spec: ChannelSpec, fields: &[TensorField<T>]) -> Result<Self> {
        let first = fields.first().ok_or_else(|| Error::Shape("no fields given".into()))?;
        let shape = first.shape().clone();
        let d = shape.ndim();
        let channels = spec.channels(d);
        if channels.len() != fields.len() {
            return Err(Error::Shape(format!(
                "spec {spec} has {} channels, got {} fields",
                channels.len(),
                fields.len()
            )));
        }
        let mut data = Vec::with_capacity(spec.width(d) * shape.numel());
        for (ch, f) in channels.iter().zip(fields) {
            if f.shape() != &shape || f.rank() != ch.rank {
                return Err(Error::Shape("field does not match its channel".into()));
            }
            data.extend_from_slice(f.data());
        }
        Self::new(shape, spec, 1, data)
    }

    /// Concatenates batch items that share grid and spec.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("nothing to stack".into()))?;
        let mut data = Vec::with_capacity(items.iter().map(|s| s.data.len()).sum());
        for s in items {
            if s.shape != first.shape || s.spec != first.spec {
                return Err(Error::Shape("stacked items differ in grid or spec".into()));
            }
            data.extend_from_slice(&s.data);
        }
        let batch = items.iter().map(|s| s.batch).sum();
        Self::new(first.shape.clone(), first.spec.clone(), batch, data)
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn spec(&self) -> &ChannelSpec {
        &self.spec
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn dim(&self) -> usize {
        self.shape.ndim()
    }

    pub fn width(&self) -> usize {
        self.spec.width(self.dim())
    }

    pub fn npix(&self) -> usize {
        self.shape.numel()
    }

    pub fn channels(&self) -> Vec<Channel> {
        self.spec.channels(self.dim())
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

    pub fn item(&self, b: usize) -> Self {
        let n = self.width() * self.npix();
        Self {
            shape: self.shape.clone(),
            spec: self.spec.clone(),
            batch: 1,
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }

    pub fn channel(&self, b: usize, k: usize) -> TensorField<T> {
        let ch = self.channels()[k];
        let npix = self.npix();
        let start = (b * self.width() + ch.offset) * npix;
        TensorField::new(
            self.shape.clone(),
            ch.rank,
            self.data[start..start + ch.size * npix].to_vec(),
        )
        .expect("channel view matches its rank")
    }

    /// Pixel 0 of every channel of item `b`; the natural view of pooled stacks.
    pub fn tensors(&self, b: usize) -> Vec<Vec<T>> {
        let npix = self.npix();
        self.channels()
            .iter()
            .map(|ch| {
                (0..ch.size)
                    .map(|c| self.data[(b * self.width() + ch.offset + c) * npix])
                    .collect()
            })
            .collect()
    }

    /// Exact group action on every channel (signed permutations only).
    pub fn act(&self, r: &GroupElement) -> Result<Self> {
        let mut perms: HashMap<usize, FieldPermutation> = HashMap::new();
        let mut out = Self::zeros(self.shape.clone(), self.spec.clone(), self.batch);
        let npix = self.npix();
        let width = self.width();
        for ch in self.channels() {
            if let std::collections::hash_map::Entry::Vacant(e) = perms.entry(ch.rank) {
                e.insert(FieldPermutation::new(r, &self.shape, ch.rank)?);
            }
            let p = &perms[&ch.rank];
            for b in 0..self.batch {
                let s = (b * width + ch.offset) * npix;
                let len = ch.size * npix;
                p.apply(&self.data[s..s + len], &mut out.data[s..s + len]);
            }
        }
        Ok(out)
    }

    /// Interpolated action for arbitrary orthogonal `r`.
    pub fn act_approx(&self, r: &GroupElement) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for b in 0..self.batch {
            for k in 0..self.spec.num_channels() {
                data.extend(act_on_field_approx(r, &self.channel(b, k)).into_data());
            }
        }
        Self {
            shape: self.shape.clone(),
            spec: self.spec.clone(),
            batch: self.batch,
            data,
        }
    }

    pub fn cast<U: Real>(&self) -> FieldStack<U> {
        FieldStack {
            shape: self.shape.clone(),
            spec: self.spec.clone(),
            batch: self.batch,
            data: cast_vec(&self.data),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.as_f64().abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a.as_f64() - b.as_f64()).abs()))
    }
}

/// Biases allowed by equivariance: a value per scalar channel and an identity
/// multiplier per matrix channel. Odd ranks have none.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasParams<T> {
    spec: ChannelSpec,
    values: Vec<T>,
}

impl<T: Real> BiasParams<T> {
    pub fn zeros(spec: &ChannelSpec) -> Self {
        Self {
            spec: spec.clone(),
            values: vec![T::zero(); bias_count(spec)],
        }
    }

    pub fn new(spec: &ChannelSpec, values: Vec<T>) -> Result<Self> {
        if values.len() != bias_count(spec) {
            return Err(Error::ParameterShape(format!(
                "{spec} takes {} bias values, got {}",
                bias_count(spec),
                values.len()
            )));
        }
        Ok(Self {
            spec: spec.clone(),
            values,
        })
    }

    pub fn spec(&self) -> &ChannelSpec {
        &self.spec
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Running log-magnitude statistics for one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormState<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    /// weight kept on the old running value at each update
    pub momentum: T,
    pub mode: NormMode,
}

impl<T: Real> NormState<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: T::lit(0.9),
            mode: NormMode::Train,
        }
    }

    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T]) {
        let m = self.momentum;
        let clamp = T::lit(ops::VARIANCE_CLAMP);
        for k in 0..self.mean.len() {
            self.mean[k] = m * self.mean[k] + (T::one() - m) * batch_mean[k];
            self.var[k] = (m * self.var[k] + (T::one() - m) * batch_var[k]).max(clamp);
        }
    }

    pub fn cast<U: Real>(&self) -> NormState<U> {
        NormState {
            mean: cast_vec(&self.mean),
            var: cast_vec(&self.var),
            momentum: U::lit(self.momentum.as_f64()),
            mode: self.mode,
        }
    }
}

/// Same-size correlation with zero padding, then the equivariant bias.
pub fn conv_forward<T: Real>(x: &FieldStack<T>, k: &BlockKernel<T>, b: &BiasParams<T>) -> Result<FieldStack<T>> {
    if x.spec != k.in_spec || x.dim() != k.dim {
        return Err(Error::Shape(format!(
            "input {} in {}D does not match kernel input {} in {}D",
            x.spec,
            x.dim(),
            k.in_spec,
            k.dim
        )));
    }
    if k.support.is_multiple_of(2) {
        return Err(Error::Shape("kernel support must be odd".into()));
    }
    if b.spec != k.out_spec {
        return Err(Error::Shape("bias does not match kernel output".into()));
    }
    let geom = ops::ConvGeom {
        batch: x.batch,
        in_width: k.in_width(),
        out_width: k.out_width(),
        shape: x.shape.clone(),
        support: k.support,
    };
    let mut data = ops::conv_forward_raw(&geom, &x.data, &k.weights);
    let (layout, _) = ops::equivariant_bias_layout(&k.out_spec.channels(k.dim), k.dim);
    ops::add_bias_raw(&mut data, &layout, &b.values, x.batch, x.npix());
    FieldStack::new(x.shape.clone(), k.out_spec.clone(), x.batch, data)
}

/// Each tensor keeps its direction and gets magnitude `max(1, m)`,
/// `m = √(|x|² + eps)`.
pub fn magnitude_nonlinearity<T: Real>(x: &FieldStack<T>, eps: T) -> FieldStack<T> {
    let data = ops::magnitude_forward(&x.data, &x.channels(), x.batch, x.npix(), eps);
    FieldStack { data, ..x.clone() }
}

/// Batchnorm on the log magnitude of each channel. Train mode uses and
/// records batch statistics; eval mode uses the running ones.
pub fn lognorm_batchnorm<T: Real>(x: &FieldStack<T>, state: &mut NormState<T>, eps: T) -> Result<FieldStack<T>> {
    let nch = x.spec.num_channels();
    if state.mean.len() != nch || state.var.len() != nch {
        return Err(Error::Shape(format!(
            "norm state for {} channels, input has {nch}",
            state.mean.len()
        )));
    }
    let channels = x.channels();
    let data = match state.mode {
        NormMode::Train => {
            if x.batch * x.npix() < 2 {
                return Err(Error::Shape("batch statistics need at least two samples".into()));
            }
            let (data, saved) = ops::lognorm_forward(&x.data, &channels, x.batch, x.npix(), eps, None);
            state.update(&saved.batch_mean, &saved.batch_var);
            data
        }
        NormMode::Eval => {
            ops::lognorm_forward(
                &x.data,
                &channels,
                x.batch,
                x.npix(),
                eps,
                Some((&state.mean, &state.var)),
            )
            .0
        }
    };
    Ok(FieldStack { data, ..x.clone() })
}

/// Halves every axis: pair averages on even extents, every other sample on
/// odd ones. Extent-1 axes are left alone.
pub fn downsample2<T: Real>(x: &FieldStack<T>) -> FieldStack<T> {
    let rows = x.batch * x.width();
    let data = ops::downsample_forward(&x.data, rows, &x.shape);
    FieldStack {
        shape: ops::downsampled_shape(&x.shape),
        spec: x.spec.clone(),
        batch: x.batch,
        data,
    }
}

/// Spatial mean of every channel, as a stack on a single-pixel grid so the
/// group acts on it by component mixing alone. See [`FieldStack::tensors`].
pub fn pool_global<T: Real>(x: &FieldStack<T>) -> FieldStack<T> {
    let rows = x.batch * x.width();
    let data = ops::pool_forward(&x.data, rows, x.npix());
    FieldStack {
        shape: GridShape::cube(x.dim(), 1),
        spec: x.spec.clone(),
        batch: x.batch,
        data,
    }
}
