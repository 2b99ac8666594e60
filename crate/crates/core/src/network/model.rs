use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, ConvGeom};
use super::{FieldStack, NormMode, NormState};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::GridShape;
use crate::kernels::{bias_count, param_count, Channel, ChannelSpec, KernelBasis};
use crate::scalar::{cast_vec, Real};

pub const NUM_CLASSES: usize = 3;

/// Which task head sits on top of the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// pooled class scores, invariant
    Classify,
    /// pooled vectors: `d` columns of a linear map, then a translation
    Register,
    /// per pixel: 2 confidences + 3 class scores, 2 offsets, 2 quadratic forms
    Detect,
}

impl HeadKind {
    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Classify => "classify",
            HeadKind::Register => "register",
            HeadKind::Detect => "detect",
        }
    }

    pub fn out_spec(self, d: usize) -> ChannelSpec {
        match self {
            HeadKind::Classify => ChannelSpec::scalars(NUM_CLASSES),
            HeadKind::Register => ChannelSpec::new(vec![(1, d + 1)]),
            HeadKind::Detect => ChannelSpec::new(vec![(0, 2 + NUM_CLASSES), (1, 2), (2, 2)]),
        }
    }

    pub fn pooled(self) -> bool {
        self != HeadKind::Detect
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(HeadKind::Classify),
            "register" => Ok(HeadKind::Register),
            "detect" => Ok(HeadKind::Detect),
            other => Err(Error::Config(format!("unknown head `{other}`"))),
        }
    }
}

/// Architecture description, serialized as flat `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub dim: usize,
    pub layers: usize,
    pub base_scalars: usize,
    pub base_vectors: usize,
    pub base_matrices: usize,
    pub support: usize,
    pub radial_samples: usize,
    pub head: HeadKind,
    pub eps: f64,
    pub seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            layers: 8,
            base_scalars: 4,
            base_vectors: 4,
            base_matrices: 4,
            support: 3,
            radial_samples: 3,
            head: HeadKind::Classify,
            eps: 1e-6,
            seed: 0,
        }
    }
}

impl ArchConfig {
    pub const KEYS: [&'static str; 10] = [
        "dim",
        "layers",
        "base_scalars",
        "base_vectors",
        "base_matrices",
        "support",
        "radial_samples",
        "head",
        "eps",
        "seed",
    ];

    pub fn to_text(&self) -> String {
        format!(
            "dim = {}\nlayers = {}\nbase_scalars = {}\nbase_vectors = {}\nbase_matrices = {}\n\
             support = {}\nradial_samples = {}\nhead = {}\neps = {:e}\nseed = {}\n",
            self.dim,
            self.layers,
            self.base_scalars,
            self.base_vectors,
            self.base_matrices,
            self.support,
            self.radial_samples,
            self.head,
            self.eps,
            self.seed
        )
    }

    pub fn base_spec(&self) -> ChannelSpec {
        ChannelSpec::standard(self.base_scalars, self.base_vectors, self.base_matrices)
    }

    /// Output spec of backbone layer `k` (0-based): channels double after
    /// every second layer.
    pub fn layer_spec(&self, k: usize) -> ChannelSpec {
        self.base_spec().scaled(1 << (k / 2))
    }

    /// Downsampling follows every second layer except the last one.
    pub fn downsample_after(&self, k: usize) -> bool {
        k % 2 == 1 && k + 1 < self.layers
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Build(m));
        if !(2..=3).contains(&self.dim) {
            return fail(format!("dim must be 2 or 3, got {}", self.dim));
        }
        if self.layers == 0 {
            return fail("at least one layer is needed".into());
        }
        if self.base_spec().num_channels() == 0 {
            return fail("the base channel spec is empty".into());
        }
        if self.support.is_multiple_of(2) {
            return fail(format!("support must be odd, got {}", self.support));
        }
        if !(self.eps > 0.0) {
            return fail("eps must be positive".into());
        }
        // a support-1 head only has fully paired signatures, so output rank and
        // input rank need equal parity
        let last = self.layer_spec(self.layers - 1);
        for &(ro, _) in self.head.out_spec(self.dim).groups() {
            if !last.groups().iter().any(|&(ri, _)| (ro + ri) % 2 == 0) {
                return fail(format!(
                    "{} head needs rank-{ro} outputs but the last layer {last} has no channel of matching parity",
                    self.head
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arch {
    Equivariant,
    /// plain convolutions with `width` channels in the first layer
    Baseline {
        width: usize,
    },
}

#[derive(Clone, Debug)]
enum Weights {
    Moment {
        basis: Arc<KernelBasis>,
        mask: Arc<Vec<bool>>,
    },
    Dense,
}

#[derive(Clone, Debug)]
enum Norm {
    Log,
    Std { gamma: usize, beta: usize },
}

#[derive(Clone, Debug)]
struct Layer {
    in_spec: ChannelSpec,
    out_spec: ChannelSpec,
    channels: Arc<Vec<Channel>>,
    support: usize,
    weights: Weights,
    weight_param: usize,
    bias_param: usize,
    bias_layout: Arc<Vec<Option<usize>>>,
    norm: Option<(usize, Norm)>,
    activation: bool,
    downsample: bool,
}

/// Recorded forward pass.
pub struct Trace<T> {
    pub output: Var,
    pub out_shape: GridShape,
    pub out_spec: ChannelSpec,
    pub batch: usize,
    /// one tape leaf per parameter tensor, in [`Model::params`] order
    pub params: Vec<Var>,
    /// output of every backbone layer with its grid and spec
    pub layers: Vec<(Var, GridShape, ChannelSpec)>,
    /// batch `(mean, var)` of every norm layer (train mode)
    pub stats: Vec<(Vec<T>, Vec<T>)>,
}

/// Backbone plus head, with parameters and batchnorm state.
#[derive(Clone, Debug)]
pub struct Model<T> {
    cfg: ArchConfig,
    arch: Arch,
    layers: Vec<Layer>,
    params: Vec<Vec<T>>,
    names: Vec<String>,
    norms: Vec<NormState<T>>,
    perturbation: Option<(usize, Vec<T>)>,
}

fn build_err(e: Error) -> Error {
    match e {
        Error::Build(_) => e,
        other => Error::Build(other.to_string()),
    }
}

/// Equivariant backbone with the configured head.
pub fn build_backbone<T: Real>(cfg: &ArchConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = Model::empty(cfg.clone(), Arch::Equivariant);
    let mut in_spec = ChannelSpec::scalars(1);
    for k in 0..=cfg.layers {
        let head = k == cfg.layers;
        let (out_spec, support, samples) = if head {
            (cfg.head.out_spec(d), 1, 1)
        } else {
            (cfg.layer_spec(k), cfg.support, cfg.radial_samples)
        };
        let basis = KernelBasis::new(&in_spec, &out_spec, d, support, samples).map_err(build_err)?;
        let prefix = if head { "head".to_string() } else { format!("layer{k}") };
        let weight_param = m.push_param(format!("{prefix}.profiles"), cast_vec(&basis.init_params(&mut rng)));
        let channels = out_spec.channels(d);
        let (layout, nbias) = ops::equivariant_bias_layout(&channels, d);
        let bias_param = m.push_param(format!("{prefix}.bias"), vec![T::zero(); nbias]);
        let norm = (!head).then(|| {
            m.norms.push(NormState::new(out_spec.num_channels()));
            (m.norms.len() - 1, Norm::Log)
        });
        let mask = Arc::new(basis.mask().to_vec());
        m.layers.push(Layer {
            in_spec: in_spec.clone(),
            out_spec: out_spec.clone(),
            channels: Arc::new(channels),
            support,
            weights: Weights::Moment {
                basis: Arc::new(basis),
                mask,
            },
            weight_param,
            bias_param,
            bias_layout: Arc::new(layout),
            norm,
            activation: !head,
            downsample: !head && cfg.downsample_after(k),
        });
        in_spec = out_spec;
    }
    Ok(m)
}

/// Parameter count of [`build_backbone`] without building it.
pub fn equivariant_param_count(cfg: &ArchConfig) -> usize {
    let mut in_spec = ChannelSpec::scalars(1);
    let mut total = 0;
    for k in 0..=cfg.layers {
        let (out_spec, samples) = if k == cfg.layers {
            (cfg.head.out_spec(cfg.dim), 1)
        } else {
            (cfg.layer_spec(k), cfg.radial_samples)
        };
        total += param_count(&in_spec, &out_spec, samples) + bias_count(&out_spec);
        in_spec = out_spec;
    }
    total
}

fn baseline_widths(cfg: &ArchConfig, width: usize) -> Vec<usize> {
    (0..cfg.layers).map(|k| width << (k / 2)).collect()
}

fn baseline_param_count(cfg: &ArchConfig, width: usize) -> usize {
    let voxels = cfg.support.pow(cfg.dim as u32);
    let mut prev = 1;
    let mut total = 0;
    for w in baseline_widths(cfg, width) {
        total += w * prev * voxels + 3 * w;
        prev = w;
    }
    let out = cfg.head.out_spec(cfg.dim).width(cfg.dim);
    total + out * prev + out
}

/// Plain convolution + batchnorm + ReLU network with the same topology and
/// the largest width whose parameter count does not exceed the equivariant
/// model's.
pub fn build_baseline<T: Real>(cfg: &ArchConfig) -> Result<Model<T>> {
    cfg.validate()?;
    let budget = equivariant_param_count(cfg);
    let mut width = 1;
    while baseline_param_count(cfg, width + 1) <= budget {
        width += 1;
    }
    build_baseline_with_width(cfg, width)
}

pub fn build_baseline_with_width<T: Real>(cfg: &ArchConfig, width: usize) -> Result<Model<T>> {
    cfg.validate()?;
    if width == 0 {
        return Err(Error::Build("baseline width must be positive".into()));
    }
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut m = Model::empty(cfg.clone(), Arch::Baseline { width });
    let mut prev = 1;
    let widths = baseline_widths(cfg, width);
    for k in 0..=cfg.layers {
        let head = k == cfg.layers;
        let (out_spec, support) = if head {
            (cfg.head.out_spec(d), 1)
        } else {
            (ChannelSpec::scalars(widths[k]), cfg.support)
        };
        let out_w = out_spec.width(d);
        let fan_in = prev * support.pow(d as u32);
        let b = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..out_w * fan_in).map(|_| rng.random_range(-b..=b)).collect();
        let prefix = if head { "head".to_string() } else { format!("layer{k}") };
        let weight_param = m.push_param(format!("{prefix}.weight"), cast_vec(&w));
        let bias_param = m.push_param(format!("{prefix}.bias"), vec![T::zero(); out_w]);
        let norm = if head {
            None
        } else {
            let gamma = m.push_param(format!("{prefix}.bn_gamma"), vec![T::one(); out_w]);
            let beta = m.push_param(format!("{prefix}.bn_beta"), vec![T::zero(); out_w]);
            m.norms.push(NormState::new(out_w));
            Some((m.norms.len() - 1, Norm::Std { gamma, beta }))
        };
        m.layers.push(Layer {
            in_spec: ChannelSpec::scalars(prev),
            out_spec: out_spec.clone(),
            channels: Arc::new(out_spec.channels(d)),
            support,
            weights: Weights::Dense,
            weight_param,
            bias_param,
            bias_layout: Arc::new((0..out_w).map(Some).collect()),
            norm,
            activation: !head,
            downsample: !head && cfg.downsample_after(k),
        });
        prev = out_w;
    }
    Ok(m)
}

impl<T: Real> Model<T> {
    fn empty(cfg: ArchConfig, arch: Arch) -> Self {
        Self {
            cfg,
            arch,
            layers: Vec::new(),
            params: Vec::new(),
            names: Vec::new(),
            norms: Vec::new(),
            perturbation: None,
        }
    }

    fn push_param(&mut self, name: String, value: Vec<T>) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    pub fn config(&self) -> &ArchConfig {
        &self.cfg
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn is_equivariant(&self) -> bool {
        self.arch == Arch::Equivariant
    }

    pub fn head(&self) -> HeadKind {
        self.cfg.head
    }

    pub fn params(&self) -> &[Vec<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Vec::len).sum()
    }

    pub fn norms(&self) -> &[NormState<T>] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormState<T>] {
        &mut self.norms
    }

    pub fn input_spec(&self) -> ChannelSpec {
        ChannelSpec::scalars(1)
    }

    /// Replaces parameters and norm state, checking every length.
    pub fn load_state(&mut self, params: Vec<Vec<T>>, norms: Vec<NormState<T>>) -> Result<()> {
        if params.len() != self.params.len() || norms.len() != self.norms.len() {
            return Err(Error::CheckpointMismatch(format!(
                "model has {} parameter tensors and {} norm layers, got {} and {}",
                self.params.len(),
                self.norms.len(),
                params.len(),
                norms.len()
            )));
        }
        for (k, (new, old)) in params.iter().zip(&self.params).enumerate() {
            if new.len() != old.len() {
                return Err(Error::CheckpointMismatch(format!(
                    "{} has {} values, expected {}",
                    self.names[k],
                    new.len(),
                    old.len()
                )));
            }
        }
        for (k, (new, old)) in norms.iter().zip(&self.norms).enumerate() {
            if new.mean.len() != old.mean.len() || new.var.len() != old.var.len() {
                return Err(Error::CheckpointMismatch(format!(
                    "norm{k} has the wrong channel count"
                )));
            }
        }
        self.params = params;
        self.norms = norms;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            params: self.params.iter().map(|p| cast_vec(p)).collect(),
            names: self.names.clone(),
            norms: self.norms.iter().map(NormState::cast).collect(),
            perturbation: self.perturbation.as_ref().map(|(l, p)| (*l, cast_vec(p))),
        }
    }

    /// Adds `magnitude` to one off-diagonal component of a first-layer kernel
    /// at a single edge voxel. No equivariant kernel has that shape, so the
    /// model stops being equivariant; used as a negative control.
    pub fn inject_symmetry_break(&mut self, magnitude: f64) {
        let layer = &self.layers[0];
        let d = self.cfg.dim;
        let channels = layer.out_spec.channels(d);
        let ch = [2, 1, 0]
            .iter()
            .find_map(|&r| channels.iter().find(|c| c.rank == r))
            .copied()
            .unwrap_or(channels[0]);
        let row = ch.offset + if ch.rank == 2 { 1 } else { 0 };
        let s = layer.support;
        let kshape = GridShape::cube(d, s);
        let mut idx = vec![s / 2; d];
        if s > 1 {
            idx[0] += 1;
        }
        let voxel = kshape.ravel(&idx);
        let in_w = layer.in_spec.width(d);
        let mut dense = vec![T::zero(); layer.out_spec.width(d) * in_w * kshape.numel()];
        dense[(row * in_w) * kshape.numel() + voxel] = T::lit(magnitude);
        self.perturbation = Some((0, dense));
    }

    pub fn clear_symmetry_break(&mut self) {
        self.perturbation = None;
    }

    /// Forward pass on `tape`. Train mode normalizes with batch statistics
    /// (returned in the trace) and leaves running state untouched; call
    /// [`update_norms`](Self::update_norms) afterwards.
    pub fn record(&self, tape: &mut Tape<T>, input: &FieldStack<T>, mode: NormMode) -> Result<Trace<T>> {
        let d = self.cfg.dim;
        if input.dim() != d || input.spec() != &self.input_spec() {
            return Err(Error::Shape(format!(
                "model takes one scalar channel in {d}D, got {} in {}D",
                input.spec(),
                input.dim()
            )));
        }
        let batch = input.batch();
        let eps = T::lit(self.cfg.eps);
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        let mut x = tape.constant(input.data().to_vec());
        let mut shape = input.shape().clone();
        let mut layers = Vec::new();
        let mut stats = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            let (mut w, mask) = match &layer.weights {
                Weights::Moment { basis, mask } => (
                    tape.assemble(params[layer.weight_param], basis.clone())?,
                    Some(mask.clone()),
                ),
                Weights::Dense => (params[layer.weight_param], None),
            };
            if let Some((pl, pert)) = &self.perturbation {
                if *pl == li {
                    w = tape.add_constant(w, pert)?;
                }
            }
            let geom = ConvGeom {
                batch,
                in_width: layer.in_spec.width(d),
                out_width: layer.out_spec.width(d),
                shape: shape.clone(),
                support: layer.support,
            };
            let npix = shape.numel();
            x = tape.conv(x, w, geom, mask)?;
            x = tape.bias(x, params[layer.bias_param], layer.bias_layout.clone(), batch, npix)?;
            if let Some((ni, norm)) = &layer.norm {
                let st = &self.norms[*ni];
                let running = (mode == NormMode::Eval).then_some((st.mean.as_slice(), st.var.as_slice()));
                let (y, m, v) = match norm {
                    Norm::Log => tape.lognorm(x, layer.channels.clone(), batch, npix, eps, running)?,
                    Norm::Std { gamma, beta } => {
                        tape.std_norm(x, params[*gamma], params[*beta], batch, npix, running)?
                    }
                };
                x = y;
                stats.push((m, v));
            }
            if layer.activation {
                x = match self.arch {
                    Arch::Equivariant => tape.magnitude(x, layer.channels.clone(), batch, npix, eps)?,
                    Arch::Baseline { .. } => tape.relu(x)?,
                };
            }
            if layer.downsample {
                x = tape.downsample(x, batch * layer.out_spec.width(d), &shape)?;
                shape = ops::downsampled_shape(&shape);
            }
            if li + 1 < self.layers.len() {
                layers.push((x, shape.clone(), layer.out_spec.clone()));
            }
        }
        if self.cfg.head.pooled() {
            x = tape.pool(x, shape.numel())?;
            shape = GridShape::cube(d, 1);
        }
        Ok(Trace {
            output: x,
            out_shape: shape,
            out_spec: self.cfg.head.out_spec(d),
            batch,
            params,
            layers,
            stats,
        })
    }

    /// Folds the batch statistics of a train-mode trace into running state.
    pub fn update_norms(&mut self, stats: &[(Vec<T>, Vec<T>)]) {
        for (st, (m, v)) in self.norms.iter_mut().zip(stats) {
            st.update(m, v);
        }
    }

    pub fn output_stack(&self, tape: &Tape<T>, trace: &Trace<T>) -> Result<FieldStack<T>> {
        FieldStack::new(
            trace.out_shape.clone(),
            trace.out_spec.clone(),
            trace.batch,
            tape.value(trace.output)?.to_vec(),
        )
    }

    /// Eval-mode output.
    pub fn predict(&self, input: &FieldStack<T>) -> Result<FieldStack<T>> {
        let mut tape = Tape::new();
        let trace = self.record(&mut tape, input, NormMode::Eval)?;
        self.output_stack(&tape, &trace)
    }

    /// Eval-mode output together with every backbone layer's output.
    pub fn predict_layers(&self, input: &FieldStack<T>) -> Result<(FieldStack<T>, Vec<FieldStack<T>>)> {
        let mut tape = Tape::new();
        let trace = self.record(&mut tape, input, NormMode::Eval)?;
        let layers = trace
            .layers
            .iter()
            .map(|(v, shape, spec)| FieldStack::new(shape.clone(), spec.clone(), trace.batch, tape.value(*v)?.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((self.output_stack(&tape, &trace)?, layers))
    }
}
