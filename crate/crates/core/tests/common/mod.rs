//! Central finite-difference checks shared by the gradient tests and the
//! acceptance run.
#![allow(dead_code)]

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use mk_core::autodiff::{Tape, Var};
use mk_core::geometry::GridShape;
use mk_core::kernels::{ChannelSpec, KernelBasis};
use mk_core::network::ops::{equivariant_bias_layout, ConvGeom};
use mk_core::network::{build_backbone, build_baseline, ArchConfig, FieldStack, HeadKind, Model, NormMode};
use mk_core::Result;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

pub fn normal(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖)` between analytic and central
/// difference gradients, over up to `per_tensor` sampled entries of each
/// parameter tensor; the worst tensor wins.
pub fn fd_check(
    params: &[Vec<f64>],
    per_tensor: usize,
    seed: u64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> Result<f64> {
    let eval = |ps: &[Vec<f64>]| -> Result<f64> {
        let mut t = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
        let l = f(&mut t, &vars)?;
        Ok(t.value(l)?[0])
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| t.param(p.clone())).collect();
    let loss = f(&mut t, &vars)?;
    let grads = t.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut work = params.to_vec();
    for (k, (p, v)) in params.iter().zip(&vars).enumerate() {
        let g = grads.wrt(*v, p.len())?;
        let idx: Vec<usize> = if p.len() <= per_tensor {
            (0..p.len()).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..p.len())).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            work[k][i] = p[i] + H;
            let up = eval(&work)?;
            work[k][i] = p[i] - H;
            let down = eval(&work)?;
            work[k][i] = p[i];
            let numeric = (up - down) / (2.0 * H);
            diff += (g[i] - numeric).powi(2);
            na += g[i] * g[i];
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    Ok(worst)
}

/// Values whose tensor magnitudes keep clear of the nonlinearity's kink at 1.
fn away_from_kink(rng: &mut ChaCha8Rng, data: &mut [f64], spec: &ChannelSpec, d: usize, npix: usize, batch: usize) {
    let width = spec.width(d);
    for b in 0..batch {
        for ch in spec.channels(d) {
            for p in 0..npix {
                let at = |c: usize| (b * width + ch.offset + c) * npix + p;
                let m: f64 = (0..ch.size).map(|c| data[at(c)].powi(2)).sum::<f64>().sqrt();
                let target = if rng.random::<bool>() {
                    rng.random_range(0.2..0.8)
                } else {
                    rng.random_range(1.2..2.5)
                };
                for c in 0..ch.size {
                    data[at(c)] *= target / m;
                }
            }
        }
    }
}

/// `(operation, relative error)` for every differentiable tape operation.
pub fn op_errors(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let n = 12;
    for d in [2usize, 3] {
        let (size, batch) = if d == 2 { (5, 2) } else { (4, 2) };
        let shape = GridShape::cube(d, size);
        let npix = shape.numel();
        let in_spec = ChannelSpec::standard(1, 1, 1);
        let out_spec = ChannelSpec::standard(1, 1, 1);
        let basis = Arc::new(KernelBasis::new(&in_spec, &out_spec, d, 3, 3)?);
        let mask = Arc::new(basis.mask().to_vec());
        let geom = ConvGeom {
            batch,
            in_width: in_spec.width(d),
            out_width: out_spec.width(d),
            shape: shape.clone(),
            support: 3,
        };
        let x = normal(&mut rng, batch * in_spec.width(d) * npix);
        let profiles = normal(&mut rng, basis.num_params());
        let target = normal(&mut rng, batch * out_spec.width(d) * npix);
        let name = if d == 2 { "assemble+conv 2D" } else { "assemble+conv 3D" };
        let e = fd_check(&[x.clone(), profiles.clone()], n, seed, |t, v| {
            let w = t.assemble(v[1], basis.clone())?;
            let y = t.conv(v[0], w, geom.clone(), Some(mask.clone()))?;
            t.mse(y, &target)
        })?;
        out.push((name, e));

        let channels = Arc::new(out_spec.channels(d));
        let (layout, nb) = equivariant_bias_layout(&channels, d);
        let layout = Arc::new(layout);
        let width = out_spec.width(d);
        let bias = normal(&mut rng, nb);
        let e = fd_check(&[target.clone(), bias], n, seed, |t, v| {
            let y = t.bias(v[0], v[1], layout.clone(), batch, npix)?;
            t.mse(y, &x)
        })?;
        out.push((if d == 2 { "bias 2D" } else { "bias 3D" }, e));

        let mut z = normal(&mut rng, batch * width * npix);
        away_from_kink(&mut rng, &mut z, &out_spec, d, npix, batch);
        let e = fd_check(&[z.clone()], n, seed, |t, v| {
            let y = t.magnitude(v[0], channels.clone(), batch, npix, 1e-6)?;
            t.mse(y, &target)
        })?;
        out.push((if d == 2 { "magnitude 2D" } else { "magnitude 3D" }, e));

        let e = fd_check(&[z.clone()], n, seed, |t, v| {
            let (y, _, _) = t.lognorm(v[0], channels.clone(), batch, npix, 1e-6, None)?;
            t.mse(y, &target)
        })?;
        out.push((
            if d == 2 {
                "lognorm (train) 2D"
            } else {
                "lognorm (train) 3D"
            },
            e,
        ));

        let rows = batch * width;
        let e = fd_check(&[z.clone()], n, seed, |t, v| {
            let y = t.downsample(v[0], rows, &shape)?;
            let s = t.scale(y, 0.7)?;
            t.sum_squares(s)
        })?;
        out.push((if d == 2 { "downsample 2D" } else { "downsample 3D" }, e));
    }

    // plain layers of the baseline
    let (batch, npix, width) = (3, 7, 4);
    let mut z = normal(&mut rng, batch * width * npix);
    for v in &mut z {
        if v.abs() < 0.05 {
            *v += 0.1f64.copysign(*v);
        }
    }
    let gamma = normal(&mut rng, width);
    let beta = normal(&mut rng, width);
    let target = normal(&mut rng, z.len());
    out.push((
        "batchnorm (train)",
        fd_check(&[z.clone(), gamma, beta], 12, seed, |t, v| {
            let (y, _, _) = t.std_norm(v[0], v[1], v[2], batch, npix, None)?;
            t.mse(y, &target)
        })?,
    ));
    out.push((
        "relu",
        fd_check(&[z.clone()], 12, seed, |t, v| {
            let y = t.relu(v[0])?;
            t.mse(y, &target)
        })?,
    ));
    let other = normal(&mut rng, z.len());
    out.push((
        "add",
        fd_check(&[z.clone(), other], 12, seed, |t, v| {
            let y = t.add(v[0], v[1])?;
            t.sum_squares(y)
        })?,
    ));
    // 12 pooled scores read as 4 rows of 3 classes
    let labels = [2usize, 0, 1, 1];
    out.push((
        "pool+cross_entropy",
        fd_check(&[z], 12, seed, |t, v| {
            let y = t.pool(v[0], npix)?;
            t.cross_entropy(y, &labels, 3)
        })?,
    ));
    Ok(out)
}

pub fn small_model(baseline: bool, head: HeadKind, seed: u64) -> Result<Model<f64>> {
    let cfg = ArchConfig {
        dim: 2,
        layers: 2,
        base_scalars: 2,
        base_vectors: 1,
        base_matrices: 1,
        head,
        seed,
        ..ArchConfig::default()
    };
    let mut m = if baseline {
        build_baseline(&cfg)?
    } else {
        build_backbone(&cfg)?
    };
    // nonzero biases so their gradients are exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let names = m.param_names().to_vec();
    for (p, name) in m.params_mut().iter_mut().zip(names) {
        if name.ends_with("bias") || name.ends_with("bn_beta") {
            p.iter_mut()
                .for_each(|v| *v = 0.3 * rng.sample::<f64, _>(StandardNormal));
        }
    }
    Ok(m)
}

/// Relative error of the full-model gradient (profiles, biases and, for
/// the baseline, dense weights and norm affine parameters) under a
/// train-mode cross-entropy loss.
pub fn model_error(baseline: bool, seed: u64) -> Result<f64> {
    let model = small_model(baseline, HeadKind::Classify, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = 3;
    let shape = GridShape::cube(2, 8);
    let x = FieldStack::new(shape, ChannelSpec::scalars(1), batch, normal(&mut rng, batch * 64))?;
    let labels = [0usize, 1, 2];
    let loss = |m: &Model<f64>| -> Result<f64> {
        let mut t = Tape::new();
        let trace = m.record(&mut t, &x, NormMode::Train)?;
        let l = t.cross_entropy(trace.output, &labels, 3)?;
        Ok(t.value(l)?[0])
    };
    let mut t = Tape::new();
    let trace = model.record(&mut t, &x, NormMode::Train)?;
    let l = t.cross_entropy(trace.output, &labels, 3)?;
    let grads = t.backward(l)?;
    let mut work = model.clone();
    let mut worst = 0.0f64;
    for (k, (p, v)) in model.params().iter().zip(&trace.params).enumerate() {
        let g = grads.wrt(*v, p.len())?;
        let idx: Vec<usize> = if p.len() <= 10 {
            (0..p.len()).collect()
        } else {
            (0..10).map(|_| rng.random_range(0..p.len())).collect()
        };
        let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
        for &i in &idx {
            work.params_mut()[k][i] = p[i] + H;
            let up = loss(&work)?;
            work.params_mut()[k][i] = p[i] - H;
            let down = loss(&work)?;
            work.params_mut()[k][i] = p[i];
            let numeric = (up - down) / (2.0 * H);
            diff += (g[i] - numeric).powi(2);
            na += g[i] * g[i];
            nn += numeric * numeric;
        }
        let scale = na.sqrt().max(nn.sqrt());
        if scale > 1e-12 {
            worst = worst.max(diff.sqrt() / scale);
        }
    }
    Ok(worst)
}
