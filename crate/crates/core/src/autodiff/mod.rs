//! A small reverse-mode tape over exactly the operations the networks use.

mod adam;
mod loss;

pub use adam::AdamState;
pub use loss::{cross_entropy, mse, softmax};

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::GridShape;
use crate::kernels::{Channel, KernelBasis};
use crate::network::ops::{self, ConvGeom, LogNormSaved, StdNormSaved};
use crate::scalar::Real;

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

enum Op<T> {
    Leaf,
    Assemble {
        profiles: usize,
        basis: Arc<KernelBasis>,
    },
    Conv {
        input: usize,
        kernel: usize,
        geom: ConvGeom,
        mask: Option<Arc<Vec<bool>>>,
    },
    Bias {
        input: usize,
        bias: usize,
        layout: Arc<Vec<Option<usize>>>,
        batch: usize,
        npix: usize,
    },
    Magnitude {
        input: usize,
        channels: Arc<Vec<Channel>>,
        batch: usize,
        npix: usize,
        eps: T,
    },
    LogNorm {
        input: usize,
        channels: Arc<Vec<Channel>>,
        batch: usize,
        npix: usize,
        eps: T,
        saved: LogNormSaved<T>,
        batch_stats: bool,
    },
    StdNorm {
        input: usize,
        gamma: usize,
        beta: usize,
        batch: usize,
        npix: usize,
        saved: StdNormSaved<T>,
        batch_stats: bool,
    },
    Relu {
        input: usize,
    },
    Downsample {
        input: usize,
        rows: usize,
        shape: GridShape,
    },
    Pool {
        input: usize,
        npix: usize,
    },
    Add {
        a: usize,
        b: usize,
    },
    Scale {
        input: usize,
        factor: T,
    },
    SumSquares {
        input: usize,
    },
    Mse {
        pred: usize,
        target: Vec<T>,
    },
    CrossEntropy {
        scores: usize,
        labels: Vec<usize>,
        classes: usize,
        probs: Vec<T>,
    },
    /// Loss whose gradient was worked out during the forward pass.
    Precomputed {
        input: usize,
        grad: Vec<T>,
    },
}

struct Node<T> {
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records values and the saved state their adjoints need.
pub struct Tape<T: Real> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: expected {want} values, got {got}")));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("value was not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Leaf that gradients are collected for.
    pub fn param(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Vec<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Result<&[T]> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    /// Dense kernel weights from radial profile parameters.
    pub fn assemble(&mut self, profiles: Var, basis: Arc<KernelBasis>) -> Result<Var> {
        let p = self.idx(profiles)?;
        let value = basis.assemble(&self.nodes[p].value)?;
        let needs = self.needs(p);
        Ok(self.push(value, Op::Assemble { profiles: p, basis }, needs))
    }

    /// Adds a constant to a recorded value (used to inject fixed perturbations).
    pub fn add_constant(&mut self, x: Var, c: &[T]) -> Result<Var> {
        let i = self.idx(x)?;
        check_len("constant", c.len(), self.nodes[i].value.len())?;
        let cst = self.constant(c.to_vec());
        self.add(x, cst)
    }

    pub fn conv(&mut self, input: Var, kernel: Var, geom: ConvGeom, mask: Option<Arc<Vec<bool>>>) -> Result<Var> {
        let (i, k) = (self.idx(input)?, self.idx(kernel)?);
        let npix = geom.shape.numel();
        let voxels = geom.support.pow(geom.shape.ndim() as u32);
        check_len(
            "conv input",
            self.nodes[i].value.len(),
            geom.batch * geom.in_width * npix,
        )?;
        check_len(
            "conv kernel",
            self.nodes[k].value.len(),
            geom.out_width * geom.in_width * voxels,
        )?;
        if let Some(m) = &mask {
            check_len("conv mask", m.len(), self.nodes[k].value.len())?;
        }
        let value = ops::conv_forward_raw(&geom, &self.nodes[i].value, &self.nodes[k].value);
        let needs = self.needs(i) || self.needs(k);
        Ok(self.push(
            value,
            Op::Conv {
                input: i,
                kernel: k,
                geom,
                mask,
            },
            needs,
        ))
    }

    pub fn bias(
        &mut self,
        input: Var,
        bias: Var,
        layout: Arc<Vec<Option<usize>>>,
        batch: usize,
        npix: usize,
    ) -> Result<Var> {
        let (i, b) = (self.idx(input)?, self.idx(bias)?);
        check_len("bias input", self.nodes[i].value.len(), batch * layout.len() * npix)?;
        let nb = layout.iter().flatten().map(|&k| k + 1).max().unwrap_or(0);
        if self.nodes[b].value.len() < nb {
            return Err(Error::Shape(format!(
                "bias layout needs {nb} parameters, got {}",
                self.nodes[b].value.len()
            )));
        }
        let mut value = self.nodes[i].value.clone();
        ops::add_bias_raw(&mut value, &layout, &self.nodes[b].value, batch, npix);
        let needs = self.needs(i) || self.needs(b);
        Ok(self.push(
            value,
            Op::Bias {
                input: i,
                bias: b,
                layout,
                batch,
                npix,
            },
            needs,
        ))
    }

    fn check_channels(&self, i: usize, channels: &[Channel], batch: usize, npix: usize) -> Result<()> {
        let width = channels.last().map_or(0, |c| c.offset + c.size);
        check_len("field input", self.nodes[i].value.len(), batch * width * npix)
    }

    pub fn magnitude(
        &mut self,
        input: Var,
        channels: Arc<Vec<Channel>>,
        batch: usize,
        npix: usize,
        eps: T,
    ) -> Result<Var> {
        let i = self.idx(input)?;
        self.check_channels(i, &channels, batch, npix)?;
        let value = ops::magnitude_forward(&self.nodes[i].value, &channels, batch, npix, eps);
        let needs = self.needs(i);
        Ok(self.push(
            value,
            Op::Magnitude {
                input: i,
                channels,
                batch,
                npix,
                eps,
            },
            needs,
        ))
    }

    /// Log-magnitude batchnorm. With `stats = None` batch statistics are used
    /// and returned as `(mean, var)` so the caller can update running state.
    #[allow(clippy::too_many_arguments)]
    pub fn lognorm(
        &mut self,
        input: Var,
        channels: Arc<Vec<Channel>>,
        batch: usize,
        npix: usize,
        eps: T,
        stats: Option<(&[T], &[T])>,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let i = self.idx(input)?;
        self.check_channels(i, &channels, batch, npix)?;
        if stats.is_none() && batch * npix < 2 {
            return Err(Error::Shape("batch statistics need at least two samples".into()));
        }
        let batch_stats = stats.is_none();
        let (value, saved) = ops::lognorm_forward(&self.nodes[i].value, &channels, batch, npix, eps, stats);
        let (m, v) = (saved.batch_mean.clone(), saved.batch_var.clone());
        let needs = self.needs(i);
        let var = self.push(
            value,
            Op::LogNorm {
                input: i,
                channels,
                batch,
                npix,
                eps,
                saved,
                batch_stats,
            },
            needs,
        );
        Ok((var, m, v))
    }

    #[allow(clippy::too_many_arguments)]
    pub fn std_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        batch: usize,
        npix: usize,
        stats: Option<(&[T], &[T])>,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (i, g, b) = (self.idx(input)?, self.idx(gamma)?, self.idx(beta)?);
        let width = self.nodes[g].value.len();
        check_len("norm beta", self.nodes[b].value.len(), width)?;
        check_len("norm input", self.nodes[i].value.len(), batch * width * npix)?;
        let batch_stats = stats.is_none();
        let (value, saved) = ops::std_norm_forward(
            &self.nodes[i].value,
            &self.nodes[g].value,
            &self.nodes[b].value,
            batch,
            npix,
            stats,
        );
        let (m, v) = (saved.batch_mean.clone(), saved.batch_var.clone());
        let needs = self.needs(i) || self.needs(g) || self.needs(b);
        let var = self.push(
            value,
            Op::StdNorm {
                input: i,
                gamma: g,
                beta: b,
                batch,
                npix,
                saved,
                batch_stats,
            },
            needs,
        );
        Ok((var, m, v))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.nodes[i].value.iter().map(|&x| x.max(T::zero())).collect();
        let needs = self.needs(i);
        Ok(self.push(value, Op::Relu { input: i }, needs))
    }

    pub fn downsample(&mut self, input: Var, rows: usize, shape: &GridShape) -> Result<Var> {
        let i = self.idx(input)?;
        check_len("downsample input", self.nodes[i].value.len(), rows * shape.numel())?;
        let value = ops::downsample_forward(&self.nodes[i].value, rows, shape);
        let needs = self.needs(i);
        Ok(self.push(
            value,
            Op::Downsample {
                input: i,
                rows,
                shape: shape.clone(),
            },
            needs,
        ))
    }

    pub fn pool(&mut self, input: Var, npix: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let n = self.nodes[i].value.len();
        if npix == 0 || !n.is_multiple_of(npix) {
            return Err(Error::Shape(format!("cannot pool {n} values over {npix} pixels")));
        }
        let value = ops::pool_forward(&self.nodes[i].value, n / npix, npix);
        let needs = self.needs(i);
        Ok(self.push(value, Op::Pool { input: i, npix }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        check_len("add", self.nodes[ib].value.len(), self.nodes[ia].value.len())?;
        let value = self.nodes[ia]
            .value
            .iter()
            .zip(&self.nodes[ib].value)
            .map(|(&x, &y)| x + y)
            .collect();
        let needs = self.needs(ia) || self.needs(ib);
        Ok(self.push(value, Op::Add { a: ia, b: ib }, needs))
    }

    pub fn scale(&mut self, input: Var, factor: T) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.nodes[i].value.iter().map(|&x| x * factor).collect();
        let needs = self.needs(i);
        Ok(self.push(value, Op::Scale { input: i, factor }, needs))
    }

    pub fn sum_squares(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = vec![self.nodes[i].value.iter().map(|&x| x * x).sum()];
        let needs = self.needs(i);
        Ok(self.push(value, Op::SumSquares { input: i }, needs))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let i = self.idx(pred)?;
        check_len("mse target", target.len(), self.nodes[i].value.len())?;
        let value = vec![mse(&self.nodes[i].value, target)?];
        let needs = self.needs(i);
        Ok(self.push(
            value,
            Op::Mse {
                pred: i,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    /// Cross-entropy averaged over a batch of score rows `[batch][classes]`.
    pub fn cross_entropy(&mut self, scores: Var, labels: &[usize], classes: usize) -> Result<Var> {
        let i = self.idx(scores)?;
        check_len("class scores", self.nodes[i].value.len(), labels.len() * classes)?;
        let mut total = T::zero();
        let mut probs = Vec::with_capacity(labels.len() * classes);
        for (row, &label) in self.nodes[i].value.chunks(classes.max(1)).zip(labels) {
            total = total + cross_entropy(row, label)?;
            probs.extend(softmax(row));
        }
        let n = T::lit(labels.len().max(1) as f64);
        let needs = self.needs(i);
        Ok(self.push(
            vec![total / n],
            Op::CrossEntropy {
                scores: i,
                labels: labels.to_vec(),
                classes,
                probs,
            },
            needs,
        ))
    }

    /// Records a scalar loss whose gradient with respect to `input` is already known.
    pub fn precomputed_loss(&mut self, input: Var, value: T, grad: Vec<T>) -> Result<Var> {
        let i = self.idx(input)?;
        check_len("loss gradient", grad.len(), self.nodes[i].value.len())?;
        let needs = self.needs(i);
        Ok(self.push(vec![value], Op::Precomputed { input: i, grad }, needs))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let l = self.idx(loss)?;
        if self.nodes[l].value.len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be a scalar, got {} values",
                self.nodes[l].value.len()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[l] = Some(vec![T::one()]);
        for n in (0..=l).rev() {
            let Some(g) = grads[n].take() else { continue };
            if !self.nodes[n].needs_grad {
                grads[n] = Some(g);
                continue;
            }
            self.propagate(n, &g, &mut grads);
            grads[n] = Some(g);
        }
        Ok(Gradients { tape: self.id, grads })
    }

    fn propagate(&self, n: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let val = |i: usize| -> &[T] { &self.nodes[i].value };
        let mut acc = |i: usize, delta: Vec<T>| {
            if !self.nodes[i].needs_grad {
                return;
            }
            match &mut grads[i] {
                Some(cur) => cur.iter_mut().zip(delta).for_each(|(c, d)| *c = *c + d),
                slot @ None => *slot = Some(delta),
            }
        };
        match &self.nodes[n].op {
            Op::Leaf => {}
            Op::Assemble { profiles, basis } => {
                acc(*profiles, basis.assemble_transpose(g));
            }
            Op::Conv {
                input,
                kernel,
                geom,
                mask,
            } => {
                if self.needs(*input) {
                    acc(*input, ops::conv_grad_input(geom, g, val(*kernel)));
                }
                if self.needs(*kernel) {
                    acc(
                        *kernel,
                        ops::conv_grad_weight(geom, val(*input), g, mask.as_deref().map(|m| m.as_slice())),
                    );
                }
            }
            Op::Bias {
                input,
                bias,
                layout,
                batch,
                npix,
            } => {
                acc(*input, g.to_vec());
                if self.needs(*bias) {
                    let mut gb = ops::bias_grad(g, layout, val(*bias).len(), *batch, *npix);
                    gb.resize(val(*bias).len(), T::zero());
                    acc(*bias, gb);
                }
            }
            Op::Magnitude {
                input,
                channels,
                batch,
                npix,
                eps,
            } => {
                acc(
                    *input,
                    ops::magnitude_backward(val(*input), g, channels, *batch, *npix, *eps),
                );
            }
            Op::LogNorm {
                input,
                channels,
                batch,
                npix,
                eps,
                saved,
                batch_stats,
            } => {
                acc(
                    *input,
                    ops::lognorm_backward(val(*input), g, channels, *batch, *npix, *eps, saved, *batch_stats),
                );
            }
            Op::StdNorm {
                input,
                gamma,
                beta,
                batch,
                npix,
                saved,
                batch_stats,
            } => {
                let (gx, gg, gb) = ops::std_norm_backward(g, val(*gamma), *batch, *npix, saved, *batch_stats);
                acc(*input, gx);
                acc(*gamma, gg);
                acc(*beta, gb);
            }
            Op::Relu { input } => {
                let gi = val(*input)
                    .iter()
                    .zip(g)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                acc(*input, gi);
            }
            Op::Downsample { input, rows, shape } => {
                acc(*input, ops::downsample_backward(g, *rows, shape));
            }
            Op::Pool { input, npix } => {
                acc(*input, ops::pool_backward(g, *npix));
            }
            Op::Add { a, b } => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Scale { input, factor } => {
                acc(*input, g.iter().map(|&x| x * *factor).collect());
            }
            Op::SumSquares { input } => {
                let two = T::lit(2.0) * g[0];
                acc(*input, val(*input).iter().map(|&x| two * x).collect());
            }
            Op::Mse { pred, target } => {
                let c = T::lit(2.0) * g[0] / T::lit(target.len().max(1) as f64);
                acc(
                    *pred,
                    val(*pred).iter().zip(target).map(|(&p, &t)| c * (p - t)).collect(),
                );
            }
            Op::CrossEntropy {
                scores,
                labels,
                classes,
                probs,
            } => {
                let c = g[0] / T::lit(labels.len().max(1) as f64);
                let mut gi: Vec<T> = probs.iter().map(|&p| p * c).collect();
                for (b, &label) in labels.iter().enumerate() {
                    gi[b * classes + label] = gi[b * classes + label] - c;
                }
                acc(*scores, gi);
            }
            Op::Precomputed { input, grad } => {
                acc(*input, grad.iter().map(|&x| x * g[0]).collect());
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var, len: usize) -> Result<Vec<T>> {
        if v.tape != self.tape || v.index >= self.grads.len() {
            return Err(Error::Tape("value was not recorded on this tape".into()));
        }
        Ok(self.grads[v.index].clone().unwrap_or_else(|| vec![T::zero(); len]))
    }

    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index)?.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_gradient() {
        let mut t = Tape::<f64>::new();
        let p = t.param(vec![1.5, -2.0, 0.25]);
        let l = t.sum_squares(p).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn foreign_and_non_scalar_losses_are_rejected() {
        let mut a = Tape::<f64>::new();
        let mut b = Tape::<f64>::new();
        let x = a.param(vec![1.0, 2.0]);
        let y = b.param(vec![1.0]);
        assert!(matches!(a.backward(x), Err(Error::Tape(_))));
        assert!(matches!(a.backward(y), Err(Error::Tape(_))));
        assert!(a.relu(y).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let c = t.constant(vec![1.0, 2.0]);
        let p = t.param(vec![0.5, 0.5]);
        let s = t.add(c, p).unwrap();
        let l = t.sum_squares(s).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap(), &[3.0, 5.0]);
    }
}
