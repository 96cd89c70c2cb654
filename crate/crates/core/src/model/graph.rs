//! Layer graph: a tree of layers whose parameters live in a [`ParamStore`].
//!
//! The same graph runs in `f32` for inference and training and in `f64` for
//! gradient checks. A forward call can record a [`Tape`] that the backward
//! pass consumes in reverse.

use rand::RngCore;

use super::params::{Grads, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::ops::{self, ConvSpec, MacTally, NormParams, PoolMode};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub name: String,
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct LnLayer {
    pub name: String,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

/// `x + drop_path(layer_scale * branch(x))`.
#[derive(Clone, Debug)]
pub struct Residual {
    pub branch: Vec<Layer>,
    pub layer_scale: Option<ParamId>,
    pub drop_path: f64,
}

#[derive(Clone, Debug)]
pub enum Layer {
    Conv(ConvLayer),
    BatchNorm(BnLayer),
    /// Batch norm whose channels are the frequency bins of a one-channel
    /// spectrogram.
    FreqBatchNorm(BnLayer),
    LayerNorm(LnLayer),
    Gelu,
    Relu,
    AvgPool2,
    GlobalPool(PoolMode),
    Linear(LinearLayer),
    Residual(Residual),
    /// Named group of layers; block boundaries show up in shape traces.
    Block { name: String, layers: Vec<Layer> },
}

/// Per-call forward state.
pub struct ForwardCtx<'a, T = f32> {
    pub training: bool,
    /// Keep intermediate values for a backward pass.
    pub record: bool,
    /// Count executed multiply-accumulates.
    pub count_macs: bool,
    rng: Option<&'a mut dyn RngCore>,
    pub macs: MacTally,
    /// Running-statistics updates produced by batch norm in training mode.
    pub bn_updates: Vec<(ParamId, Tensor<T>)>,
    /// Output shape of every named block, in execution order.
    pub trace: Vec<(String, Vec<usize>)>,
}

impl<'a, T: Real> ForwardCtx<'a, T> {
    pub fn inference() -> Self {
        Self {
            training: false,
            record: false,
            count_macs: false,
            rng: None,
            macs: MacTally::default(),
            bn_updates: Vec::new(),
            trace: Vec::new(),
        }
    }

    /// Training mode with recording on; `rng` drives drop path.
    pub fn training(rng: &'a mut dyn RngCore) -> Self {
        Self {
            training: true,
            record: true,
            rng: Some(rng),
            ..Self::inference()
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }

    pub fn counting(mut self) -> Self {
        self.count_macs = true;
        self
    }
}

#[derive(Debug)]
enum Saved<T> {
    Input(Tensor<T>),
    Shape(Vec<usize>),
    Bn(ops::BnSaved<T>),
    Ln(ops::LnSaved<T>),
    Nothing,
    Residual {
        branch: Vec<Saved<T>>,
        pre_scale: Option<Tensor<T>>,
        factors: Vec<f64>,
    },
    Seq(Vec<Saved<T>>),
}

/// Values recorded by a forward pass for the matching backward pass.
#[derive(Debug)]
pub struct Tape<T = f32> {
    saved: Vec<Saved<T>>,
}

/// Analytic shape and cost of running a graph on a given input shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub output: Vec<usize>,
    pub macs: u64,
    pub blocks: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Debug, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
}

fn norm_params<T: Real>(store: &ParamStore<T>, bn: &BnLayer) -> NormParams<T> {
    NormParams {
        gamma: store.get(bn.gamma).clone(),
        beta: store.get(bn.beta).clone(),
        running_mean: store.get(bn.running_mean).clone(),
        running_var: store.get(bn.running_var).clone(),
        eps: ops::BN_EPS,
    }
}

impl Layer {
    fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: Tensor<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<(Tensor<T>, Saved<T>)> {
        let keep = |x: Tensor<T>, ctx: &ForwardCtx<'_, T>| {
            if ctx.record {
                Saved::Input(x)
            } else {
                Saved::Nothing
            }
        };
        match self {
            Layer::Conv(c) => {
                let w = store.get(c.weight);
                let b = c.bias.map(|id| store.get(id));
                let y = if ctx.count_macs {
                    let (y, tally) = ops::conv2d_counted(&x, w, b, &c.spec)?;
                    ctx.macs += tally;
                    y
                } else {
                    ops::conv2d(&x, w, b, &c.spec)?
                };
                Ok((y, keep(x, ctx)))
            }
            Layer::BatchNorm(bn) => {
                let p = norm_params(store, bn);
                let (y, saved, update) = ops::batch_norm2d(&x, &p, ctx.training)?;
                if let Some(u) = update {
                    ctx.bn_updates.push((bn.running_mean, u.running_mean));
                    ctx.bn_updates.push((bn.running_var, u.running_var));
                }
                Ok((y, if ctx.record { Saved::Bn(saved) } else { Saved::Nothing }))
            }
            Layer::FreqBatchNorm(bn) => {
                let p = norm_params(store, bn);
                let xt = ops::swap_channel_freq(&x)?;
                let (y, saved, update) = ops::batch_norm2d(&xt, &p, ctx.training)?;
                if let Some(u) = update {
                    ctx.bn_updates.push((bn.running_mean, u.running_mean));
                    ctx.bn_updates.push((bn.running_var, u.running_var));
                }
                let y = ops::swap_channel_freq(&y)?;
                Ok((y, if ctx.record { Saved::Bn(saved) } else { Saved::Nothing }))
            }
            Layer::LayerNorm(ln) => {
                let (y, saved) = ops::layer_norm_channels(&x, store.get(ln.gamma), store.get(ln.beta), ln.eps)?;
                Ok((y, if ctx.record { Saved::Ln(saved) } else { Saved::Nothing }))
            }
            Layer::Gelu => {
                let y = ops::gelu(&x);
                Ok((y, keep(x, ctx)))
            }
            Layer::Relu => {
                let y = ops::relu(&x);
                Ok((y, keep(x, ctx)))
            }
            Layer::AvgPool2 => {
                let y = ops::avg_pool2x2(&x)?;
                Ok((y, Saved::Shape(x.shape().to_vec())))
            }
            Layer::GlobalPool(mode) => {
                let y = ops::global_pool(&x, *mode)?;
                Ok((y, keep(x, ctx)))
            }
            Layer::Linear(l) => {
                let y = ops::linear(&x, store.get(l.weight), Some(store.get(l.bias)))?;
                if ctx.count_macs {
                    let (n, d) = x.dims2()?;
                    ctx.macs.performed += (n * d * l.out_features) as u64;
                }
                Ok((y, keep(x, ctx)))
            }
            Layer::Residual(r) => {
                let (mut out, branch) = run_sequence(&r.branch, store, x.clone(), ctx)?;
                let pre_scale = match r.layer_scale {
                    Some(id) => {
                        let scaled = ops::channel_scale(&out, store.get(id))?;
                        let pre = std::mem::replace(&mut out, scaled);
                        ctx.record.then_some(pre)
                    }
                    None => None,
                };
                let factors = if ctx.training && r.drop_path > 0.0 {
                    let rng = ctx
                        .rng
                        .as_deref_mut()
                        .ok_or_else(|| Error::invalid("drop path in training mode needs an rng"))?;
                    let (dropped, factors) = ops::drop_path(&out, r.drop_path, true, rng)?;
                    out = dropped;
                    factors
                } else {
                    vec![1.0; x.shape()[0]]
                };
                out.add_assign(&x)?;
                Ok((
                    out,
                    Saved::Residual {
                        branch,
                        pre_scale,
                        factors,
                    },
                ))
            }
            Layer::Block { name, layers } => {
                let (y, saved) = run_sequence(layers, store, x, ctx)?;
                ctx.trace.push((name.clone(), y.shape().to_vec()));
                Ok((y, Saved::Seq(saved)))
            }
        }
    }

    fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        saved: Saved<T>,
        grad: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let missing = || Error::invalid("backward called on a forward pass that was not recorded");
        match (self, saved) {
            (Layer::Conv(c), Saved::Input(x)) => {
                let g = ops::conv2d_backward(&x, store.get(c.weight), &c.spec, &grad)?;
                grads.accumulate(c.weight, g.weight)?;
                if let (Some(id), Some(gb)) = (c.bias, g.bias) {
                    grads.accumulate(id, gb)?;
                }
                Ok(g.input)
            }
            (Layer::BatchNorm(bn), Saved::Bn(s)) => {
                let g = ops::batch_norm2d_backward(&s, store.get(bn.gamma), &grad)?;
                grads.accumulate(bn.gamma, g.gamma)?;
                grads.accumulate(bn.beta, g.beta)?;
                Ok(g.input)
            }
            (Layer::FreqBatchNorm(bn), Saved::Bn(s)) => {
                let gt = ops::swap_channel_freq(&grad)?;
                let g = ops::batch_norm2d_backward(&s, store.get(bn.gamma), &gt)?;
                grads.accumulate(bn.gamma, g.gamma)?;
                grads.accumulate(bn.beta, g.beta)?;
                ops::swap_channel_freq(&g.input)
            }
            (Layer::LayerNorm(ln), Saved::Ln(s)) => {
                let g = ops::layer_norm_channels_backward(&s, store.get(ln.gamma), &grad)?;
                grads.accumulate(ln.gamma, g.gamma)?;
                grads.accumulate(ln.beta, g.beta)?;
                Ok(g.input)
            }
            (Layer::Gelu, Saved::Input(x)) => ops::gelu_backward(&x, &grad),
            (Layer::Relu, Saved::Input(x)) => ops::relu_backward(&x, &grad),
            (Layer::AvgPool2, Saved::Shape(shape)) => ops::avg_pool2x2_backward(&shape, &grad),
            (Layer::GlobalPool(mode), Saved::Input(x)) => ops::global_pool_backward(&x, *mode, &grad),
            (Layer::Linear(l), Saved::Input(x)) => {
                let g = ops::linear_backward(&x, store.get(l.weight), &grad)?;
                grads.accumulate(l.weight, g.weight)?;
                grads.accumulate(l.bias, g.bias)?;
                Ok(g.input)
            }
            (
                Layer::Residual(r),
                Saved::Residual {
                    branch,
                    pre_scale,
                    factors,
                },
            ) => {
                let mut g = ops::apply_factors(&grad, &factors)?;
                if let Some(id) = r.layer_scale {
                    let pre = pre_scale.ok_or_else(missing)?;
                    let (gx, gs) = ops::channel_scale_backward(&pre, store.get(id), &g)?;
                    grads.accumulate(id, gs)?;
                    g = gx;
                }
                let mut gx = backprop_sequence(&r.branch, store, branch, g, grads)?;
                gx.add_assign(&grad)?;
                Ok(gx)
            }
            (Layer::Block { layers, .. }, Saved::Seq(saved)) => backprop_sequence(layers, store, saved, grad, grads),
            _ => Err(missing()),
        }
    }

    fn infer(&self, shape: &[usize], blocks: &mut Vec<(String, Vec<usize>)>) -> Result<(Vec<usize>, u64)> {
        let rank4 = || -> Result<(usize, usize, usize, usize)> {
            match *shape {
                [n, c, h, w] => Ok((n, c, h, w)),
                _ => Err(Error::shape(format!("expected rank-4 shape, got {shape:?}"))),
            }
        };
        match self {
            Layer::Conv(c) => {
                let (n, ch, h, w) = rank4()?;
                if ch != c.spec.in_channels {
                    return Err(Error::shape(format!(
                        "{}: input has {ch} channels, expected {}",
                        c.name, c.spec.in_channels
                    )));
                }
                let (oh, ow) = c.spec.output_hw(h, w)?;
                Ok((vec![n, c.spec.out_channels, oh, ow], c.spec.macs(n, h, w)?))
            }
            Layer::FreqBatchNorm(_) => {
                rank4()?;
                Ok((shape.to_vec(), 0))
            }
            Layer::BatchNorm(_) | Layer::LayerNorm(_) | Layer::Gelu | Layer::Relu => Ok((shape.to_vec(), 0)),
            Layer::AvgPool2 => {
                let (n, c, h, w) = rank4()?;
                if h < 2 || w < 2 {
                    return Err(Error::shape(format!("2x2 pooling on {h}x{w} map")));
                }
                Ok((vec![n, c, h / 2, w / 2], 0))
            }
            Layer::GlobalPool(_) => {
                let (n, c, _, _) = rank4()?;
                Ok((vec![n, c], 0))
            }
            Layer::Linear(l) => match *shape {
                [n, d] if d == l.in_features => Ok((vec![n, l.out_features], (n * d * l.out_features) as u64)),
                _ => Err(Error::shape(format!("{}: cannot apply to shape {shape:?}", l.name))),
            },
            Layer::Residual(r) => {
                let mut cur = shape.to_vec();
                let mut macs = 0;
                for layer in &r.branch {
                    let (s, m) = layer.infer(&cur, blocks)?;
                    cur = s;
                    macs += m;
                }
                if cur != shape {
                    return Err(Error::shape(format!("residual branch maps {shape:?} to {cur:?}")));
                }
                Ok((cur, macs))
            }
            Layer::Block { name, layers } => {
                let mut cur = shape.to_vec();
                let mut macs = 0;
                for layer in layers {
                    let (s, m) = layer.infer(&cur, blocks)?;
                    cur = s;
                    macs += m;
                }
                blocks.push((name.clone(), cur.clone()));
                Ok((cur, macs))
            }
        }
    }

    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a Layer)) {
        f(self);
        match self {
            Layer::Residual(r) => r.branch.iter().for_each(|l| l.visit(f)),
            Layer::Block { layers, .. } => layers.iter().for_each(|l| l.visit(f)),
            _ => {}
        }
    }
}

fn run_sequence<T: Real>(
    layers: &[Layer],
    store: &ParamStore<T>,
    mut x: Tensor<T>,
    ctx: &mut ForwardCtx<'_, T>,
) -> Result<(Tensor<T>, Vec<Saved<T>>)> {
    let mut saved = Vec::with_capacity(if ctx.record { layers.len() } else { 0 });
    for layer in layers {
        let (y, s) = layer.forward(store, x, ctx)?;
        if ctx.record {
            saved.push(s);
        }
        x = y;
    }
    Ok((x, saved))
}

fn backprop_sequence<T: Real>(
    layers: &[Layer],
    store: &ParamStore<T>,
    saved: Vec<Saved<T>>,
    mut grad: Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    if saved.len() != layers.len() {
        return Err(Error::invalid("tape does not match the layer sequence"));
    }
    for (layer, s) in layers.iter().zip(saved).rev() {
        grad = layer.backward(store, s, grad, grads)?;
    }
    Ok(grad)
}

impl Network {
    /// Runs the graph. Returns the output and, when `ctx.record` is set, the
    /// tape for [`Network::backward`].
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        x: Tensor<T>,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<(Tensor<T>, Option<Tape<T>>)> {
        let (y, saved) = run_sequence(&self.layers, store, x, ctx)?;
        Ok((y, ctx.record.then_some(Tape { saved })))
    }

    /// Gradient of `sum(grad_out * output)` with respect to the input and
    /// every parameter touched by the forward pass.
    pub fn backward<T: Real>(
        &self,
        store: &ParamStore<T>,
        tape: Tape<T>,
        grad_out: Tensor<T>,
    ) -> Result<(Tensor<T>, Grads<T>)> {
        let mut grads = Grads::new(store.len());
        let gx = backprop_sequence(&self.layers, store, tape.saved, grad_out, &mut grads)?;
        Ok((gx, grads))
    }

    /// Output shape, analytic MAC count and per-block shapes for an input
    /// shape, without touching any data.
    pub fn infer_shapes(&self, input: &[usize]) -> Result<ShapeTrace> {
        let mut blocks = Vec::new();
        let mut cur = input.to_vec();
        let mut macs = 0;
        for layer in &self.layers {
            let (s, m) = layer.infer(&cur, &mut blocks)?;
            cur = s;
            macs += m;
        }
        Ok(ShapeTrace {
            output: cur,
            macs,
            blocks,
        })
    }

    /// Every layer in depth-first order.
    pub fn walk(&self) -> Vec<&Layer> {
        let mut out = Vec::new();
        for layer in &self.layers {
            layer.visit(&mut |l| out.push(l));
        }
        out
    }

    pub fn conv_layers(&self) -> Vec<&ConvLayer> {
        self.walk()
            .into_iter()
            .filter_map(|l| match l {
                Layer::Conv(c) => Some(c),
                _ => None,
            })
            .collect()
    }
}
