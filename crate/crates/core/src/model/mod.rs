//! Model zoo: CNN6, CNN6Next, CNN14, CNN14Sep, ConvNeXt-Tiny and
//! ConvNeXt-Small, plus a reduced ConvNeXt for desk-scale training.

mod config;
mod graph;
mod params;
mod zoo;

use rand::RngCore;

pub use config::{BlockKind, Family, ModelConfig, AUDIOSET_CLASSES, MODEL_NAMES, TOY_MODEL};
pub use graph::{
    BnLayer, ConvLayer, ForwardCtx, Layer, LinearLayer, LnLayer, Network, Residual, ShapeTrace, Tape,
};
pub use params::{Grads, ParamEntry, ParamId, ParamKind, ParamStore};
pub use zoo::{name_seed, INIT_STD};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Per-clip outputs: raw logits and sigmoid probabilities, both `(N, classes)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T = f32> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

impl<T: Real> Prediction<T> {
    fn from_logits(logits: Tensor<T>) -> Self {
        let probabilities = ops::sigmoid(&logits);
        Self { logits, probabilities }
    }
}

/// Inverted-bottleneck geometry found in a block.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bottleneck {
    pub block: String,
    pub width: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub network: Network,
    pub params: ParamStore<f32>,
}

impl Model {
    /// Builds the graph and initializes parameters: truncated normal
    /// (std 0.02) kernels, zero biases, unit/zero norm affine terms.
    pub fn build(config: &ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let (network, params) = zoo::build(config, rng)?;
        Ok(Self {
            config: config.clone(),
            network,
            params,
        })
    }

    /// Learnable scalar count (running statistics excluded).
    pub fn param_count(&self) -> usize {
        self.params.learnable_count()
    }

    /// `(batch, 1, frames, mels)` for the configured input.
    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, 1, self.config.input.0, self.config.input.1]
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(Error::shape(format!("model input must be (N, 1, H, W), got {shape:?}")));
        };
        if c != 1 {
            return Err(Error::shape(format!("model input must have one channel, got {c}")));
        }
        if w != self.config.input.1 {
            return Err(Error::shape(format!(
                "{} expects {} mel bins, got {w}",
                self.config.name, self.config.input.1
            )));
        }
        if let Some(p) = self.config.stem_patch {
            if h % p != 0 || w % p != 0 {
                return Err(Error::shape(format!(
                    "stem patch {p} does not divide input {h}x{w}; pad the time axis first"
                )));
            }
        }
        Ok(())
    }

    /// Inference forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Prediction> {
        let mut ctx = ForwardCtx::inference();
        self.forward_with(x, &mut ctx)
    }

    /// Forward pass with caller-provided context (training, recording,
    /// MAC counting). The tape is dropped; use [`Model::forward_recorded`]
    /// to keep it.
    pub fn forward_with(&self, x: &Tensor, ctx: &mut ForwardCtx<'_, f32>) -> Result<Prediction> {
        self.check_input(x.shape())?;
        let (logits, _) = self.network.forward(&self.params, x.clone(), ctx)?;
        Ok(Prediction::from_logits(logits))
    }

    /// Forward pass that records a tape for [`Model::backward`].
    pub fn forward_recorded(&self, x: &Tensor, ctx: &mut ForwardCtx<'_, f32>) -> Result<(Prediction, Tape)> {
        self.check_input(x.shape())?;
        ctx.record = true;
        let (logits, tape) = self.network.forward(&self.params, x.clone(), ctx)?;
        let tape = tape.expect("recording enabled");
        Ok((Prediction::from_logits(logits), tape))
    }

    /// Parameter gradients given the gradient of the loss with respect to the
    /// logits.
    pub fn backward(&self, tape: Tape, grad_logits: Tensor) -> Result<Grads> {
        let (_, grads) = self.network.backward(&self.params, tape, grad_logits)?;
        Ok(grads)
    }

    /// Writes running-statistics updates collected during a training forward.
    pub fn apply_bn_updates(&mut self, updates: Vec<(ParamId, Tensor)>) -> Result<()> {
        for (id, value) in updates {
            self.params.replace(id, value)?;
        }
        Ok(())
    }

    /// Runs only the stem (ConvNeXt family).
    pub fn stem(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.shape())?;
        let stem = match self.network.layers.first() {
            Some(l @ Layer::Block { name, .. }) if name == "stem" => l.clone(),
            _ => return Err(Error::invalid(format!("{} has no stem", self.config.name))),
        };
        let net = Network { layers: vec![stem] };
        let (y, _) = net.forward(&self.params, x.clone(), &mut ForwardCtx::inference())?;
        Ok(y)
    }

    /// Analytic shapes and MACs for a batch of `batch` configured inputs.
    pub fn trace(&self, input: &[usize]) -> Result<ShapeTrace> {
        self.check_input(input)?;
        self.network.infer_shapes(input)
    }

    /// Every inverted bottleneck in the graph, read off the pointwise convs.
    pub fn bottlenecks(&self) -> Vec<Bottleneck> {
        let convs = self.network.conv_layers();
        convs
            .iter()
            .filter_map(|c| c.name.strip_suffix(".pwconv1").map(|block| (block, c)))
            .filter_map(|(block, expand)| {
                let contract = convs.iter().find(|c| c.name == format!("{block}.pwconv2"))?;
                (contract.spec.in_channels == expand.spec.out_channels).then(|| Bottleneck {
                    block: block.to_string(),
                    width: contract.spec.out_channels,
                    hidden: expand.spec.out_channels,
                })
            })
            .collect()
    }
}
