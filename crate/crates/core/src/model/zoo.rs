//! Graph construction for every architecture in [`ModelConfig`], with
//! canonical dotted parameter names (`stages.2.blocks.4.dwconv.weight`,
//! `blocks.0.conv1.weight`, ...).

use rand::RngCore;
use rand_distr::{Distribution, Normal};

use super::config::{BlockKind, Family, ModelConfig};
use super::graph::{BnLayer, ConvLayer, Layer, LinearLayer, LnLayer, Network, Residual};
use super::params::{ParamKind, ParamStore};
use crate::error::Result;
use crate::ops::{ConvSpec, LN_EPS};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

struct Builder<'r> {
    store: ParamStore<f32>,
    rng: &'r mut dyn RngCore,
}

impl Builder<'_> {
    /// Normal(0, 0.02) truncated to two standard deviations.
    fn trunc_normal(&mut self, shape: &[usize]) -> Result<Tensor> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let v: f64 = normal.sample(&mut self.rng);
            if v.abs() <= 2.0 * INIT_STD {
                values.push(v as f32);
            }
        }
        Tensor::from_values(shape, values)
    }

    fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<Layer> {
        spec.validate()?;
        let w = self.trunc_normal(&spec.weight_shape())?;
        let weight = self.store.insert(format!("{name}.weight"), ParamKind::Weight, w)?;
        let bias = if spec.bias {
            let b = Tensor::zeros(&[spec.out_channels])?;
            Some(self.store.insert(format!("{name}.bias"), ParamKind::NoDecay, b)?)
        } else {
            None
        };
        Ok(Layer::Conv(ConvLayer {
            name: name.to_string(),
            spec,
            weight,
            bias,
        }))
    }

    fn bn(&mut self, name: &str, channels: usize) -> Result<BnLayer> {
        let s = &mut self.store;
        Ok(BnLayer {
            name: name.to_string(),
            gamma: s.insert(format!("{name}.weight"), ParamKind::NoDecay, Tensor::full(&[channels], 1.0)?)?,
            beta: s.insert(format!("{name}.bias"), ParamKind::NoDecay, Tensor::zeros(&[channels])?)?,
            running_mean: s.insert(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[channels])?)?,
            running_var: s.insert(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[channels], 1.0)?)?,
        })
    }

    fn ln(&mut self, name: &str, channels: usize) -> Result<Layer> {
        let s = &mut self.store;
        Ok(Layer::LayerNorm(LnLayer {
            name: name.to_string(),
            gamma: s.insert(format!("{name}.weight"), ParamKind::NoDecay, Tensor::full(&[channels], 1.0)?)?,
            beta: s.insert(format!("{name}.bias"), ParamKind::NoDecay, Tensor::zeros(&[channels])?)?,
            eps: LN_EPS,
        }))
    }

    fn linear(&mut self, name: &str, in_features: usize, out_features: usize) -> Result<Layer> {
        let w = self.trunc_normal(&[out_features, in_features])?;
        let weight = self.store.insert(format!("{name}.weight"), ParamKind::Weight, w)?;
        let bias = self
            .store
            .insert(format!("{name}.bias"), ParamKind::NoDecay, Tensor::zeros(&[out_features])?)?;
        Ok(Layer::Linear(LinearLayer {
            name: name.to_string(),
            weight,
            bias,
            in_features,
            out_features,
        }))
    }

    /// Depthwise conv, channel LN, pointwise `C -> 4C`, GELU, pointwise
    /// `4C -> C`, named under `prefix`.
    fn inverted_bottleneck(&mut self, prefix: &str, first: ConvSpec, bias: bool) -> Result<Vec<Layer>> {
        let c = first.out_channels;
        let mut pw1 = ConvSpec::pointwise(c, 4 * c);
        let mut pw2 = ConvSpec::pointwise(4 * c, c);
        pw1.bias = bias;
        pw2.bias = bias;
        let name = if first.is_depthwise() { "dwconv" } else { "conv" };
        Ok(vec![
            self.conv(&format!("{prefix}.{name}"), first)?,
            self.ln(&format!("{prefix}.norm"), c)?,
            self.conv(&format!("{prefix}.pwconv1"), pw1)?,
            Layer::Gelu,
            self.conv(&format!("{prefix}.pwconv2"), pw2)?,
        ])
    }
}

fn with_bias(spec: ConvSpec, bias: bool) -> ConvSpec {
    if bias {
        spec
    } else {
        spec.without_bias()
    }
}

pub(crate) fn build(config: &ModelConfig, rng: &mut dyn RngCore) -> Result<(Network, ParamStore<f32>)> {
    config.validate()?;
    let mut b = Builder {
        store: ParamStore::new(),
        rng,
    };
    let layers = match config.family {
        Family::ConvNeXt => convnext(config, &mut b)?,
        Family::Pann => pann(config, &mut b)?,
    };
    Ok((Network { layers }, b.store))
}

fn convnext(cfg: &ModelConfig, b: &mut Builder<'_>) -> Result<Vec<Layer>> {
    let patch = cfg.stem_patch.unwrap_or(4);
    let dims = &cfg.channels;
    let mut layers = vec![Layer::Block {
        name: "stem".into(),
        layers: vec![
            b.conv("stem.conv", with_bias(ConvSpec::patchify(1, dims[0], patch), cfg.conv_bias))?,
            b.ln("stem.norm", dims[0])?,
        ],
    }];
    let total = cfg.total_blocks();
    let mut index = 0;
    for (stage, (&depth, &dim)) in cfg.depths.iter().zip(dims).enumerate() {
        if stage > 0 {
            let prefix = format!("downsample.{}", stage - 1);
            let spec = with_bias(
                ConvSpec::new(dims[stage - 1], dim, (2, 2)).with_stride((2, 2)),
                cfg.conv_bias,
            );
            layers.push(Layer::Block {
                name: prefix.clone(),
                layers: vec![
                    b.ln(&format!("{prefix}.norm"), dims[stage - 1])?,
                    b.conv(&format!("{prefix}.conv"), spec)?,
                ],
            });
        }
        for block in 0..depth {
            let prefix = format!("stages.{stage}.blocks.{block}");
            let dw = with_bias(ConvSpec::depthwise(dim, 1, cfg.kernel), cfg.conv_bias);
            let branch = b.inverted_bottleneck(&prefix, dw, cfg.conv_bias)?;
            let layer_scale = match cfg.layer_scale {
                Some(init) => Some(b.store.insert(
                    format!("{prefix}.gamma"),
                    ParamKind::NoDecay,
                    Tensor::full(&[dim], init as f32)?,
                )?),
                None => None,
            };
            let drop_path = if total > 1 {
                cfg.drop_path * index as f64 / (total - 1) as f64
            } else {
                cfg.drop_path
            };
            index += 1;
            layers.push(Layer::Block {
                name: prefix,
                layers: vec![Layer::Residual(Residual {
                    branch,
                    layer_scale,
                    drop_path,
                })],
            });
        }
    }
    let last = *dims.last().expect("validated non-empty");
    layers.push(Layer::Block {
        name: "head".into(),
        layers: vec![
            Layer::GlobalPool(cfg.pooling),
            b.ln("head.norm", last)?,
            b.linear("head.fc", last, cfg.num_classes)?,
        ],
    });
    Ok(layers)
}

fn pann(cfg: &ModelConfig, b: &mut Builder<'_>) -> Result<Vec<Layer>> {
    let mels = cfg.input.1;
    let mut layers = vec![Layer::Block {
        name: "bn0".into(),
        layers: vec![Layer::FreqBatchNorm(b.bn("bn0", mels)?)],
    }];
    let k = cfg.kernel;
    let pad = (k / 2, k / 2);
    let mut cin = 1;
    for (i, &c) in cfg.channels.iter().enumerate() {
        let prefix = format!("blocks.{i}");
        let regular = with_bias(ConvSpec::new(cin, c, (k, k)).with_padding(pad), cfg.conv_bias);
        let mut body = match cfg.block {
            BlockKind::Plain => vec![
                b.conv(&format!("{prefix}.conv"), regular)?,
                Layer::BatchNorm(b.bn(&format!("{prefix}.bn"), c)?),
                Layer::Relu,
            ],
            BlockKind::DoubleConv | BlockKind::DoubleConvSeparable => {
                let second = if cfg.block == BlockKind::DoubleConvSeparable {
                    ConvSpec::depthwise(c, 1, k)
                } else {
                    ConvSpec::new(c, c, (k, k)).with_padding(pad)
                };
                vec![
                    b.conv(&format!("{prefix}.conv1"), regular)?,
                    Layer::BatchNorm(b.bn(&format!("{prefix}.bn1"), c)?),
                    Layer::Relu,
                    b.conv(&format!("{prefix}.conv2"), with_bias(second, cfg.conv_bias))?,
                    Layer::BatchNorm(b.bn(&format!("{prefix}.bn2"), c)?),
                    Layer::Relu,
                ]
            }
            BlockKind::Cnn6Next => {
                let first = if i == 0 {
                    regular
                } else {
                    with_bias(ConvSpec::depthwise(cin, c / cin, k), cfg.conv_bias)
                };
                b.inverted_bottleneck(&prefix, first, cfg.conv_bias)?
            }
            BlockKind::ConvNeXt => unreachable!("rejected by validate"),
        };
        if i + 1 < cfg.channels.len() || cfg.pool_after_last {
            body.push(Layer::AvgPool2);
        }
        layers.push(Layer::Block {
            name: prefix,
            layers: body,
        });
        cin = c;
    }
    let hidden = cfg.hidden_fc.unwrap_or(cin);
    let mut head = vec![Layer::GlobalPool(cfg.pooling)];
    if cfg.hidden_fc.is_some() {
        head.push(b.linear("fc1", cin, hidden)?);
        head.push(Layer::Relu);
    }
    head.push(b.linear("fc_audioset", hidden, cfg.num_classes)?);
    layers.push(Layer::Block {
        name: "head".into(),
        layers: head,
    });
    Ok(layers)
}

/// Seeds a generator from a model name so repeated builds are identical.
pub fn name_seed(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}
