use crate::error::{Error, Result};
use crate::ops::PoolMode;

pub const AUDIOSET_CLASSES: usize = 527;

/// How each block of a model is built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    /// One `k x k` conv, BN, ReLU (CNN6).
    Plain,
    /// Two `3 x 3` convs each followed by BN and ReLU; the first doubles the
    /// channels (CNN14).
    DoubleConv,
    /// As [`BlockKind::DoubleConv`] with the second conv depthwise (CNN14Sep).
    DoubleConvSeparable,
    /// `7 x 7` conv (regular in the first block, depthwise with multiplier 2
    /// afterwards), channel LN, 4x inverted bottleneck, no residual.
    Cnn6Next,
    /// Depthwise `7 x 7`, channel LN, 4x inverted bottleneck, residual.
    ConvNeXt,
}

/// Which models use a patchify stem and strided-conv downsampling
/// (ConvNeXt) versus frequency batch norm and average pooling (PANN CNNs).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Pann,
    ConvNeXt,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub name: String,
    /// `(frames, mel bins)` the model is meant to consume.
    pub input: (usize, usize),
    pub family: Family,
    pub block: BlockKind,
    /// Stem patch size (ConvNeXt only).
    pub stem_patch: Option<usize>,
    /// Blocks per stage. PANN models have one block per stage.
    pub depths: Vec<usize>,
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Apply 2x2 average pooling after the last PANN block too.
    pub pool_after_last: bool,
    /// Hidden fully-connected layer before the classifier (PANN models).
    pub hidden_fc: Option<usize>,
    pub num_classes: usize,
    pub pooling: PoolMode,
    /// Largest drop-path rate; block `i` of `B` uses `rate * i / (B - 1)`.
    pub drop_path: f64,
    /// Initial layer-scale value, `None` to disable layer scale.
    pub layer_scale: Option<f64>,
    /// Bias on convolutions.
    pub conv_bias: bool,
}

pub const MODEL_NAMES: [&str; 6] = ["cnn6", "cnn6next", "cnn14", "cnn14sep", "convnext-tiny", "convnext-small"];

/// Reduced ConvNeXt used for desk-scale training.
pub const TOY_MODEL: &str = "convnext-toy";

impl ModelConfig {
    pub fn cnn6() -> Self {
        Self {
            name: "cnn6".into(),
            input: (1000, 64),
            family: Family::Pann,
            block: BlockKind::Plain,
            stem_patch: None,
            depths: vec![1; 4],
            channels: vec![64, 128, 256, 512],
            kernel: 5,
            pool_after_last: false,
            hidden_fc: Some(512),
            num_classes: AUDIOSET_CLASSES,
            pooling: PoolMode::Pann,
            drop_path: 0.0,
            layer_scale: None,
            conv_bias: false,
        }
    }

    pub fn cnn6next() -> Self {
        Self {
            name: "cnn6next".into(),
            block: BlockKind::Cnn6Next,
            kernel: 7,
            conv_bias: true,
            ..Self::cnn6()
        }
    }

    pub fn cnn14() -> Self {
        Self {
            name: "cnn14".into(),
            block: BlockKind::DoubleConv,
            depths: vec![1; 6],
            channels: vec![64, 128, 256, 512, 1024, 2048],
            kernel: 3,
            pool_after_last: true,
            hidden_fc: Some(2048),
            ..Self::cnn6()
        }
    }

    pub fn cnn14sep() -> Self {
        Self {
            name: "cnn14sep".into(),
            block: BlockKind::DoubleConvSeparable,
            ..Self::cnn14()
        }
    }

    pub fn convnext_tiny() -> Self {
        Self {
            name: "convnext-tiny".into(),
            input: (1008, 224),
            family: Family::ConvNeXt,
            block: BlockKind::ConvNeXt,
            stem_patch: Some(4),
            depths: vec![3, 3, 9, 3],
            channels: vec![96, 192, 384, 768],
            kernel: 7,
            pool_after_last: false,
            hidden_fc: None,
            num_classes: AUDIOSET_CLASSES,
            pooling: PoolMode::Gap,
            drop_path: 0.4,
            layer_scale: Some(1e-6),
            conv_bias: true,
        }
    }

    pub fn convnext_small() -> Self {
        Self {
            name: "convnext-small".into(),
            depths: vec![3, 3, 27, 3],
            ..Self::convnext_tiny()
        }
    }

    /// Depths `[1, 1, 1, 1]`, channels `[24, 48, 96, 192]`, on 64x64 inputs.
    pub fn convnext_toy() -> Self {
        Self {
            name: TOY_MODEL.into(),
            input: (64, 64),
            depths: vec![1, 1, 1, 1],
            channels: vec![24, 48, 96, 192],
            drop_path: 0.0,
            ..Self::convnext_tiny()
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "cnn6" => Ok(Self::cnn6()),
            "cnn6next" => Ok(Self::cnn6next()),
            "cnn14" => Ok(Self::cnn14()),
            "cnn14sep" => Ok(Self::cnn14sep()),
            "convnext-tiny" => Ok(Self::convnext_tiny()),
            "convnext-small" => Ok(Self::convnext_small()),
            TOY_MODEL => Ok(Self::convnext_toy()),
            other => Err(Error::invalid(format!(
                "unknown model {other:?}; valid names: {}, {TOY_MODEL}",
                MODEL_NAMES.join(", ")
            ))),
        }
    }

    pub fn all() -> Vec<Self> {
        MODEL_NAMES.iter().map(|n| Self::by_name(n).expect("known name")).collect()
    }

    pub fn total_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::invalid(format!("{}: {msg}", self.name)));
        if self.depths.is_empty() || self.depths.len() != self.channels.len() {
            return bad(format!(
                "{} depths for {} channel widths",
                self.depths.len(),
                self.channels.len()
            ));
        }
        if self.depths.iter().chain(&self.channels).any(|&v| v == 0) {
            return bad("zero depth or width".into());
        }
        if self.num_classes == 0 || self.kernel == 0 {
            return bad("zero classes or kernel".into());
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop-path rate {} outside [0, 1)", self.drop_path));
        }
        match self.family {
            Family::ConvNeXt => {
                if self.stem_patch.is_none() {
                    return bad("ConvNeXt needs a stem patch size".into());
                }
                if self.block != BlockKind::ConvNeXt {
                    return bad("ConvNeXt family needs ConvNeXt blocks".into());
                }
            }
            Family::Pann => {
                if self.depths.iter().any(|&d| d != 1) {
                    return bad("PANN models have one block per stage".into());
                }
                if self.block == BlockKind::ConvNeXt {
                    return bad("ConvNeXt blocks need the ConvNeXt family".into());
                }
                if self.block == BlockKind::Cnn6Next && self.channels.windows(2).any(|w| w[1] != 2 * w[0]) {
                    return bad("CNN6Next widths must double from block to block".into());
                }
            }
        }
        Ok(())
    }
}
