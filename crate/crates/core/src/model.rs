//! Full change-detection model: bitemporal input layout, encoder, decoder and head.

use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::encoder::{Encoder, EncoderConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::fcpg::FcpgOptions;
use crate::head::{HeadOutputs, PredictionHead, TaskKind};
use crate::params::{Ctx, ParamBuilder, ParamStore};
use crate::scan::ConcatMode;
use crate::tensor::Tensor;

/// Channels per input image.
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: TaskKind,
    pub concat: ConcatMode,
    pub encoder: EncoderConfig,
    pub dec_channels: usize,
    pub head_hidden: usize,
}

impl ModelConfig {
    fn preset(task: TaskKind, dims: [usize; 4], depths: [usize; 4], state_dim: usize, dec: usize, hid: usize) -> Self {
        Self {
            task,
            concat: ConcatMode::Horizontal,
            encoder: EncoderConfig {
                in_channels: IMAGE_CHANNELS,
                dims,
                depths,
                state_dim,
                fcpg_enabled: true,
                fcpg: FcpgOptions::default(),
                drop_path: 0.1,
            },
            dec_channels: dec,
            head_hidden: hid,
        }
    }

    /// Desk-scale default.
    pub fn toy(task: TaskKind) -> Self {
        Self::preset(task, [16, 32, 64, 128], [1, 1, 2, 1], 8, 64, 128)
    }

    /// Smallest configuration, used for finite-difference checks.
    pub fn tiny(task: TaskKind) -> Self {
        Self::preset(task, [4, 8, 16, 32], [1, 1, 1, 1], 4, 8, 8)
    }

    /// Narrow configuration for quick overfitting runs.
    pub fn small(task: TaskKind) -> Self {
        Self::preset(task, [8, 16, 32, 64], [1, 1, 1, 1], 8, 16, 16)
    }

    pub fn with_concat(mut self, concat: ConcatMode) -> Self {
        self.concat = concat;
        self.encoder.in_channels = match concat {
            ConcatMode::Horizontal => IMAGE_CHANNELS,
            ConcatMode::Channel => 2 * IMAGE_CHANNELS,
        };
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.encoder.validate()?;
        let expect = match self.concat {
            ConcatMode::Horizontal => IMAGE_CHANNELS,
            ConcatMode::Channel => 2 * IMAGE_CHANNELS,
        };
        if self.encoder.in_channels != expect {
            return Err(Error::Config(format!(
                "{:?} concatenation needs {expect} encoder input channels, got {}",
                self.concat, self.encoder.in_channels
            )));
        }
        if self.dec_channels == 0 {
            return Err(Error::Config("decoder width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub head: PredictionHead,
}

#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    pub head: HeadOutputs,
    pub pyramid: FeaturePyramid,
}

impl Model {
    /// Build the model and its freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut pb = ParamBuilder::new(seed);
        let encoder = Encoder::new(&mut pb, &cfg.encoder)?;
        let decoder = Decoder::new(&mut pb, &cfg.encoder.dims, cfg.dec_channels);
        let head = PredictionHead::new(&mut pb, cfg.task, cfg.concat, cfg.dec_channels, cfg.head_hidden)?;
        let mut store = pb.finish();
        // Parameters stay f32-representable so checkpoints round-trip exactly.
        store.round_to_f32();
        Ok((
            Self {
                cfg: cfg.clone(),
                encoder,
                decoder,
                head,
            },
            store,
        ))
    }

    /// Encoder input for a batch of image pairs `[N, 3, H, W]`.
    pub fn layout(&self, pre: &Tensor, post: &Tensor) -> Result<Tensor> {
        if pre.shape() != post.shape() || pre.rank() != 4 || pre.shape()[1] != IMAGE_CHANNELS {
            return Err(Error::Shape {
                op: "model_input",
                detail: format!(
                    "pre {:?} and post {:?} must both be [N, {IMAGE_CHANNELS}, H, W]",
                    pre.shape(),
                    post.shape()
                ),
            });
        }
        let pair = crate::scan::BitemporalPair::new(pre.clone(), post.clone())?;
        match self.cfg.concat {
            ConcatMode::Horizontal => Ok(crate::scan::horizontal_concat(&pair)),
            ConcatMode::Channel => crate::scan::channel_concat(&pair),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, pre: &Tensor, post: &Tensor) -> Result<ModelOutput> {
        let x = self.layout(pre, post)?;
        let x = cx.g.constant(x);
        let pyramid = self.encoder.encode(cx, x)?;
        let feat = self.decoder.forward(cx, &pyramid)?;
        let head = self.head.forward(cx, feat)?;
        Ok(ModelOutput { head, pyramid })
    }
}
