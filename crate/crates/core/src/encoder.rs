//! Four-stage state-space encoder with a frequency prompt generator per stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcpg::{Fcpg, FcpgOptions};
use crate::graph::Var;
use crate::layers::{ChannelNorm, Conv2d};
use crate::params::{Ctx, ParamBuilder};
use crate::ssm::VssBlock;

/// Spatial reduction of the patch embedding.
pub const PATCH: usize = 4;
/// Total stride of the last stage; inputs must be divisible by it.
pub const MAX_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    pub state_dim: usize,
    pub fcpg_enabled: bool,
    pub fcpg: FcpgOptions,
    /// Drop-path rate of the deepest block; earlier blocks ramp up from 0.
    pub drop_path: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.state_dim == 0 {
            return Err(Error::Config("input channels and state size must be positive".into()));
        }
        if self.dims[0] == 0 || self.dims.windows(2).any(|w| w[1] != 2 * w[0]) {
            return Err(Error::Config(format!(
                "stage widths {:?} must double from stage to stage",
                self.dims
            )));
        }
        if self.depths.contains(&0) {
            return Err(Error::Config(format!("stage depths {:?} must be at least 1", self.depths)));
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return Err(Error::Config(format!("drop-path rate {} outside [0, 1)", self.drop_path)));
        }
        Ok(())
    }

    /// Linearly increasing drop-path rate for each block, 0 at the first.
    pub fn drop_path_schedule(&self) -> Vec<f64> {
        let total: usize = self.depths.iter().sum();
        (0..total)
            .map(|i| {
                if total > 1 {
                    self.drop_path * i as f64 / (total - 1) as f64
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Encoder outputs at strides 4, 8, 16 and 32 of the encoder input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<VssBlock>,
    pub fcpg: Option<Fcpg>,
    pub down: Option<(Conv2d, ChannelNorm)>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embed: Conv2d,
    pub embed_norm: ChannelNorm,
    pub stages: Vec<Stage>,
}

impl Encoder {
    pub fn new(pb: &mut ParamBuilder, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let rates = cfg.drop_path_schedule();
        pb.scope("encoder", |pb| {
            let embed = Conv2d::patchify(pb, "embed", cfg.in_channels, cfg.dims[0], PATCH);
            let embed_norm = ChannelNorm::new(pb, "embed_norm", cfg.dims[0]);
            let mut stages = Vec::with_capacity(4);
            let mut k = 0;
            for (i, (&c, &depth)) in cfg.dims.iter().zip(&cfg.depths).enumerate() {
                let stage = pb.scope(format!("stage{}", i + 1), |pb| -> Result<Stage> {
                    let blocks = (0..depth)
                        .map(|j| {
                            let b = VssBlock::new(pb, &format!("block{j}"), c, cfg.state_dim, rates[k]);
                            k += 1;
                            b
                        })
                        .collect();
                    let fcpg = if cfg.fcpg_enabled {
                        Some(Fcpg::new(pb, "fcpg", c, cfg.fcpg)?)
                    } else {
                        None
                    };
                    let down = (i < 3).then(|| {
                        (
                            Conv2d::with(pb, "down", c, 2 * c, 2, 2, 0, 1, true),
                            ChannelNorm::new(pb, "down_norm", 2 * c),
                        )
                    });
                    Ok(Stage { blocks, fcpg, down })
                })?;
                stages.push(stage);
            }
            Ok(Self {
                cfg: cfg.clone(),
                embed,
                embed_norm,
                stages,
            })
        })
    }

    /// Stride-4 convolutional embedding followed by channel normalization.
    pub fn patch_embed(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(PATCH) || !s[3].is_multiple_of(PATCH) {
            return Err(Error::Config(format!(
                "patch embedding needs height and width divisible by {PATCH}, got {s:?}"
            )));
        }
        let e = self.embed.forward(cx, x)?;
        self.embed_norm.forward(cx, e)
    }

    /// Run all stages on `x: [N, C_in, H, W']`.
    pub fn encode(&self, cx: &mut Ctx, x: Var) -> Result<FeaturePyramid> {
        let s = cx.g.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(MAX_STRIDE) || !s[3].is_multiple_of(MAX_STRIDE) {
            return Err(Error::Config(format!(
                "encoder input height and width must be divisible by {MAX_STRIDE}, got {s:?}"
            )));
        }
        if s[1] != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "encoder expects {} input channels, got {}",
                self.cfg.in_channels, s[1]
            )));
        }
        let mut h = self.patch_embed(cx, x)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            for b in &stage.blocks {
                h = b.forward(cx, h)?;
            }
            if let Some(f) = &stage.fcpg {
                h = f.forward(cx, h)?;
            }
            levels.push(h);
            if let Some((conv, norm)) = &stage.down {
                h = conv.forward(cx, h)?;
                h = norm.forward(cx, h)?;
            }
        }
        Ok(FeaturePyramid {
            levels: levels.try_into().expect("four stages"),
        })
    }
}
