//! Top-down feature pyramid decoder.
//!
//! Every encoder level is projected to a common width, fused top-down with
//! `N_i = conv3×3(up2(N_{i+1}) + P_i)`, and the four fused levels are
//! upsampled to the finest one, concatenated, refined by a 3×3 convolution and
//! upsampled ×4 back to the encoder input resolution.

use crate::encoder::{FeaturePyramid, PATCH};
use crate::error::{contract_err, Result};
use crate::graph::Var;
use crate::layers::Conv2d;
use crate::params::{Ctx, ParamBuilder, ParamGroup};

#[derive(Clone, Debug)]
pub struct Decoder {
    pub channels: usize,
    pub lateral: Vec<Conv2d>,
    /// Smoothing convolutions for levels 1..=3.
    pub smooth: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl Decoder {
    pub fn new(pb: &mut ParamBuilder, dims: &[usize; 4], channels: usize) -> Self {
        pb.in_group(ParamGroup::Decoder, |pb| {
            pb.scope("decoder", |pb| Self {
                channels,
                lateral: dims
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| Conv2d::new(pb, &format!("lateral{}", i + 1), d, channels, 1, true))
                    .collect(),
                smooth: (1..4)
                    .map(|i| Conv2d::new(pb, &format!("smooth{i}"), channels, channels, 3, true))
                    .collect(),
                fuse: Conv2d::new(pb, "fuse", 4 * channels, channels, 3, true),
            })
        })
    }

    /// 1×1 projections of every level to the decoder width.
    pub fn lateral_project(&self, cx: &mut Ctx, f: &FeaturePyramid) -> Result<[Var; 4]> {
        let mut out = [f.levels[0]; 4];
        for (i, (conv, &x)) in self.lateral.iter().zip(&f.levels).enumerate() {
            out[i] = conv.forward(cx, x)?;
        }
        Ok(out)
    }

    /// `N_4 = P_4`, `N_i = conv3×3(up2(N_{i+1}) + P_i)`.
    pub fn topdown_fuse(&self, cx: &mut Ctx, p: &[Var; 4]) -> Result<[Var; 4]> {
        for i in 0..3 {
            let (a, b) = (cx.g.shape(p[i]).to_vec(), cx.g.shape(p[i + 1]).to_vec());
            if a[2] != 2 * b[2] || a[3] != 2 * b[3] {
                return contract_err(
                    "topdown_fuse",
                    format!("level {} is {a:?} but level {} is {b:?}; expected a factor of 2", i + 1, i + 2),
                );
            }
        }
        let mut n = *p;
        for i in (0..3).rev() {
            let up = cx.g.upsample(n[i + 1], 2)?;
            let sum = cx.g.add(up, p[i])?;
            n[i] = self.smooth[i].forward(cx, sum)?;
        }
        Ok(n)
    }

    /// `conv3×3(concat(up8 N_4, up4 N_3, up2 N_2, N_1))`, then upsampled ×4.
    pub fn fuse_final(&self, cx: &mut Ctx, n: &[Var; 4]) -> Result<Var> {
        let mut parts = vec![n[0]];
        for (i, &lvl) in n.iter().enumerate().skip(1) {
            parts.push(cx.g.upsample(lvl, 1 << i)?);
        }
        parts.reverse();
        let cat = cx.g.concat(&parts, 1)?;
        let c = self.fuse.forward(cx, cat)?;
        cx.g.upsample(c, PATCH)
    }

    pub fn forward(&self, cx: &mut Ctx, f: &FeaturePyramid) -> Result<Var> {
        let p = self.lateral_project(cx, f)?;
        let n = self.topdown_fuse(cx, &p)?;
        self.fuse_final(cx, &n)
    }
}
