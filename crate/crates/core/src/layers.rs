//! Parameterized building blocks shared by the encoder, decoder and head.

use crate::error::Result;
use crate::graph::{NormKind, Var};
use crate::params::{Ctx, Mode, ParamBuilder, ParamId, StatUpdate};
use crate::rng;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl Conv2d {
    /// Convolution with "same" padding for odd kernels at stride 1.
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize, bias: bool) -> Self {
        Self::with(pb, name, cin, cout, k, 1, k / 2, 1, bias)
    }

    /// Non-overlapping `k×k` patch projection with stride `k`.
    pub fn patchify(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::with(pb, name, cin, cout, k, k, 0, 1, true)
    }

    pub fn depthwise(pb: &mut ParamBuilder, name: &str, c: usize, k: usize) -> Self {
        Self::with(pb, name, c, c, k, 1, k / 2, c, true)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with(
        pb: &mut ParamBuilder,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        pb.scope(name, |pb| {
            let fan_in = (cin / groups * k * k) as f64;
            let bound = 1.0 / fan_in.sqrt();
            let w = pb.uniform(&[cout, cin / groups, k, k], bound);
            let w = pb.add("weight", w);
            let b = bias.then(|| pb.add("bias", Tensor::zeros(&[cout])));
            Self {
                w,
                b,
                stride,
                pad,
                groups,
            }
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.g.conv2d(x, w, b, self.stride, self.pad, self.groups)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        pb.scope(name, |pb| {
            let w = pb.uniform(&[dout, din], 1.0 / (din as f64).sqrt());
            let w = pb.add("weight", w);
            let b = bias.then(|| pb.add("bias", Tensor::zeros(&[dout])));
            Self { w, b }
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = self.b.map(|b| cx.p(b));
        cx.g.linear(x, w, b)
    }
}

/// Layer normalization over the channel axis of `[N, C, ...]`.
#[derive(Clone, Debug)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        pb.scope(name, |pb| Self {
            gamma: pb.add("gamma", Tensor::ones(&[c])),
            beta: pb.add("beta", Tensor::zeros(&[c])),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        Ok(cx.g.normalize(x, NormKind::LayerNorm, g, b, NORM_EPS)?.0)
    }
}

/// Batch normalization with running statistics for evaluation.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        pb.scope(name, |pb| Self {
            gamma: pb.add("gamma", Tensor::ones(&[c])),
            beta: pb.add("beta", Tensor::zeros(&[c])),
            running_mean: pb.add_buffer("running_mean", Tensor::zeros(&[c])),
            running_var: pb.add_buffer("running_var", Tensor::ones(&[c])),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (g, b) = (cx.p(self.gamma), cx.p(self.beta));
        if cx.is_train() {
            let shape = cx.g.shape(x).to_vec();
            let count = shape[0] * shape[2..].iter().product::<usize>();
            let (y, mean, var) = cx.g.normalize(x, NormKind::BatchNorm, g, b, NORM_EPS)?;
            cx.stat_updates.push(StatUpdate {
                mean_buf: self.running_mean,
                var_buf: self.running_var,
                mean,
                var,
                count,
            });
            Ok(y)
        } else {
            let mean = cx.params.value(self.running_mean).data().to_vec();
            let var = cx.params.value(self.running_var).data().to_vec();
            cx.g.channel_affine(x, g, b, &mean, &var, NORM_EPS)
        }
    }
}

/// Inverted dropout keyed by `(seed, step, layer)`; identity in evaluation.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
    pub layer: u64,
}

impl Dropout {
    pub fn new(pb: &mut ParamBuilder, p: f64) -> Self {
        assert!((0.0..1.0).contains(&p));
        Self {
            p,
            layer: pb.layer_id(),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        match cx.mode {
            Mode::Train { seed, step } if self.p > 0.0 => {
                let shape = cx.g.shape(x).to_vec();
                let n = cx.g.value(x).len();
                let mask = rng::dropout_mask(self.p, n, seed, step, self.layer);
                let m = cx.g.constant(Tensor::new(&shape, mask)?);
                cx.g.mul(x, m)
            }
            _ => Ok(x),
        }
    }
}

/// Stochastic depth: drops a residual branch per sample, rescaling survivors by `1/(1-r)`.
#[derive(Clone, Debug)]
pub struct DropPath {
    pub rate: f64,
    pub layer: u64,
}

impl DropPath {
    pub fn new(pb: &mut ParamBuilder, rate: f64) -> Self {
        assert!((0.0..1.0).contains(&rate), "drop-path rate {rate} outside [0, 1)");
        Self {
            rate,
            layer: pb.layer_id(),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        match cx.mode {
            Mode::Train { seed, step } if self.rate > 0.0 => {
                let shape = cx.g.shape(x).to_vec();
                let mut mshape = vec![1; shape.len()];
                mshape[0] = shape[0];
                let mask = rng::dropout_mask(self.rate, shape[0], seed, step, self.layer);
                let m = cx.g.constant(Tensor::new(&mshape, mask)?);
                cx.g.mul(x, m)
            }
            _ => Ok(x),
        }
    }
}

/// Fold a batch-norm update into the running buffers (unbiased batch variance).
pub fn apply_stat_update(store: &mut crate::params::ParamStore, u: &StatUpdate) {
    let unbias = if u.count > 1 {
        u.count as f64 / (u.count - 1) as f64
    } else {
        1.0
    };
    for (r, m) in store.value_mut(u.mean_buf).data_mut().iter_mut().zip(&u.mean) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
    }
    for (r, v) in store.value_mut(u.var_buf).data_mut().iter_mut().zip(&u.var) {
        *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
    }
}
