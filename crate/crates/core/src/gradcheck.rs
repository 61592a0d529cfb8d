//! Central finite-difference checks of every differentiable operation.
//!
//! Each case builds a scalar `Σ out ⊙ R` with a fixed random projection `R`
//! and compares the analytic gradient of every input and parameter tensor to
//! `(f(x + h) − f(x − h)) / 2h`. Large tensors are checked at a seeded subset
//! of coordinates. The error of a tensor is `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)` over
//! the checked coordinates; the denominator is floored at a small fraction of
//! the largest gradient norm in the case (see [`GradcheckOptions`]).

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{generate_sample, make_batch, DistractorConfig};
use crate::decoder::Decoder;
use crate::encoder::{Encoder, FeaturePyramid};
use crate::error::Result;
use crate::fcpg::{Fcpg, FcpgOptions, SpatialModulator};
use crate::graph::{Activation, Graph, NormKind, Var};
use crate::head::{HeadOutputs, PredictionHead, TaskKind};
use crate::layers::Conv2d;
use crate::loss::{
    bcd_loss, bda_loss, cross_entropy, lovasz_hinge, lovasz_softmax, scd_loss, similarity_loss, LossWeights,
    TaskLabels, IGNORE,
};
use crate::model::{Model, ModelConfig};
use crate::params::{Ctx, Mode, ParamBuilder, ParamStore};
use crate::scan::{horizontal_concat_var, inverse_scan_var, scan_var, split_halves_var, ConcatMode, ScanDirection};
use crate::ssm::{SelectiveSsm, VssBlock};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates checked per tensor; smaller tensors are checked fully.
    pub samples: usize,
    /// Absolute floor of the relative-error denominator.
    pub floor: f64,
    /// Floor as a fraction of the largest gradient norm in the case, so
    /// tensors with negligible gradients are judged on absolute error.
    pub relative_floor: f64,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            samples: 6,
            floor: 1e-6,
            relative_floor: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
    /// Tensor with the largest error.
    pub worst: String,
    pub coords: usize,
    /// Coordinates re-estimated with a smaller step after a kink was detected.
    pub kinks: usize,
    pub passed: bool,
    pub seconds: f64,
}

type Build = Box<dyn Fn(&mut Ctx, &[Var]) -> Result<Var>>;

/// One differentiable function of some input tensors and parameters.
pub struct Case {
    pub name: String,
    pub params: ParamStore,
    pub inputs: Vec<Tensor>,
    pub mode: Mode,
    build: Build,
}

impl Case {
    pub fn new(
        name: &str,
        params: ParamStore,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Ctx, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name: name.to_string(),
            params,
            inputs,
            mode: Mode::Eval,
            build: Box::new(build),
        }
    }

    /// Graph-only case without parameters.
    pub fn op(name: &str, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> Self {
        Self::new(name, ParamBuilder::new(0).finish(), inputs, move |cx, v| build(&mut cx.g, v))
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    fn output(&self, params: &ParamStore, inputs: &[Tensor], frozen: &[Tensor]) -> Result<Tensor> {
        let mut cx = Ctx::new(params, self.mode);
        cx.g.freeze_detached(frozen.to_vec());
        let vars: Vec<Var> = inputs.iter().map(|t| cx.g.constant(t.clone())).collect();
        let out = (self.build)(&mut cx, &vars)?;
        Ok(cx.g.value(out).clone())
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k.max(8) {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, k).into_vec();
        v.sort_unstable();
        v
    }
}

fn rel_err(a: &[f64], n: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(n)).max(floor)
}

/// Central difference at one coordinate. `eval(δ)` is the objective with
/// the coordinate shifted by `δ`. When the one-sided quotients disagree the
/// step straddles a kink (ReLU) and the estimate is redone with a step a
/// hundred times smaller, at most twice.
fn central(f0: f64, h: f64, eval: &mut dyn FnMut(f64) -> Result<f64>) -> Result<(f64, bool)> {
    let mut step = h;
    let mut est = 0.0;
    for level in 0..3 {
        let (fp, fm) = (eval(step)?, eval(-step)?);
        let (fwd, bwd) = ((fp - f0) / step, (f0 - fm) / step);
        est = (fp - fm) / (2.0 * step);
        let noise = 1e-13 * (f0.abs() + 1.0) / step;
        if (fwd - bwd).abs() <= 1e-4 * fwd.abs().max(bwd.abs()) + noise {
            return Ok((est, level > 0));
        }
        step /= 100.0;
    }
    Ok((est, true))
}

/// Check one case.
pub fn check(case: &Case, opts: &GradcheckOptions) -> Result<OpReport> {
    let start = Instant::now();
    let out0 = case.output(&case.params, &case.inputs, &[])?;
    let r = projection(out0.shape(), opts.seed);

    let mut cx = Ctx::new(&case.params, case.mode);
    let vars: Vec<Var> = case.inputs.iter().map(|t| cx.g.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut cx, &vars)?;
    let rv = cx.g.constant(r.clone());
    let m = cx.g.mul(out, rv)?;
    let loss = cx.g.sum(m);
    let bound = cx.bound_params();
    let frozen = cx.g.detached_values().to_vec();
    let grads = cx.g.backward(loss)?;

    let f = |params: &ParamStore, inputs: &[Tensor]| -> Result<f64> {
        Ok(dot(&case.output(params, inputs, &frozen)?, &r))
    };
    let f0 = f(&case.params, &case.inputs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut checked: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut kinks = 0;

    for (i, v) in vars.iter().enumerate() {
        let g = grads.get(*v).unwrap_or_else(|| Tensor::zeros(case.inputs[i].shape()));
        let idx = coords(g.len(), opts.samples, &mut rng);
        let mut inputs = case.inputs.clone();
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &k in &idx {
            let x0 = inputs[i].data()[k];
            let (d, kink) = central(f0, opts.h, &mut |delta| {
                inputs[i].data_mut()[k] = x0 + delta;
                let y = f(&case.params, &inputs);
                inputs[i].data_mut()[k] = x0;
                y
            })?;
            kinks += usize::from(kink);
            a.push(g.data()[k]);
            n.push(d);
        }
        checked.push((format!("input{i}"), a, n));
    }

    let mut params = case.params.clone();
    for (id, v) in bound {
        let e = case.params.get(id);
        if !e.trainable {
            continue;
        }
        let g = grads.get(v).unwrap_or_else(|| Tensor::zeros(e.value.shape()));
        let idx = coords(g.len(), opts.samples, &mut rng);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for &k in &idx {
            let x0 = params.value(id).data()[k];
            let (d, kink) = central(f0, opts.h, &mut |delta| {
                params.value_mut(id).data_mut()[k] = x0 + delta;
                let y = f(&params, &case.inputs);
                params.value_mut(id).data_mut()[k] = x0;
                y
            })?;
            kinks += usize::from(kink);
            a.push(g.data()[k]);
            n.push(d);
        }
        checked.push((e.name.clone(), a, n));
    }

    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = checked.iter().map(|(_, a, _)| norm(a)).fold(0.0, f64::max);
    let floor = opts.floor.max(opts.relative_floor * scale);
    let mut worst = (0.0f64, String::new());
    let mut coords_total = 0;
    for (name, a, n) in checked {
        let e = rel_err(&a, &n, floor);
        coords_total += a.len();
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, name);
        }
    }
    let (max_rel_err, worst) = worst;
    Ok(OpReport {
        op: case.name.clone(),
        max_rel_err,
        worst,
        coords: coords_total,
        kinks,
        passed: max_rel_err <= opts.tol,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn pos_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(0.5..1.5))
}

fn labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..k)).collect()
}

/// Concatenate all head maps along the channel axis.
fn head_concat(g: &mut Graph, out: &HeadOutputs) -> Result<Var> {
    let vars: Vec<Var> = out.named().into_iter().map(|(_, v)| v).collect();
    g.concat(&vars, 1)
}

fn unary(name: &str, kind: Activation, rng: &mut ChaCha8Rng) -> Case {
    Case::op(name, vec![rand_t(rng, &[2, 3, 4])], move |g, v| Ok(g.activation(v[0], kind)))
}

/// Primitive operations of the differentiation core.
pub fn tensor_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut v = vec![
        Case::op("add", vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])], |g, v| g.add(v[0], v[1])),
        Case::op("sub", vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])], |g, v| g.sub(v[0], v[1])),
        Case::op("mul", vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])], |g, v| g.mul(v[0], v[1])),
        Case::op("div", vec![rand_t(r, &[2, 3]), pos_t(r, &[2, 3])], |g, v| g.div(v[0], v[1])),
        Case::op("scale", vec![rand_t(r, &[5])], |g, v| Ok(g.scale(v[0], -1.7))),
        Case::op("add_scalar", vec![rand_t(r, &[5])], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        unary("relu", Activation::Relu, r),
        unary("gelu", Activation::Gelu, r),
        unary("silu", Activation::Silu, r),
        unary("sigmoid", Activation::Sigmoid, r),
        unary("softplus", Activation::Softplus, r),
        Case::op("exp", vec![rand_t(r, &[6])], |g, v| Ok(g.exp(v[0]))),
        Case::op("neg", vec![rand_t(r, &[6])], |g, v| Ok(g.neg(v[0]))),
        Case::op("sqrt", vec![pos_t(r, &[6])], |g, v| Ok(g.sqrt(v[0]))),
        Case::op("square", vec![rand_t(r, &[6])], |g, v| Ok(g.square(v[0]))),
        Case::op(
            "conv2d",
            vec![rand_t(r, &[2, 2, 4, 4]), rand_t(r, &[3, 2, 3, 3]), rand_t(r, &[3])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1),
        ),
        Case::op("conv2d_1x1", vec![rand_t(r, &[1, 3, 3, 3]), rand_t(r, &[2, 3, 1, 1])], |g, v| {
            g.conv2d(v[0], v[1], None, 1, 0, 1)
        }),
        Case::op("conv2d_strided", vec![rand_t(r, &[1, 2, 8, 8]), rand_t(r, &[3, 2, 2, 2])], |g, v| {
            g.conv2d(v[0], v[1], None, 2, 0, 1)
        }),
        Case::op(
            "conv2d_depthwise",
            vec![rand_t(r, &[1, 4, 5, 5]), rand_t(r, &[4, 1, 3, 3]), rand_t(r, &[4])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 4),
        ),
        Case::op(
            "linear",
            vec![rand_t(r, &[2, 3, 4]), rand_t(r, &[5, 4]), rand_t(r, &[5])],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        Case::op(
            "batch_norm",
            vec![rand_t(r, &[4, 3, 2, 2]), pos_t(r, &[3]), rand_t(r, &[3])],
            |g, v| Ok(g.normalize(v[0], NormKind::BatchNorm, v[1], v[2], 1e-5)?.0),
        ),
        Case::op(
            "layer_norm",
            vec![rand_t(r, &[2, 5, 3, 2]), pos_t(r, &[5]), rand_t(r, &[5])],
            |g, v| Ok(g.normalize(v[0], NormKind::LayerNorm, v[1], v[2], 1e-5)?.0),
        ),
        Case::op(
            "channel_affine",
            vec![rand_t(r, &[2, 3, 2, 2]), pos_t(r, &[3]), rand_t(r, &[3])],
            |g, v| g.channel_affine(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0], 1e-5),
        ),
        Case::op("upsample", vec![rand_t(r, &[1, 2, 3, 4])], |g, v| g.upsample(v[0], 2)),
        Case::op("upsample_x4", vec![rand_t(r, &[1, 1, 2, 2])], |g, v| g.upsample(v[0], 4)),
        Case::op("gather", vec![rand_t(r, &[6])], |g, v| g.gather(v[0], &[2, 4], vec![0, 5, 5, 1, 2, 3, 4, 0])),
        Case::op("concat", vec![rand_t(r, &[2, 1, 3]), rand_t(r, &[2, 2, 3])], |g, v| g.concat(&[v[0], v[1]], 1)),
        Case::op("slice", vec![rand_t(r, &[2, 4, 3])], |g, v| g.slice(v[0], 1, 1, 2)),
        Case::op("spectral_filter", vec![rand_t(r, &[1, 2, 6, 8]), pos_t(r, &[6, 8])], |g, v| {
            g.spectral_filter(v[0], v[1])
        }),
        Case::op(
            "selective_scan",
            vec![
                rand_t(r, &[2, 5, 3]),
                pos_t(r, &[2, 5, 3]).map(|x| 0.2 * x),
                pos_t(r, &[3, 4]).map(|x| -x),
                rand_t(r, &[2, 5, 4]),
                rand_t(r, &[2, 5, 4]),
                rand_t(r, &[3]),
            ],
            |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]),
        ),
        Case::op("sum", vec![rand_t(r, &[3, 2])], |g, v| Ok(g.sum(v[0]))),
        Case::op("mean", vec![rand_t(r, &[3, 2])], |g, v| Ok(g.mean(v[0]))),
        Case::op("mean_spatial", vec![rand_t(r, &[2, 3, 2, 3])], |g, v| g.mean_spatial(v[0])),
        Case::op("group_mean", vec![rand_t(r, &[1, 6, 2, 2])], |g, v| g.group_mean(v[0], 3)),
        Case::op("repeat_groups", vec![rand_t(r, &[1, 2, 2, 2])], |g, v| g.repeat_groups(v[0], 3)),
        Case::op("softmax", vec![rand_t(r, &[2, 4, 2, 2])], |g, v| g.softmax(v[0])),
    ];
    // Stage-4 maps of a 32-pixel pair are a single row; keep that shape covered.
    v.push(Case::op("spectral_filter_1xw", vec![rand_t(r, &[1, 1, 1, 2]), pos_t(r, &[1, 2])], |g, v| {
        g.spectral_filter(v[0], v[1])
    }));
    v
}

/// Scan-order rearrangements over the bitemporal plane.
pub fn scan_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let r = &mut rng;
    let mut v = vec![
        Case::op("horizontal_concat", vec![rand_t(r, &[1, 2, 2, 3]), rand_t(r, &[1, 2, 2, 3])], |g, v| {
            horizontal_concat_var(g, v[0], v[1])
        }),
        Case::op("split_halves", vec![rand_t(r, &[1, 2, 2, 4])], |g, v| {
            let (a, b) = split_halves_var(g, v[0])?;
            let b2 = g.scale(b, 2.0);
            g.add(a, b2)
        }),
    ];
    for dir in ScanDirection::ALL {
        let x = rand_t(r, &[1, 2, 3, 4]);
        v.push(Case::op(&format!("scan_{dir:?}").to_lowercase(), vec![x], move |g, v| {
            let s = scan_var(g, v[0], dir)?;
            let s2 = g.square(s);
            inverse_scan_var(g, s2, dir, 3, 4)
        }));
    }
    v
}

/// State-space layers.
pub fn ssm_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let mut pb = ParamBuilder::new(seed);
    let ssm = SelectiveSsm::new(&mut pb, "ssm", 4, 3);
    let ssm_case = Case::new("selective_ssm", pb.finish(), vec![rand_t(&mut rng, &[2, 6, 4])], move |cx, v| {
        ssm.forward(cx, v[0])
    });
    let mut pb = ParamBuilder::new(seed);
    let block = VssBlock::new(&mut pb, "block", 8, 4, 0.0);
    let block_case = Case::new("vss_block", pb.finish(), vec![rand_t(&mut rng, &[1, 8, 4, 4])], move |cx, v| {
        block.forward(cx, v[0])
    });
    vec![ssm_case, block_case]
}

/// Frequency prompt generator pieces and the full module in soft mode.
pub fn fcpg_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let mut pb = ParamBuilder::new(seed);
    let spm = SpatialModulator::new(&mut pb, "spm", 2);
    let spm_case = Case::new("spm", pb.finish(), vec![rand_t(&mut rng, &[1, 4, 4, 4])], move |cx, v| {
        spm.forward(cx, v[0])
    });
    let mut pb = ParamBuilder::new(seed);
    let fcpg = Fcpg::new(&mut pb, "fcpg", 4, FcpgOptions::default()).expect("4 channels split into 4 groups");
    let f2 = fcpg.clone();
    let params = pb.finish();
    let x = rand_t(&mut rng, &[1, 4, 8, 8]);
    let masks = Case::new("fcpg_masks", params.clone(), vec![], move |cx, _| {
        let (lo, hi) = f2.masks(cx, 8, 8)?;
        let hi2 = cx.g.scale(hi, 0.5);
        cx.g.add(lo, hi2)
    });
    let full = Case::new("fcpg", params, vec![x], move |cx, v| fcpg.forward(cx, v[0]));
    vec![spm_case, masks, full]
}

fn tiny_pair(rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(&[1, 3, 32, 64], |_| rng.gen_range(0.0..1.0))
}

/// Encoder, decoder and heads.
pub fn network_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let cfg = ModelConfig::tiny(TaskKind::Bcd);
    let mut pb = ParamBuilder::new(seed);
    let enc = Encoder::new(&mut pb, &cfg.encoder).expect("tiny encoder config is valid");
    let params = pb.finish();
    let e2 = enc.clone();
    let embed = Case::new("patch_embed", params.clone(), vec![tiny_pair(&mut rng).reshape(&[2, 3, 32, 32]).unwrap()], move |cx, v| {
        e2.patch_embed(cx, v[0])
    });
    let encoder = Case::new("encoder", params, vec![tiny_pair(&mut rng)], move |cx, v| {
        let p = enc.encode(cx, v[0])?;
        let mut acc = Vec::new();
        for l in p.levels {
            acc.push(cx.g.mean_spatial(l)?);
        }
        let sums: Vec<Var> = acc.iter().map(|&a| cx.g.sum(a)).collect();
        let mut t = sums[0];
        for &s in &sums[1..] {
            t = cx.g.add(t, s)?;
        }
        // Spatial averages keep every level's contribution comparable; add a
        // full map so per-position gradients are exercised too.
        let deep = cx.g.square(p.levels[3]);
        let deep = cx.g.sum(deep);
        cx.g.add(t, deep)
    });

    let dims = cfg.encoder.dims;
    let mut pb = ParamBuilder::new(seed);
    let dec = Decoder::new(&mut pb, &dims, 6);
    let levels: Vec<Tensor> = (0..4)
        .map(|i| rand_t(&mut rng, &[1, dims[i], 8 >> i, 16 >> i]))
        .collect();
    let decoder = Case::new("decoder", pb.finish(), levels, move |cx, v| {
        dec.forward(cx, &FeaturePyramid { levels: [v[0], v[1], v[2], v[3]] })
    });

    let mut cases = vec![embed, encoder, decoder];
    for task in [TaskKind::Bcd, TaskKind::Scd { classes: 3 }, TaskKind::Bda { levels: 4 }] {
        let mut pb = ParamBuilder::new(seed);
        let head = PredictionHead::new(&mut pb, task, ConcatMode::Horizontal, 6, 4).expect("valid head");
        let feat = rand_t(&mut rng, &[1, 6, 4, 8]);
        cases.push(Case::new(&format!("head_{}", task.name()), pb.finish(), vec![feat], move |cx, v| {
            let out = head.forward(cx, v[0])?;
            head_concat(&mut cx.g, &out)
        }));
    }
    let mut pb = ParamBuilder::new(seed);
    let conv = Conv2d::new(&mut pb, "conv", 2, 3, 3, true);
    cases.push(Case::new("conv_layer", pb.finish(), vec![rand_t(&mut rng, &[1, 2, 3, 3])], move |cx, v| {
        conv.forward(cx, v[0])
    }));
    cases
}

/// Loss terms and their task compositions.
pub fn loss_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let r = &mut rng;
    let (n, h, w) = (2, 3, 4);
    let px = n * h * w;
    let mut ce_labels = labels(r, px, 3);
    ce_labels[5] = IGNORE;
    let cel = ce_labels.clone();
    let lov = labels(r, px, 3);
    let hinge = labels(r, px, 2);
    let mask: Vec<bool> = (0..px).map(|i| i % 3 != 0).collect();
    let mut v = vec![
        Case::op("cross_entropy", vec![rand_t(r, &[n, 3, h, w])], move |g, v| {
            cross_entropy(g, v[0], &cel, Some(&[0.5, 1.0, 2.0]))
        }),
        Case::op("lovasz_softmax", vec![rand_t(r, &[n, 3, h, w])], move |g, v| {
            let p = g.softmax(v[0])?;
            lovasz_softmax(g, p, &lov)
        }),
        Case::op("lovasz_hinge", vec![rand_t(r, &[n, 1, h, w])], move |g, v| lovasz_hinge(g, v[0], &hinge)),
        Case::op("similarity", vec![rand_t(r, &[n, 4, h, w]), rand_t(r, &[n, 4, h, w])], move |g, v| {
            let (p1, p2) = (g.softmax(v[0])?, g.softmax(v[1])?);
            similarity_loss(g, p1, p2, &mask)
        }),
    ];
    let change = labels(r, px, 2);
    let bcd = TaskLabels::Bcd { change: change.clone() };
    v.push(Case::op("bcd_loss", vec![rand_t(r, &[n, 2, h, w])], move |g, v| {
        Ok(bcd_loss(g, &HeadOutputs::Bcd { change: v[0] }, &bcd)?.0)
    }));
    let (t1, t2) = (labels(r, px, 4), labels(r, px, 4));
    let scd = TaskLabels::Scd {
        change: t1.iter().zip(&t2).map(|(a, b)| usize::from(a != b)).collect(),
        t1,
        t2,
    };
    let sw = LossWeights {
        change: Some(vec![0.7, 1.3]),
        sem: Some(vec![1.0, 0.8, 1.2, 1.0]),
        ..Default::default()
    };
    v.push(Case::op(
        "scd_loss",
        vec![rand_t(r, &[n, 2, h, w]), rand_t(r, &[n, 4, h, w]), rand_t(r, &[n, 4, h, w])],
        move |g, v| {
            let out = HeadOutputs::Scd { change: v[0], sem_t1: v[1], sem_t2: v[2] };
            Ok(scd_loss(g, &out, &scd, &sw)?.0)
        },
    ));
    let loc = labels(r, px, 2);
    let dmg: Vec<usize> = loc.iter().map(|&l| if l == 1 { 1 + (r.gen::<u8>() % 4) as usize } else { 0 }).collect();
    let bda = TaskLabels::Bda { loc, dmg };
    let bw = LossWeights {
        loc: Some(vec![0.6, 1.4]),
        dmg: Some(vec![1.0, 0.9, 1.1, 1.0, 1.0]),
        ..Default::default()
    };
    v.push(Case::op("bda_loss", vec![rand_t(r, &[n, 2, h, w]), rand_t(r, &[n, 5, h, w])], move |g, v| {
        Ok(bda_loss(g, &HeadOutputs::Bda { loc: v[0], dmg: v[1] }, &bda, &bw)?.0)
    }));
    v
}

/// The full tiny model for each task, in evaluation mode, on a synthetic pair.
pub fn model_cases(seed: u64) -> Vec<Case> {
    [TaskKind::Bcd, TaskKind::Scd { classes: 3 }, TaskKind::Bda { levels: 4 }]
        .into_iter()
        .map(|task| {
            let (model, params) = Model::new(&ModelConfig::tiny(task), seed).expect("tiny config is valid");
            let s = generate_sample(task, 32, 32, seed, 0, &DistractorConfig::default()).expect("32 is a valid size");
            let b = make_batch(&[&s], task).expect("single sample batch");
            Case::new(&format!("model_{}", task.name()), params, vec![b.pre, b.post], move |cx, v| {
                let x = horizontal_concat_var(&mut cx.g, v[0], v[1])?;
                let pyr = model.encoder.encode(cx, x)?;
                let feat = model.decoder.forward(cx, &pyr)?;
                let out = model.head.forward(cx, feat)?;
                head_concat(&mut cx.g, &out)
            })
        })
        .collect()
}

/// Every case of the suite in a fixed order.
pub fn all_cases(seed: u64) -> Vec<Case> {
    let mut v = tensor_cases(seed);
    v.extend(scan_cases(seed));
    v.extend(ssm_cases(seed));
    v.extend(fcpg_cases(seed));
    v.extend(network_cases(seed));
    v.extend(loss_cases(seed));
    v.extend(model_cases(seed));
    v
}

/// Run the suite, optionally restricted to cases whose name contains `filter`.
pub fn run_suite(opts: &GradcheckOptions, filter: Option<&str>) -> Result<Vec<OpReport>> {
    all_cases(opts.seed)
        .iter()
        .filter(|c| filter.is_none_or(|f| c.name.contains(f)))
        .map(|c| check(c, opts))
        .collect()
}
