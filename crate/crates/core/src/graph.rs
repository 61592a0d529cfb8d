//! Computation record and reverse-mode differentiation.
//!
//! Every forward operation appends a node whose inputs already exist, so the
//! record is topologically ordered by construction. [`Graph::backward`]
//! walks it once in reverse.

use crate::error::{arg_err, contract_err, shape_err, Error, Result};
use crate::fft;
use crate::kernels::{self, ConvGeom};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
    Sigmoid,
    Softplus,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Statistics per channel over batch and spatial positions.
    BatchNorm,
    /// Statistics per position over the channel axis.
    LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Act(Activation),
    Exp,
    Neg,
    Sqrt,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    Binary {
        a: Var,
        b: Var,
        kind: Binary,
    },
    Scale {
        x: Var,
        s: f64,
    },
    AddScalar {
        x: Var,
    },
    Unary {
        x: Var,
        kind: Unary,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ChannelAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        inv_std: Vec<f64>,
        xhat: Vec<f64>,
    },
    Upsample {
        x: Var,
        factor: usize,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    SpectralFilter {
        x: Var,
        mask: Var,
    },
    SelectiveScan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        states: Vec<f64>,
    },
    SumAll {
        x: Var,
    },
    MeanSpatial {
        x: Var,
    },
    GroupMean {
        x: Var,
        groups: usize,
    },
    Softmax {
        x: Var,
    },
    /// Scalar-valued fused op whose local gradients were computed in the forward pass.
    ScalarFused {
        name: &'static str,
        inputs: Vec<(Var, Option<Vec<f64>>)>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => match kind {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Div => "div",
            },
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Unary { .. } => "unary",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Norm { .. } => "normalize",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Upsample { .. } => "bilinear_upsample",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::SpectralFilter { .. } => "spectral_filter",
            Op::SelectiveScan { .. } => "selective_scan",
            Op::SumAll { .. } => "sum",
            Op::MeanSpatial { .. } => "mean_spatial",
            Op::GroupMean { .. } => "group_mean",
            Op::Softmax { .. } => "softmax",
            Op::ScalarFused { name, .. } => name,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::AddScalar { x }
            | Op::Unary { x, .. }
            | Op::Upsample { x, .. }
            | Op::Gather { x, .. }
            | Op::SumAll { x }
            | Op::MeanSpatial { x }
            | Op::GroupMean { x, .. }
            | Op::Softmax { x } => vec![*x],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Norm { x, gamma, beta, .. } | Op::ChannelAffine { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Concat { xs, .. } => xs.clone(),
            Op::SpectralFilter { x, mask } => vec![*x, *mask],
            Op::SelectiveScan { u, delta, a, b, c, d, .. } => vec![*u, *delta, *a, *b, *c, *d],
            Op::ScalarFused { inputs, .. } => inputs.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One entry of the computation record, as exposed for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordEntry {
    pub op: &'static str,
    pub inputs: Vec<usize>,
    pub output: usize,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// require a gradient or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    pub fn get_raw(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

/// Forward computation record with reverse-mode differentiation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
    detached: Vec<Tensor>,
    frozen: Option<Vec<Tensor>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)) + x * pdf
}

/// Elementwise activation on a plain value.
pub fn activate(kind: Activation, x: f64) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::Gelu => gelu(x),
        Activation::Silu => x * sigmoid(x),
        Activation::Sigmoid => sigmoid(x),
        Activation::Softplus => softplus(x),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, _) => Some(y),
            (_, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Flat input index for every flat output index under same-rank broadcasting.
fn broadcast_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for d in (0..rank).rev() {
        strides[d] = if input[d] == 1 { 0 } else { s };
        s *= input[d];
    }
    let n: usize = out.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        map.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn reduce_to(g: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if out_shape == in_shape {
        return g.to_vec();
    }
    let map = broadcast_map(out_shape, in_shape);
    let mut r = vec![0.0; in_shape.iter().product()];
    for (gv, &i) in g.iter().zip(&map) {
        r[i] += gv;
    }
    r
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// The ordered record of operations: `(op, inputs, output)` per node.
    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| RecordEntry {
                op: n.op.name(),
                inputs: n.op.inputs().iter().map(|v| v.0).collect(),
                output: i,
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = op.inputs().iter().any(|v| self.nodes[v.0].needs_grad);
        #[cfg(debug_assertions)]
        {
            let finite_in = op
                .inputs()
                .iter()
                .all(|v| self.nodes[v.0].value.is_finite());
            debug_assert!(
                !finite_in || value.is_finite(),
                "{} produced a non-finite value from finite inputs",
                op.name()
            );
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node; `requires_grad` leaves receive gradients in [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let k = self.detached.len();
        let t = match &self.frozen {
            Some(f) if k < f.len() && f[k].shape() == self.shape(v) => f[k].clone(),
            _ => self.value(v).clone(),
        };
        self.detached.push(t.clone());
        self.constant(t)
    }

    /// Values produced by [`Graph::detach`] so far, in call order.
    pub fn detached_values(&self) -> &[Tensor] {
        &self.detached
    }

    /// Make the `k`-th later `detach` call yield `values[k]` instead of its
    /// input. Finite-difference checks use this to hold stop-gradient paths
    /// constant, matching what the analytic gradient differentiates.
    pub fn freeze_detached(&mut self, values: Vec<Tensor>) {
        self.frozen = Some(values);
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let Some(out_shape) = broadcast_shape(&sa, &sb) else {
            return shape_err("elementwise", format!("cannot broadcast {sa:?} with {sb:?}"));
        };
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let ma = broadcast_map(&out_shape, &sa);
            let mb = broadcast_map(&out_shape, &sb);
            ma.iter().zip(&mb).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push(t, Op::Binary { a, b, kind }))
    }

    /// Elementwise sum with same-rank broadcasting over unit extents.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale { x, s })
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v + s);
        self.push(t, Op::AddScalar { x })
    }

    fn unary(&mut self, x: Var, kind: Unary) -> Var {
        let t = self.value(x).map(|v| match kind {
            Unary::Act(a) => activate(a, v),
            Unary::Exp => v.exp(),
            Unary::Neg => -v,
            Unary::Sqrt => v.sqrt(),
            Unary::Square => v * v,
        });
        self.push(t, Op::Unary { x, kind })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        self.unary(x, Unary::Act(kind))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// 2D convolution of `x: [N, C_in, H, W]` with `w: [C_out, C_in/groups, k, k]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err("conv2d", format!("expected 4-d input and weight, got {xs:?} and {ws:?}"));
        }
        if stride == 0 || groups == 0 {
            return arg_err("conv2d", "stride and groups must be positive");
        }
        let (cout, cin_g, k, k2) = (ws[0], ws[1], ws[2], ws[3]);
        if k != k2 {
            return shape_err("conv2d", format!("non-square kernel {ws:?}"));
        }
        if !xs[1].is_multiple_of(groups) || cout % groups != 0 || xs[1] / groups != cin_g {
            return shape_err(
                "conv2d",
                format!("input has {} channels, weight {ws:?} with {groups} groups", xs[1]),
            );
        }
        if xs[2] + 2 * pad < k || xs[3] + 2 * pad < k {
            return shape_err("conv2d", format!("kernel {k} larger than padded input {xs:?}"));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return shape_err("conv2d", format!("bias {:?} for {cout} outputs", self.shape(b)));
            }
        }
        let geom = ConvGeom {
            n: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout,
            k,
            stride,
            pad,
            groups,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let (ho, wo) = geom.out_hw();
        let t = Tensor::new(&[xs[0], cout, ho, wo], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }))
    }

    /// `x: [..., D_in] · wᵀ + b` with `w: [D_out, D_in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let din = *xs.last().unwrap();
        if ws.len() != 2 || ws[1] != din {
            return shape_err("linear", format!("input {xs:?} with weight {ws:?}"));
        }
        let dout = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return shape_err("linear", format!("bias {:?} for {dout} outputs", self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        kernels::gemm(rows, din, dout, self.value(x).data(), false, self.value(w).data(), true, 0.0, &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in out.chunks_exact_mut(dout) {
                for (o, bb) in r.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut os = xs.clone();
        *os.last_mut().unwrap() = dout;
        let t = Tensor::new(&os, out)?;
        Ok(self.push(t, Op::Linear { x, w, b }))
    }

    /// Normalization of `x: [N, C, ...]` followed by the per-channel affine `γ, β`.
    ///
    /// Returns the output and the per-group (mean, biased variance); for batch
    /// norm the groups are channels.
    pub fn normalize(
        &mut self,
        x: Var,
        kind: NormKind,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err("normalize", format!("need [N, C, ...], got {xs:?}"));
        }
        let (n, c) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("normalize", format!("affine params must be [{c}]"));
        }
        if eps < 0.0 {
            return arg_err("normalize", format!("eps must be nonnegative, got {eps}"));
        }
        let group_size = match kind {
            NormKind::BatchNorm => n * s,
            NormKind::LayerNorm => c,
        };
        if eps == 0.0 && group_size == 1 {
            return arg_err("normalize", "group of size 1 with eps = 0 divides by zero");
        }
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        let groups = match kind {
            NormKind::BatchNorm => c,
            NormKind::LayerNorm => n * s,
        };
        let mut means = vec![0.0; groups];
        let mut vars = vec![0.0; groups];
        let mut inv_std = vec![0.0; groups];
        // index of element j within group g
        let at = |g: usize, j: usize| match kind {
            NormKind::BatchNorm => (j / s * c + g) * s + j % s,
            NormKind::LayerNorm => (g / s * c + j) * s + g % s,
        };
        for g in 0..groups {
            let m = group_size as f64;
            let mean = (0..group_size).map(|j| xd[at(g, j)]).sum::<f64>() / m;
            let var = (0..group_size)
                .map(|j| (xd[at(g, j)] - mean).powi(2))
                .sum::<f64>()
                / m;
            if eps == 0.0 && var == 0.0 {
                return arg_err("normalize", "zero variance with eps = 0 divides by zero");
            }
            let is = 1.0 / (var + eps).sqrt();
            means[g] = mean;
            vars[g] = var;
            inv_std[g] = is;
            for j in 0..group_size {
                let i = at(g, j);
                xhat[i] = (xd[i] - mean) * is;
                let ch = (i / s) % c;
                out[i] = gd[ch] * xhat[i] + bd[ch];
            }
        }
        let t = Tensor::new(&xs, out)?;
        let v = self.push(
            t,
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                xhat,
                inv_std,
            },
        );
        Ok((v, means, vars))
    }

    /// Per-channel affine normalization with fixed statistics (batch norm at inference).
    pub fn channel_affine(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[1];
        if mean.len() != c || var.len() != c || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("channel_affine", format!("statistics for {c} channels expected"));
        }
        let s: usize = xs[2..].iter().product();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for i in 0..xd.len() {
            let ch = (i / s) % c;
            xhat[i] = (xd[i] - mean[ch]) * inv_std[ch];
            out[i] = gd[ch] * xhat[i] + bd[ch];
        }
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(
            t,
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            },
        ))
    }

    /// Bilinear upsampling of the trailing two axes by an integer factor,
    /// half-pixel centred (no corner alignment).
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return arg_err("bilinear_upsample", "factor must be at least 1");
        }
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err("bilinear_upsample", format!("need at least 2 axes, got {xs:?}"));
        }
        if factor == 1 {
            let t = self.value(x).clone();
            return Ok(self.push(t, Op::Upsample { x, factor }));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        let planes = self.value(x).len() / (h * w);
        let out = kernels::upsample_forward(self.value(x).data(), planes, h, w, factor);
        let mut os = xs.clone();
        let r = os.len();
        os[r - 2] *= factor;
        os[r - 1] *= factor;
        let t = Tensor::new(&os, out)?;
        Ok(self.push(t, Op::Upsample { x, factor }))
    }

    /// `out[i] = x[idx[i]]` with the given output shape; repeated indices are allowed.
    pub fn gather(&mut self, x: Var, shape: &[usize], idx: Vec<usize>) -> Result<Var> {
        let n = self.value(x).len();
        if idx.iter().any(|&i| i >= n) {
            return contract_err("gather", "index out of range");
        }
        let src = self.value(x).data();
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Gather { x, idx }))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return arg_err("concat", "nothing to concatenate");
        }
        let s0 = self.shape(xs[0]).to_vec();
        if axis >= s0.len() {
            return arg_err("concat", format!("axis {axis} out of range for {s0:?}"));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s.iter().enumerate().any(|(d, &e)| d != axis && e != s0[d])
            {
                return shape_err("concat", format!("{s:?} incompatible with {s0:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut os = s0.clone();
        os[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let e = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let t = Tensor::new(&os, out)?;
        Ok(self.push(
            t,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || start + len > xs[axis] || len == 0 {
            return arg_err("slice", format!("[{start}, {}) on axis {axis} of {xs:?}", start + len));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let mut idx = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for a in start..start + len {
                let base = (o * xs[axis] + a) * inner;
                idx.extend(base..base + inner);
            }
        }
        let mut os = xs;
        os[axis] = len;
        self.gather(x, &os, idx)
    }

    /// `Re(ifft2(fft2(x) ⊙ mask))` over the trailing two axes; `mask` is `[H, W]`.
    ///
    /// The mask must be symmetric under frequency negation for the result to be
    /// the exact band-limited signal; the imaginary residue is discarded.
    pub fn spectral_filter(&mut self, x: Var, mask: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err("spectral_filter", format!("need 2 trailing axes, got {xs:?}"));
        }
        let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
        if self.shape(mask) != [h, w] {
            return shape_err(
                "spectral_filter",
                format!("mask {:?} for planes {h}×{w}", self.shape(mask)),
            );
        }
        let planes = self.value(x).len() / (h * w);
        let out = fft::spectral_filter(self.value(x).data(), planes, h, w, self.value(mask).data());
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(t, Op::SpectralFilter { x, mask }))
    }

    /// Selective scan with zero initial state.
    ///
    /// Shapes: `u, delta: [B, L, D]`, `a: [D, N]`, `b, c: [B, L, N]`, `d: [D]`.
    /// Recurrence per channel: `h_t = exp(Δ_t·A) ⊙ h_{t-1} + Δ_t·B_t·u_t`,
    /// `y_t = C_t·h_t + D·u_t`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let us = self.shape(u).to_vec();
        if us.len() != 3 {
            return shape_err("selective_scan", format!("u must be [B, L, D], got {us:?}"));
        }
        let (bs, l, dm) = (us[0], us[1], us[2]);
        let as_ = self.shape(a).to_vec();
        if as_.len() != 2 || as_[0] != dm {
            return shape_err("selective_scan", format!("A {as_:?} for {dm} channels"));
        }
        let n = as_[1];
        if self.shape(delta) != us.as_slice()
            || self.shape(b) != [bs, l, n]
            || self.shape(c) != [bs, l, n]
            || self.shape(d) != [dm]
        {
            return shape_err("selective_scan", "Δ/B/C/D shapes inconsistent with u and A");
        }
        let (y, states) = crate::ssm::scan_forward(
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            bs,
            l,
            dm,
            n,
        );
        let t = Tensor::new(&us, y)?;
        Ok(self.push(
            t,
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::SumAll { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// `[N, C, H, W] → [N, C, 1, 1]` spatial average.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err("mean_spatial", format!("need [N, C, H, W], got {xs:?}"));
        }
        let hw = xs[2] * xs[3];
        let data = self
            .value(x)
            .data()
            .chunks_exact(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let t = Tensor::new(&[xs[0], xs[1], 1, 1], data)?;
        Ok(self.push(t, Op::MeanSpatial { x }))
    }

    /// `[N, C, H, W] → [N, g, H, W]`: mean over each of `g` contiguous channel groups.
    pub fn group_mean(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err("group_mean", format!("need [N, C, H, W], got {xs:?}"));
        }
        if groups == 0 || !xs[1].is_multiple_of(groups) {
            return Err(Error::Config(format!(
                "group count {groups} does not divide {} channels",
                xs[1]
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let per = c / groups;
        let xd = self.value(x).data();
        let mut out = vec![0.0; n * groups * hw];
        for b in 0..n {
            for g in 0..groups {
                let dst = &mut out[(b * groups + g) * hw..(b * groups + g + 1) * hw];
                for ch in g * per..(g + 1) * per {
                    for (d, s) in dst.iter_mut().zip(&xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]) {
                        *d += s;
                    }
                }
                dst.iter_mut().for_each(|v| *v /= per as f64);
            }
        }
        let t = Tensor::new(&[n, groups, xs[2], xs[3]], out)?;
        Ok(self.push(t, Op::GroupMean { x, groups }))
    }

    /// Repeat each of `g` group maps `[N, g, H, W]` over `per` channels → `[N, g·per, H, W]`.
    pub fn repeat_groups(&mut self, x: Var, per: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return shape_err("repeat_groups", format!("need [N, g, H, W], got {xs:?}"));
        }
        let (n, g, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        let mut idx = Vec::with_capacity(n * g * per * hw);
        for b in 0..n {
            for gi in 0..g {
                for _ in 0..per {
                    let base = (b * g + gi) * hw;
                    idx.extend(base..base + hw);
                }
            }
        }
        self.gather(x, &[n, g * per, xs[2], xs[3]], idx)
    }

    /// Softmax over axis 1 of `[N, K, ...]`.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return shape_err("softmax", format!("need [N, K, ...], got {xs:?}"));
        }
        let (n, k) = (xs[0], xs[1]);
        let s: usize = xs[2..].iter().product();
        let xd = self.value(x).data();
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for p in 0..s {
                let at = |c: usize| (b * k + c) * s + p;
                let m = (0..k).map(|c| xd[at(c)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..k).map(|c| (xd[at(c)] - m).exp()).sum();
                for c in 0..k {
                    out[at(c)] = (xd[at(c)] - m).exp() / z;
                }
            }
        }
        let t = Tensor::new(&xs, out)?;
        Ok(self.push(t, Op::Softmax { x }))
    }

    /// Scalar node with precomputed local gradients `∂value/∂input`.
    pub(crate) fn scalar_fused(
        &mut self,
        name: &'static str,
        value: f64,
        inputs: Vec<(Var, Option<Vec<f64>>)>,
    ) -> Var {
        self.push(Tensor::scalar(value), Op::ScalarFused { name, inputs })
    }

    /// Reverse sweep from a scalar `loss`. A record can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return contract_err("backward", "record already differentiated; run a fresh forward pass");
        }
        if self.value(loss).len() != 1 {
            return contract_err(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            );
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !(matches!(n.op, Op::Leaf) && n.needs_grad) {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { a, b, kind } => {
                let out_shape = node.value.shape();
                let (sa, sb) = (shp(*a), shp(*b));
                let (av, bv) = (val(*a), val(*b));
                let (ma, mb) = if sa == sb {
                    (None, None)
                } else {
                    (
                        Some(broadcast_map(out_shape, sa)),
                        Some(broadcast_map(out_shape, sb)),
                    )
                };
                let ai = |k: usize| ma.as_ref().map_or(k, |m| m[k]);
                let bi = |k: usize| mb.as_ref().map_or(k, |m| m[k]);
                if ng(*a) {
                    let local: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => g.iter().enumerate().map(|(k, gv)| gv * bv[bi(k)]).collect(),
                        Binary::Div => g.iter().enumerate().map(|(k, gv)| gv / bv[bi(k)]).collect(),
                    };
                    accumulate(grads, *a, reduce_to(&local, out_shape, sa));
                }
                if ng(*b) {
                    let local: Vec<f64> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|v| -v).collect(),
                        Binary::Mul => g.iter().enumerate().map(|(k, gv)| gv * av[ai(k)]).collect(),
                        Binary::Div => g
                            .iter()
                            .enumerate()
                            .map(|(k, gv)| -gv * av[ai(k)] / (bv[bi(k)] * bv[bi(k)]))
                            .collect(),
                    };
                    accumulate(grads, *b, reduce_to(&local, out_shape, sb));
                }
            }
            Op::Scale { x, s } => accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddScalar { x } => accumulate(grads, *x, g.to_vec()),
            Op::Unary { x, kind } => {
                let xv = val(*x);
                let yv = node.value.data();
                let d: Vec<f64> = (0..g.len())
                    .map(|k| {
                        let (x, y) = (xv[k], yv[k]);
                        g[k] * match kind {
                            Unary::Act(Activation::Relu) => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Act(Activation::Gelu) => gelu_grad(x),
                            Unary::Act(Activation::Silu) => {
                                let s = sigmoid(x);
                                s + x * s * (1.0 - s)
                            }
                            Unary::Act(Activation::Sigmoid) => y * (1.0 - y),
                            Unary::Act(Activation::Softplus) => sigmoid(x),
                            Unary::Exp => y,
                            Unary::Neg => -1.0,
                            Unary::Sqrt => 0.5 / y,
                            Unary::Square => 2.0 * x,
                        }
                    })
                    .collect();
                accumulate(grads, *x, d);
            }
            Op::Conv2d { x, w, b, geom } => {
                let want_db = b.is_some_and(ng);
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(*x), val(*w), g, geom, ng(*x), ng(*w), want_db);
                if let Some(dx) = dx {
                    accumulate(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    accumulate(grads, *w, dw);
                }
                if let (Some(db), Some(b)) = (db, b) {
                    accumulate(grads, *b, db);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = shp(*w);
                let (dout, din) = (ws[0], ws[1]);
                let rows = g.len() / dout;
                if ng(*x) {
                    let mut dx = vec![0.0; rows * din];
                    kernels::gemm(rows, dout, din, g, false, val(*w), false, 0.0, &mut dx);
                    accumulate(grads, *x, dx);
                }
                if ng(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(dout, rows, din, g, true, val(*x), false, 0.0, &mut dw);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|b| ng(*b)) {
                    let mut db = vec![0.0; dout];
                    for r in g.chunks_exact(dout) {
                        for (d, v) in db.iter_mut().zip(r) {
                            *d += v;
                        }
                    }
                    accumulate(grads, b, db);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                xhat,
                inv_std,
            } => {
                let xs = shp(*x);
                let (n, c) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let gd = val(*gamma);
                if ng(*gamma) || ng(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    for k in 0..g.len() {
                        let ch = (k / s) % c;
                        dg[ch] += g[k] * xhat[k];
                        dbeta[ch] += g[k];
                    }
                    if ng(*gamma) {
                        accumulate(grads, *gamma, dg);
                    }
                    if ng(*beta) {
                        accumulate(grads, *beta, dbeta);
                    }
                }
                if ng(*x) {
                    let (groups, size) = match kind {
                        NormKind::BatchNorm => (c, n * s),
                        NormKind::LayerNorm => (n * s, c),
                    };
                    let at = |gr: usize, j: usize| match kind {
                        NormKind::BatchNorm => (j / s * c + gr) * s + j % s,
                        NormKind::LayerNorm => (gr / s * c + j) * s + gr % s,
                    };
                    let mut dx = vec![0.0; g.len()];
                    let m = size as f64;
                    for gr in 0..groups {
                        let mut sum_d = 0.0;
                        let mut sum_dx = 0.0;
                        for j in 0..size {
                            let k = at(gr, j);
                            let dxh = g[k] * gd[(k / s) % c];
                            sum_d += dxh;
                            sum_dx += dxh * xhat[k];
                        }
                        for j in 0..size {
                            let k = at(gr, j);
                            let dxh = g[k] * gd[(k / s) % c];
                            dx[k] = inv_std[gr] / m * (m * dxh - sum_d - xhat[k] * sum_dx);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::ChannelAffine {
                x,
                gamma,
                beta,
                inv_std,
                xhat,
            } => {
                let xs = shp(*x);
                let c = xs[1];
                let s: usize = xs[2..].iter().product();
                let gd = val(*gamma);
                if ng(*x) {
                    let dx = (0..g.len())
                        .map(|k| {
                            let ch = (k / s) % c;
                            g[k] * gd[ch] * inv_std[ch]
                        })
                        .collect();
                    accumulate(grads, *x, dx);
                }
                let mut dg = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for k in 0..g.len() {
                    let ch = (k / s) % c;
                    dg[ch] += g[k] * xhat[k];
                    dbeta[ch] += g[k];
                }
                if ng(*gamma) {
                    accumulate(grads, *gamma, dg);
                }
                if ng(*beta) {
                    accumulate(grads, *beta, dbeta);
                }
            }
            Op::Upsample { x, factor } => {
                if *factor == 1 {
                    accumulate(grads, *x, g.to_vec());
                } else {
                    let xs = shp(*x);
                    let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                    let planes = val(*x).len() / (h * w);
                    accumulate(grads, *x, kernels::upsample_backward(g, planes, h, w, *factor));
                }
            }
            Op::Gather { x, idx } => {
                let mut dx = vec![0.0; val(*x).len()];
                for (gv, &i) in g.iter().zip(idx) {
                    dx[i] += gv;
                }
                accumulate(grads, *x, dx);
            }
            Op::Concat { xs, axis } => {
                let os = node.value.shape();
                let outer: usize = os[..*axis].iter().product();
                let inner: usize = os[axis + 1..].iter().product();
                let total = os[*axis];
                let mut off = 0;
                for &v in xs {
                    let e = shp(v)[*axis];
                    if ng(v) {
                        let mut d = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let base = (o * total + off) * inner;
                            d.extend_from_slice(&g[base..base + e * inner]);
                        }
                        accumulate(grads, v, d);
                    }
                    off += e;
                }
            }
            Op::SpectralFilter { x, mask } => {
                let xs = shp(*x);
                let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let planes = val(*x).len() / (h * w);
                if ng(*x) {
                    // the filter is self-adjoint for a real symmetric mask
                    accumulate(grads, *x, fft::spectral_filter(g, planes, h, w, val(*mask)));
                }
                if ng(*mask) {
                    accumulate(grads, *mask, fft::spectral_mask_grad(val(*x), g, planes, h, w));
                }
            }
            Op::SelectiveScan {
                u,
                delta,
                a,
                b,
                c,
                d,
                states,
            } => {
                let us = shp(*u);
                let n = shp(*a)[1];
                let sg = crate::ssm::scan_backward(
                    g,
                    val(*u),
                    val(*delta),
                    val(*a),
                    val(*b),
                    val(*c),
                    val(*d),
                    states,
                    us[0],
                    us[1],
                    us[2],
                    n,
                );
                for (v, dv) in [
                    (*u, sg.du),
                    (*delta, sg.ddelta),
                    (*a, sg.da),
                    (*b, sg.db),
                    (*c, sg.dc),
                    (*d, sg.dd),
                ] {
                    if ng(v) {
                        accumulate(grads, v, dv);
                    }
                }
            }
            Op::SumAll { x } => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::MeanSpatial { x } => {
                let xs = shp(*x);
                let hw = xs[2] * xs[3];
                let mut dx = Vec::with_capacity(val(*x).len());
                for gv in g {
                    dx.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                accumulate(grads, *x, dx);
            }
            Op::GroupMean { x, groups } => {
                let xs = shp(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let per = c / groups;
                let mut dx = vec![0.0; val(*x).len()];
                for b in 0..n {
                    for ch in 0..c {
                        let gi = ch / per;
                        let src = &g[(b * groups + gi) * hw..(b * groups + gi + 1) * hw];
                        for (d, s) in dx[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter_mut().zip(src) {
                            *d = s / per as f64;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Softmax { x } => {
                let xs = shp(*x);
                let (n, k) = (xs[0], xs[1]);
                let s: usize = xs[2..].iter().product();
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for b in 0..n {
                    for p in 0..s {
                        let at = |c: usize| (b * k + c) * s + p;
                        let dot: f64 = (0..k).map(|c| g[at(c)] * y[at(c)]).sum();
                        for c in 0..k {
                            dx[at(c)] = y[at(c)] * (g[at(c)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::ScalarFused { inputs, .. } => {
                for (v, local) in inputs {
                    if let (true, Some(l)) = (ng(*v), local) {
                        accumulate(grads, *v, l.iter().map(|x| x * g[0]).collect());
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_unit_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 3], |i| i as f64), true);
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), Tensor::ones(&[2, 3]));
    }

    #[test]
    fn half_sum_of_squares_gives_identity_gradient() {
        let mut g = Graph::new();
        let xt = Tensor::from_fn(&[4], |i| i as f64 - 1.5);
        let x = g.leaf(xt.clone(), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let l = g.scale(s, 0.5);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), xt);
    }

    #[test]
    fn second_backward_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]), true);
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Contract { .. })));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[3]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract { .. })));
    }

    #[test]
    fn record_is_topological() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[1, 2, 3, 3]), true);
        let w = g.leaf(Tensor::ones(&[2, 2, 3, 3]), true);
        let y = g.conv2d(x, w, None, 1, 1, 1).unwrap();
        let z = g.relu(y);
        let _ = g.sum(z);
        for e in g.record() {
            assert!(e.inputs.iter().all(|&i| i < e.output));
        }
    }

    #[test]
    fn broadcast_mul_reduces_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64), true);
        let s = g.leaf(Tensor::from_fn(&[2, 3, 1, 1], |i| 1.0 + i as f64), true);
        let y = g.mul(a, s).unwrap();
        assert_eq!(g.value(y).at(&[1, 2, 1, 0]), g.value(a).at(&[1, 2, 1, 0]) * 6.0);
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        let gs = grads.get(s).unwrap();
        // d/ds of Σ a·s = Σ over the 2×2 plane of a
        assert_eq!(gs.at(&[0, 0, 0, 0]), 0.0 + 1.0 + 2.0 + 3.0);
    }

    #[test]
    fn conv_channel_mismatch_is_a_shape_error() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[1, 2, 4, 4]), false);
        let w = g.leaf(Tensor::ones(&[1, 3, 3, 3]), false);
        assert!(matches!(g.conv2d(x, w, None, 1, 1, 1), Err(Error::Shape { .. })));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]), false);
        let y = g.leaf(Tensor::ones(&[2]), true);
        let p = g.mul(x, y).unwrap();
        let l = g.sum(p);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(y).is_some());
    }
}
