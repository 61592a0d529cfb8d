//! Frequency change prompt generator.
//!
//! The feature map is split into a low and a high spatial-frequency band with
//! radial masks on its 2D spectrum. Each band is reweighted by a per-channel
//! global weight and a per-pixel spatial weight, the two bands are fused by a
//! 1×1 convolution, modulated by a grouped spatial gate, and added back to the
//! input scaled by a learnable coefficient `α`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::Conv2d;
use crate::params::{Ctx, ParamBuilder, ParamGroup, ParamId};
use crate::tensor::Tensor;

/// Thresholds used by the fixed-threshold variant.
pub const FIXED_THRESHOLDS: (f64, f64) = (0.1, 0.3);
/// Threshold used by the single-threshold variant.
pub const SINGLE_THRESHOLD: f64 = 0.1;
/// Softness of the learned masks on the normalized radial frequency axis.
pub const DEFAULT_TAU: f64 = 0.05;
/// Smoothing inside the pooled band magnitude `mean(sqrt(x² + ε))`.
pub const MAGNITUDE_EPS: f64 = 1e-6;

/// How the band masks are built.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    /// Sigmoid masks around learnable thresholds.
    #[default]
    Learned,
    /// Indicator masks at `FIXED_THRESHOLDS`.
    Fixed,
    /// Complementary indicator masks split at `SINGLE_THRESHOLD`.
    Single,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Soft,
    Hard,
}

/// Normalized radial frequency of every bin of an `h×w` DFT, in `[0, 1]`.
///
/// Axis frequencies follow the usual FFT bin order (`k/n` for `k < n/2`,
/// `k/n - 1` above, so the Nyquist bin of an even axis is `-0.5`).
pub fn radial_frequency_map(h: usize, w: usize) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::Argument {
            op: "radial_frequency_map",
            detail: format!("empty grid {h}×{w}"),
        });
    }
    let freq = |k: usize, n: usize| {
        let f = k as f64 / n as f64;
        if 2 * k >= n {
            f - 1.0
        } else {
            f
        }
    };
    let norm = 0.5 * std::f64::consts::SQRT_2;
    Ok(Tensor::from_fn(&[h, w], |i| {
        let (fh, fw) = (freq(i / w, h), freq(i % w, w));
        (fh * fh + fw * fw).sqrt() / norm
    }))
}

/// Map unconstrained `(a, b)` to `0 < θ_low ≤ θ_high < 1`:
/// `θ_low = σ(a)`, `θ_high = θ_low + (1 − θ_low)·σ(b)`.
pub fn constrain_thresholds(a: f64, b: f64) -> (f64, f64) {
    let lo = sigmoid(a);
    (lo, lo + (1.0 - lo) * sigmoid(b))
}

/// Inverse of [`constrain_thresholds`] for `0 < lo < hi < 1`.
pub fn unconstrain_thresholds(lo: f64, hi: f64) -> (f64, f64) {
    (logit(lo), logit((hi - lo) / (1.0 - lo)))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Low and high band masks over a radial frequency map.
///
/// Soft: `M_low = σ((θ_low − F)/τ)`, `M_high = σ((F − θ_high)/τ)`.
/// Hard: `M_low = [F ≤ θ_low]`, `M_high = [F > θ_high]`.
pub fn band_masks(f: &Tensor, lo: f64, hi: f64, tau: f64, mode: MaskMode) -> Result<(Tensor, Tensor)> {
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::Argument {
            op: "band_masks",
            detail: format!("thresholds ({lo}, {hi}) violate 0 < low ≤ high < 1"),
        });
    }
    match mode {
        MaskMode::Soft => {
            if tau <= 0.0 {
                return Err(Error::Argument {
                    op: "band_masks",
                    detail: format!("temperature {tau} must be positive"),
                });
            }
            Ok((f.map(|v| sigmoid((lo - v) / tau)), f.map(|v| sigmoid((v - hi) / tau))))
        }
        MaskMode::Hard => Ok((
            f.map(|v| if v <= lo { 1.0 } else { 0.0 }),
            f.map(|v| if v > hi { 1.0 } else { 0.0 }),
        )),
    }
}

/// Per-band prompt branch: global channel weights and a spatial weight map.
#[derive(Clone, Debug)]
pub struct BandPrompt {
    pub global1: Conv2d,
    pub global2: Conv2d,
    pub spatial: Conv2d,
}

impl BandPrompt {
    fn new(pb: &mut ParamBuilder, name: &str, c: usize) -> Self {
        let hidden = (c / 4).max(1);
        pb.scope(name, |pb| Self {
            global1: Conv2d::new(pb, "global1", c, hidden, 1, true),
            global2: Conv2d::new(pb, "global2", hidden, c, 1, true),
            spatial: Conv2d::new(pb, "spatial", c, 1, 3, true),
        })
    }

    /// `W_global: [N, C, 1, 1]` from the pooled band magnitude.
    pub fn global_weight(&self, cx: &mut Ctx, xb: Var) -> Result<Var> {
        let sq = cx.g.square(xb);
        let sq = cx.g.add_scalar(sq, MAGNITUDE_EPS);
        let mag = cx.g.sqrt(sq);
        let pooled = cx.g.mean_spatial(mag)?;
        let h = self.global1.forward(cx, pooled)?;
        let h = cx.g.relu(h);
        let h = self.global2.forward(cx, h)?;
        Ok(cx.g.sigmoid(h))
    }

    /// `W_spatial: [N, 1, H, W]`.
    pub fn spatial_weight(&self, cx: &mut Ctx, xb: Var) -> Result<Var> {
        let s = self.spatial.forward(cx, xb)?;
        Ok(cx.g.sigmoid(s))
    }

    /// `P_b = W_global ⊙ X_b ⊙ W_spatial` for the band-limited feature `X_b`.
    pub fn forward(&self, cx: &mut Ctx, xb: Var) -> Result<Var> {
        let wg = self.global_weight(cx, xb)?;
        let ws = self.spatial_weight(cx, xb)?;
        triple_product(cx, wg, xb, ws)
    }
}

/// Broadcast product of channel weights, band feature and spatial weights.
pub fn triple_product(cx: &mut Ctx, wg: Var, xb: Var, ws: Var) -> Result<Var> {
    let t = cx.g.mul(wg, xb)?;
    cx.g.mul(t, ws)
}

/// Grouped spatial gate: `sigmoid(conv3×3(group means))`, repeated per group.
#[derive(Clone, Debug)]
pub struct SpatialModulator {
    pub conv: Conv2d,
    pub groups: usize,
}

impl SpatialModulator {
    pub fn new(pb: &mut ParamBuilder, name: &str, groups: usize) -> Self {
        Self {
            conv: Conv2d::new(pb, name, groups, groups, 3, true),
            groups,
        }
    }

    /// Gate of shape `[N, C, H, W]` computed from the group means of `p`.
    pub fn gate(&self, cx: &mut Ctx, p: Var) -> Result<Var> {
        let c = cx.g.shape(p)[1];
        let gm = cx.g.group_mean(p, self.groups)?;
        let s = self.conv.forward(cx, gm)?;
        let s = cx.g.sigmoid(s);
        cx.g.repeat_groups(s, c / self.groups)
    }

    /// `P_fused ⊙ SPM(group_mean(P_fused))`.
    pub fn forward(&self, cx: &mut Ctx, p: Var) -> Result<Var> {
        let gate = self.gate(cx, p)?;
        cx.g.mul(p, gate)
    }
}

/// Variant switches for the generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcpgOptions {
    pub thresholds: ThresholdMode,
    pub spm: bool,
    pub tau: f64,
    pub groups: usize,
}

impl Default for FcpgOptions {
    fn default() -> Self {
        Self {
            thresholds: ThresholdMode::Learned,
            spm: true,
            tau: DEFAULT_TAU,
            groups: 4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Fcpg {
    pub opts: FcpgOptions,
    /// Unconstrained threshold parameters, each `[1, 1]`.
    pub theta_a: ParamId,
    pub theta_b: ParamId,
    /// `[1, 1, 1, 1]`
    pub alpha: ParamId,
    pub low: BandPrompt,
    pub high: BandPrompt,
    pub fuse: Conv2d,
    pub spm: SpatialModulator,
}

impl Fcpg {
    /// All parameters go to [`ParamGroup::Fcpg`].
    pub fn new(pb: &mut ParamBuilder, name: &str, c: usize, opts: FcpgOptions) -> Result<Self> {
        if opts.groups == 0 || !c.is_multiple_of(opts.groups) {
            return Err(Error::Config(format!(
                "prompt group count {} does not divide {c} channels",
                opts.groups
            )));
        }
        if opts.tau <= 0.0 {
            return Err(Error::Config(format!("mask temperature {} must be positive", opts.tau)));
        }
        let (a, b) = unconstrain_thresholds(FIXED_THRESHOLDS.0, FIXED_THRESHOLDS.1);
        Ok(pb.in_group(ParamGroup::Fcpg, |pb| {
            pb.scope(name, |pb| Self {
                opts,
                theta_a: pb.add("theta_a", Tensor::full(&[1, 1], a)),
                theta_b: pb.add("theta_b", Tensor::full(&[1, 1], b)),
                alpha: pb.add("alpha", Tensor::full(&[1, 1, 1, 1], 0.1)),
                low: BandPrompt::new(pb, "low", c),
                high: BandPrompt::new(pb, "high", c),
                fuse: Conv2d::new(pb, "fuse", 2 * c, c, 1, true),
                spm: SpatialModulator::new(pb, "spm", opts.groups),
            })
        }))
    }

    /// Constrained thresholds `(θ_low, θ_high)` under the current parameters.
    pub fn thresholds(&self, store: &crate::params::ParamStore) -> (f64, f64) {
        match self.opts.thresholds {
            ThresholdMode::Learned => constrain_thresholds(
                store.value(self.theta_a).data()[0],
                store.value(self.theta_b).data()[0],
            ),
            ThresholdMode::Fixed => FIXED_THRESHOLDS,
            ThresholdMode::Single => (SINGLE_THRESHOLD, SINGLE_THRESHOLD),
        }
    }

    /// Band masks as graph values; differentiable in the thresholds when learned.
    pub fn masks(&self, cx: &mut Ctx, h: usize, w: usize) -> Result<(Var, Var)> {
        let f = radial_frequency_map(h, w)?;
        match self.opts.thresholds {
            ThresholdMode::Learned => {
                let inv_tau = 1.0 / self.opts.tau;
                let (a, b) = (cx.p(self.theta_a), cx.p(self.theta_b));
                let g = &mut cx.g;
                // θ_low = σ(a), θ_high = θ_low + (1 − θ_low)·σ(b)
                let lo = g.sigmoid(a);
                let sb = g.sigmoid(b);
                let one_minus = g.scale(lo, -1.0);
                let one_minus = g.add_scalar(one_minus, 1.0);
                let gap = g.mul(one_minus, sb)?;
                let hi = g.add(lo, gap)?;
                let fv = g.constant(f);
                let dl = g.sub(lo, fv)?;
                let dl = g.scale(dl, inv_tau);
                let ml = g.sigmoid(dl);
                let dh = g.sub(fv, hi)?;
                let dh = g.scale(dh, inv_tau);
                let mh = g.sigmoid(dh);
                Ok((ml, mh))
            }
            ThresholdMode::Fixed => {
                let (ml, mh) = band_masks(&f, FIXED_THRESHOLDS.0, FIXED_THRESHOLDS.1, 1.0, MaskMode::Hard)?;
                Ok((cx.g.constant(ml), cx.g.constant(mh)))
            }
            ThresholdMode::Single => {
                let (ml, _) = band_masks(&f, SINGLE_THRESHOLD, SINGLE_THRESHOLD, 1.0, MaskMode::Hard)?;
                let mh = ml.map(|v| 1.0 - v);
                Ok((cx.g.constant(ml), cx.g.constant(mh)))
            }
        }
    }

    /// Modulated prompt `P_modulated` for `x: [N, C, H, W]`.
    pub fn prompt(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let s = cx.g.shape(x).to_vec();
        let (ml, mh) = self.masks(cx, s[2], s[3])?;
        let xl = cx.g.spectral_filter(x, ml)?;
        let xh = cx.g.spectral_filter(x, mh)?;
        let pl = self.low.forward(cx, xl)?;
        let ph = self.high.forward(cx, xh)?;
        let cat = cx.g.concat(&[pl, ph], 1)?;
        let fused = self.fuse.forward(cx, cat)?;
        if self.opts.spm {
            self.spm.forward(cx, fused)
        } else {
            Ok(fused)
        }
    }

    /// `X + α·P_modulated`.
    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let p = self.prompt(cx, x)?;
        let alpha = cx.p(self.alpha);
        let scaled = cx.g.mul(alpha, p)?;
        cx.g.add(x, scaled)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;

    #[test]
    fn radial_map_endpoints() {
        let f = radial_frequency_map(8, 8).unwrap();
        assert_eq!(f.at(&[0, 0]), 0.0);
        assert!((f.at(&[4, 4]) - 1.0).abs() < 1e-15);
        assert!(radial_frequency_map(0, 3).is_err());
    }

    #[test]
    fn threshold_mapping_round_trips_and_orders() {
        let (a, b) = unconstrain_thresholds(0.1, 0.3);
        let (lo, hi) = constrain_thresholds(a, b);
        assert!((lo - 0.1).abs() < 1e-15 && (hi - 0.3).abs() < 1e-15);
        for (a, b) in [(-30.0, -30.0), (5.0, 5.0), (0.0, -4.0), (-2.0, 9.0)] {
            let (lo, hi) = constrain_thresholds(a, b);
            assert!(0.0 < lo && lo <= hi && hi < 1.0 + 1e-15, "{lo} {hi}");
        }
    }

    #[test]
    fn hard_masks_at_dc() {
        let f = radial_frequency_map(8, 8).unwrap();
        let (ml, mh) = band_masks(&f, 0.1, 0.3, 1.0, MaskMode::Hard).unwrap();
        assert_eq!((ml.at(&[0, 0]), mh.at(&[0, 0])), (1.0, 0.0));
        assert_eq!((ml.at(&[4, 4]), mh.at(&[4, 4])), (0.0, 1.0));
    }

    #[test]
    fn soft_mask_midpoint() {
        let f = Tensor::new(&[1, 2], vec![0.25, 0.6]).unwrap();
        let (ml, mh) = band_masks(&f, 0.25, 0.6, 0.05, MaskMode::Soft).unwrap();
        assert_eq!(ml.at(&[0, 0]), 0.5);
        assert_eq!(mh.at(&[0, 1]), 0.5);
        assert!(band_masks(&f, 0.4, 0.2, 0.05, MaskMode::Soft).is_err());
    }

    #[test]
    fn indivisible_groups_are_a_config_error() {
        let mut pb = ParamBuilder::new(0);
        let opts = FcpgOptions {
            groups: 3,
            ..Default::default()
        };
        assert!(matches!(Fcpg::new(&mut pb, "f", 8, opts), Err(Error::Config(_))));
    }

    #[test]
    fn zero_alpha_is_exact_identity() {
        let mut pb = ParamBuilder::new(1);
        let f = Fcpg::new(&mut pb, "f", 4, FcpgOptions::default()).unwrap();
        let mut store = pb.finish();
        store.value_mut(f.alpha).data_mut()[0] = 0.0;
        let x = Tensor::from_fn(&[1, 4, 4, 8], |i| (i as f64 * 0.37).sin());
        let mut cx = Ctx::new(&store, Mode::Eval);
        let xv = cx.g.constant(x.clone());
        let y = f.forward(&mut cx, xv).unwrap();
        assert_eq!(cx.g.value(y), &x);
    }

    #[test]
    fn all_parameters_are_in_the_prompt_group() {
        let mut pb = ParamBuilder::new(1);
        Fcpg::new(&mut pb, "f", 8, FcpgOptions::default()).unwrap();
        let store = pb.finish();
        assert!(store.entries().iter().all(|e| e.group == ParamGroup::Fcpg));
    }
}
