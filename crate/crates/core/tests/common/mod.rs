//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rscd_core::ssm::SsmParams;
use rscd_core::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

/// Random SSM parameters with a strictly negative `A`.
pub fn random_ssm(dm: usize, n: usize, rng: &mut ChaCha8Rng) -> SsmParams {
    SsmParams {
        a: Tensor::from_fn(&[dm, n], |_| -rng.gen_range(0.05..2.0)),
        d: random(&[dm], rng),
        w_delta: random(&[dm, dm], rng),
        b_delta: random(&[dm], rng),
        w_b: random(&[n, dm], rng),
        w_c: random(&[n, dm], rng),
    }
}

/// Input projections computed with explicit dot products.
pub fn project(p: &SsmParams, u: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let (l, dm) = (u.shape()[0], u.shape()[1]);
    let n = p.w_b.shape()[0];
    let dot = |w: &Tensor, r: usize, t: usize| (0..dm).map(|k| w.at(&[r, k]) * u.at(&[t, k])).sum::<f64>();
    let delta = (0..l)
        .map(|t| (0..dm).map(|d| softplus(dot(&p.w_delta, d, t) + p.b_delta.data()[d])).collect())
        .collect();
    let b = (0..l).map(|t| (0..n).map(|s| dot(&p.w_b, s, t)).collect()).collect();
    let c = (0..l).map(|t| (0..n).map(|s| dot(&p.w_c, s, t)).collect()).collect();
    (delta, b, c)
}

/// Step-by-step recurrence `h ← exp(Δ·A)·h + Δ·B·u`, `y = C·h + D·u`.
pub fn unrolled_scan(p: &SsmParams, u: &Tensor) -> Tensor {
    let (l, dm) = (u.shape()[0], u.shape()[1]);
    let n = p.a.shape()[1];
    let (delta, b, c) = project(p, u);
    let mut y = Tensor::zeros(&[l, dm]);
    for d in 0..dm {
        let mut h = vec![0.0; n];
        for t in 0..l {
            let x = u.at(&[t, d]);
            let mut out = p.d.data()[d] * x;
            for s in 0..n {
                h[s] = (delta[t][d] * p.a.at(&[d, s])).exp() * h[s] + delta[t][d] * b[t][s] * x;
                out += c[t][s] * h[s];
            }
            y.set(&[t, d], out);
        }
    }
    y
}

/// Jaccard loss of a mispredicted set: `|M| / |F ∪ M|`.
pub fn jaccard_loss(fg: &[bool], wrong: &[bool]) -> f64 {
    let m = wrong.iter().filter(|&&w| w).count();
    let union = fg.iter().zip(wrong).filter(|(&f, &w)| f || w).count();
    if union == 0 {
        0.0
    } else {
        m as f64 / union as f64
    }
}

/// Lovász extension of the Jaccard loss by its threshold integral
/// `∫₀¹ Δ({i : eᵢ ≥ t}) dt`, for errors in `[0, 1]`.
pub fn lovasz_by_integral(errors: &[f64], fg: &[bool]) -> f64 {
    let mut levels: Vec<f64> = errors.to_vec();
    levels.push(0.0);
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut total = 0.0;
    for w in levels.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let set: Vec<bool> = errors.iter().map(|&e| e >= hi).collect();
        total += (hi - lo) * jaccard_loss(fg, &set);
    }
    total
}

/// Multi-class Lovász-softmax reference over `probs[c][i]`, averaged over
/// classes present in `labels`.
pub fn lovasz_softmax_oracle(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    let k = probs.len();
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    if present.is_empty() {
        return 0.0;
    }
    present
        .iter()
        .map(|&c| {
            let fg: Vec<bool> = labels.iter().map(|&y| y == c).collect();
            let e: Vec<f64> = fg
                .iter()
                .zip(&probs[c])
                .map(|(&f, &p)| (if f { 1.0 } else { 0.0 } - p).abs())
                .collect();
            lovasz_by_integral(&e, &fg)
        })
        .sum::<f64>()
        / present.len() as f64
}

/// IoU of class `c` by set counting.
pub fn class_iou(reference: &[usize], prediction: &[usize], c: usize) -> f64 {
    let inter = reference.iter().zip(prediction).filter(|(&r, &p)| r == c && p == c).count();
    let union = reference.iter().zip(prediction).filter(|(&r, &p)| r == c || p == c).count();
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean negative log-softmax with per-class weights, summed pixel by pixel.
/// `logits[b][c][i]`, labels flattened over `(b, i)`.
pub fn ce_oracle(logits: &[Vec<Vec<f64>>], labels: &[usize], weights: Option<&[f64]>, ignore: usize) -> f64 {
    let hw = logits[0][0].len();
    let (mut sum, mut count) = (0.0, 0usize);
    for (pix, &y) in labels.iter().enumerate() {
        if y == ignore {
            continue;
        }
        let (b, i) = (pix / hw, pix % hw);
        let zs: Vec<f64> = logits[b].iter().map(|ch| ch[i]).collect();
        let m = zs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + zs.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        let w = weights.map_or(1.0, |w| w[y]);
        sum += w * (lse - zs[y]);
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Split a `[N, K, H, W]` tensor into `[b][c][i]`.
pub fn planes(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
    let s = t.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    (0..n)
        .map(|b| (0..k).map(|c| t.data()[(b * k + c) * hw..(b * k + c + 1) * hw].to_vec()).collect())
        .collect()
}

/// Softmax over axis 1 of a `[N, K, H, W]` tensor, as `[c][pixel]` with
/// pixels flattened over `(b, i)`.
pub fn softmax_by_class(t: &Tensor) -> Vec<Vec<f64>> {
    let p = planes(t);
    let k = p[0].len();
    let hw = p[0][0].len();
    let mut out = vec![Vec::new(); k];
    for plane in &p {
        for i in 0..hw {
            let m = (0..k).map(|c| plane[c][i]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (plane[c][i] - m).exp()).sum();
            for (c, o) in out.iter_mut().enumerate() {
                o.push((plane[c][i] - m).exp() / z);
            }
        }
    }
    out
}

/// Direct convolution of `x: [1, C_in, H, W]` with zero padding, stride 1, one group.
pub fn conv_oracle(x: &Tensor, w: &Tensor, b: &[f64], pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (h + 2 * pad - k + 1, wd + 2 * pad - k + 1);
    let mut out = Tensor::zeros(&[1, cout, ho, wo]);
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let (iy, ix) = ((oy + ky) as isize - pad as isize, (ox + kx) as isize - pad as isize);
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += x.at(&[0, ci, iy as usize, ix as usize]) * w.at(&[co, ci, ky, kx]);
                        }
                    }
                }
                out.set(&[0, co, oy, ox], acc);
            }
        }
    }
    out
}

/// Half-pixel bilinear upsampling of `x: [1, C, H, W]` by `f`, edges clamped.
pub fn bilinear_oracle(x: &Tensor, f: usize) -> Tensor {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let src = |o: usize, n: usize| {
        let s = ((o as f64 + 0.5) / f as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        (i0, (i0 + 1).min(n - 1), s - i0 as f64)
    };
    let mut out = Tensor::zeros(&[1, c, h * f, w * f]);
    for ch in 0..c {
        for oy in 0..h * f {
            let (y0, y1, ly) = src(oy, h);
            for ox in 0..w * f {
                let (x0, x1, lx) = src(ox, w);
                let v = |y, xx| x.at(&[0, ch, y, xx]);
                let top = v(y0, x0) * (1.0 - lx) + v(y0, x1) * lx;
                let bot = v(y1, x0) * (1.0 - lx) + v(y1, x1) * lx;
                out.set(&[0, ch, oy, ox], top * (1.0 - ly) + bot * ly);
            }
        }
    }
    out
}
