//! Cross-entropy, Lovász and temporal-consistency losses and their per-task
//! weighted compositions.
//!
//! Each loss is a single fused graph node whose local gradient is computed in
//! the forward pass.

use serde::Serialize;

use crate::error::{contract_err, shape_err, Error, Result};
use crate::graph::{Graph, Var};
use crate::head::HeadOutputs;

/// Label value excluded from every loss and metric.
pub const IGNORE: usize = 255;

/// Weights of the binary change composition: `ce + 0.75·lovasz`.
pub const BCD_WEIGHTS: [f64; 2] = [1.0, 0.75];
/// Weights of the damage composition over `(cc_loc, cc_clf, lovasz_loc, lovasz_clf)`.
pub const BDA_WEIGHTS: [f64; 4] = [1.0, 1.0, 0.5, 1.0];

fn check_logits(op: &'static str, g: &Graph, x: Var, labels: usize) -> Result<(usize, usize, usize)> {
    let s = g.shape(x);
    if s.len() != 4 {
        return shape_err(op, format!("expected [N, K, H, W], got {s:?}"));
    }
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    if labels != n * hw {
        return shape_err(op, format!("{labels} labels for {n}×{}×{} pixels", s[2], s[3]));
    }
    Ok((n, k, hw))
}

fn check_label(op: &str, y: usize, k: usize, pixel: usize) -> Result<()> {
    if y != IGNORE && y >= k {
        return Err(Error::Data(format!(
            "{op}: label {y} at pixel {pixel} outside [0, {k}) and not the ignore value {IGNORE}"
        )));
    }
    Ok(())
}

/// Weighted mean negative log-softmax over non-ignored pixels.
///
/// `logits: [N, K, H, W]`, `labels` flattened in `N, H, W` order. The weighted
/// sum is divided by the number of scored pixels; with none, the loss is 0.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize], weights: Option<&[f64]>) -> Result<Var> {
    let (n, k, hw) = check_logits("cross_entropy", g, logits, labels.len())?;
    if let Some(w) = weights {
        if w.len() != k {
            return shape_err("cross_entropy", format!("{} class weights for {k} classes", w.len()));
        }
    }
    let x = g.value(logits).data();
    let mut grad = vec![0.0; x.len()];
    let mut total = 0.0;
    let mut count = 0usize;
    let mut p = vec![0.0; k];
    for b in 0..n {
        for i in 0..hw {
            let pix = b * hw + i;
            let y = labels[pix];
            check_label("cross_entropy", y, k, pix)?;
            if y == IGNORE {
                continue;
            }
            count += 1;
            let at = |c: usize| (b * k + c) * hw + i;
            let m = (0..k).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..k).map(|c| (x[at(c)] - m).exp()).sum();
            for (c, pc) in p.iter_mut().enumerate() {
                *pc = (x[at(c)] - m).exp() / z;
            }
            let w = weights.map_or(1.0, |w| w[y]);
            total += w * (z.ln() - (x[at(y)] - m));
            for c in 0..k {
                grad[at(c)] = w * (p[c] - if c == y { 1.0 } else { 0.0 });
            }
        }
    }
    if count == 0 {
        return Ok(g.scalar_fused("cross_entropy", 0.0, vec![(logits, None)]));
    }
    let inv = 1.0 / count as f64;
    grad.iter_mut().for_each(|v| *v *= inv);
    Ok(g.scalar_fused("cross_entropy", total * inv, vec![(logits, Some(grad))]))
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// errors sorted in decreasing order; `gt_sorted[i]` marks ground-truth
/// membership of the `i`-th largest error.
///
/// Entries are nonnegative and sum to the Jaccard loss of predicting every element.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&b| b).count() as f64;
    let mut out = Vec::with_capacity(gt_sorted.len());
    let (mut pos, mut neg) = (0.0, 0.0);
    let mut prev = 0.0;
    for &b in gt_sorted {
        if b {
            pos += 1.0;
        } else {
            neg += 1.0;
        }
        let jac = 1.0 - (gts - pos) / (gts + neg);
        out.push(jac - prev);
        prev = jac;
    }
    out
}

/// Indices of `errors` sorted by decreasing value, ties by increasing index.
fn sort_desc(errors: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..errors.len()).collect();
    idx.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));
    idx
}

/// Lovász extension value and gradient for one error vector.
fn lovasz_flat(errors: &[f64], gt: &[bool]) -> (f64, Vec<f64>) {
    let order = sort_desc(errors);
    let sorted_gt: Vec<bool> = order.iter().map(|&i| gt[i]).collect();
    let lg = lovasz_grad(&sorted_gt);
    let mut grad = vec![0.0; errors.len()];
    let mut v = 0.0;
    for (r, &i) in order.iter().enumerate() {
        v += errors[i] * lg[r];
        grad[i] = lg[r];
    }
    (v, grad)
}

/// Multi-class Lovász-softmax over `probs: [N, K, H, W]`, averaged over the
/// classes present in the non-ignored labels. Returns 0 when none is present.
pub fn lovasz_softmax(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let (n, k, hw) = check_logits("lovasz_softmax", g, probs, labels.len())?;
    let p = g.value(probs).data();
    let mut pix = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        check_label("lovasz_softmax", y, k, i)?;
        if y != IGNORE {
            pix.push(i);
        }
    }
    let at = |c: usize, i: usize| ((i / hw) * k + c) * hw + i % hw;
    let present: Vec<usize> = (0..k).filter(|&c| pix.iter().any(|&i| labels[i] == c)).collect();
    let mut grad = vec![0.0; n * k * hw];
    if present.is_empty() {
        return Ok(g.scalar_fused("lovasz_softmax", 0.0, vec![(probs, None)]));
    }
    let scale = 1.0 / present.len() as f64;
    let mut total = 0.0;
    for &c in &present {
        let fg: Vec<bool> = pix.iter().map(|&i| labels[i] == c).collect();
        let errors: Vec<f64> = pix
            .iter()
            .zip(&fg)
            .map(|(&i, &f)| (if f { 1.0 } else { 0.0 } - p[at(c, i)]).abs())
            .collect();
        let (v, lg) = lovasz_flat(&errors, &fg);
        total += v;
        for ((&i, &f), gi) in pix.iter().zip(&fg).zip(lg) {
            // e = 1 − p on foreground, p elsewhere
            grad[at(c, i)] = if f { -gi } else { gi } * scale;
        }
    }
    Ok(g.scalar_fused("lovasz_softmax", total * scale, vec![(probs, Some(grad))]))
}

/// Binary Lovász hinge on logits `[N, 1, H, W]` with labels in `{0, 1}` (or ignored).
pub fn lovasz_hinge(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, k, _) = check_logits("lovasz_hinge", g, logits, labels.len())?;
    if k != 1 {
        return shape_err("lovasz_hinge", format!("expected one logit channel, got {k}"));
    }
    let x = g.value(logits).data();
    let mut pix = Vec::new();
    for (i, &y) in labels.iter().enumerate() {
        check_label("lovasz_hinge", y, 2, i)?;
        if y != IGNORE {
            pix.push(i);
        }
    }
    let fg: Vec<bool> = pix.iter().map(|&i| labels[i] == 1).collect();
    let sign = |f: bool| if f { 1.0 } else { -1.0 };
    let margins: Vec<f64> = pix.iter().zip(&fg).map(|(&i, &f)| 1.0 - x[i] * sign(f)).collect();
    let order = sort_desc(&margins);
    let lg = lovasz_grad(&order.iter().map(|&r| fg[r]).collect::<Vec<_>>());
    let mut grad = vec![0.0; x.len()];
    let mut total = 0.0;
    for (r, &j) in order.iter().enumerate() {
        if margins[j] > 0.0 {
            total += margins[j] * lg[r];
            grad[pix[j]] = -sign(fg[j]) * lg[r];
        }
    }
    Ok(g.scalar_fused("lovasz_hinge", total, vec![(logits, Some(grad))]))
}

/// Mean `1 − cos(p₁, p₂)` between per-pixel probability vectors of two
/// `[N, K, H, W]` maps over the pixels where `mask` is set; 0 if none is.
pub fn similarity_loss(g: &mut Graph, p1: Var, p2: Var, mask: &[bool]) -> Result<Var> {
    let (n, k, hw) = check_logits("similarity_loss", g, p1, mask.len())?;
    if g.shape(p1) != g.shape(p2) {
        return shape_err("similarity_loss", "probability maps differ in shape");
    }
    let (a, b) = (g.value(p1).data(), g.value(p2).data());
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Ok(g.scalar_fused("similarity", 0.0, vec![(p1, None), (p2, None)]));
    }
    let inv = 1.0 / count as f64;
    let (mut ga, mut gb) = (vec![0.0; a.len()], vec![0.0; b.len()]);
    let mut total = 0.0;
    for (pix, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (bi, i) = (pix / hw, pix % hw);
        let at = |c: usize| (bi * k + c) * hw + i;
        let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
        for c in 0..k {
            dot += a[at(c)] * b[at(c)];
            na += a[at(c)] * a[at(c)];
            nb += b[at(c)] * b[at(c)];
        }
        let (na, nb) = (na.sqrt(), nb.sqrt());
        let cos = dot / (na * nb);
        total += 1.0 - cos;
        for c in 0..k {
            ga[at(c)] = -inv * (b[at(c)] / (na * nb) - cos * a[at(c)] / (na * na));
            gb[at(c)] = -inv * (a[at(c)] / (na * nb) - cos * b[at(c)] / (nb * nb));
        }
    }
    debug_assert_eq!(n * hw, mask.len());
    Ok(g.scalar_fused("similarity", total * inv, vec![(p1, Some(ga)), (p2, Some(gb))]))
}

/// Inverse-frequency class weights over non-ignored labels, renormalized to
/// mean 1 across the classes that occur. Absent classes get weight 1.
pub fn class_weights(labels: &[usize], k: usize) -> Vec<f64> {
    let mut counts = vec![0usize; k];
    for &y in labels {
        if y < k {
            counts[y] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let mut w = vec![1.0; k];
    let present: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    if present.is_empty() {
        return w;
    }
    for &c in &present {
        w[c] = total as f64 / counts[c] as f64;
    }
    let mean = present.iter().map(|&c| w[c]).sum::<f64>() / present.len() as f64;
    for &c in &present {
        w[c] /= mean;
    }
    w
}

/// Per-pixel labels for one batch, flattened in `N, H, W` order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskLabels {
    Bcd { change: Vec<usize> },
    Scd { change: Vec<usize>, t1: Vec<usize>, t2: Vec<usize> },
    Bda { loc: Vec<usize>, dmg: Vec<usize> },
}

/// Class weights for the balanced cross-entropy terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub change: Option<Vec<f64>>,
    pub sem: Option<Vec<f64>>,
    pub loc: Option<Vec<f64>>,
    pub dmg: Option<Vec<f64>>,
}

/// Named pre-weight loss components and their weighted total.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

fn val(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

fn weighted_sum(g: &mut Graph, terms: &[(f64, Var)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(w, v) in terms {
        let t = if w == 1.0 { v } else { g.scale(v, w) };
        acc = Some(match acc {
            None => t,
            Some(a) => g.add(a, t)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

fn lovasz_on_logits(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let p = g.softmax(logits)?;
    lovasz_softmax(g, p, labels)
}

/// `ce + 0.75·lovasz` on the change logits; cross-entropy unweighted.
pub fn bcd_loss(g: &mut Graph, out: &HeadOutputs, labels: &TaskLabels) -> Result<(Var, LossReport)> {
    let (HeadOutputs::Bcd { change }, TaskLabels::Bcd { change: y }) = (out, labels) else {
        return contract_err("bcd_loss", format!("{} outputs with {} labels", out.task_name(), label_name(labels)));
    };
    let ce = cross_entropy(g, *change, y, None)?;
    let lov = lovasz_on_logits(g, *change, y)?;
    let total = weighted_sum(g, &[(BCD_WEIGHTS[0], ce), (BCD_WEIGHTS[1], lov)])?;
    let report = LossReport {
        total: val(g, total),
        components: vec![("ce", val(g, ce)), ("lovasz", val(g, lov))],
    };
    Ok((total, report))
}

/// `cc_loc + cc_clf + 0.5·lovasz_loc + lovasz_clf`; damage labels off buildings are ignored.
pub fn bda_loss(g: &mut Graph, out: &HeadOutputs, labels: &TaskLabels, w: &LossWeights) -> Result<(Var, LossReport)> {
    let (HeadOutputs::Bda { loc, dmg }, TaskLabels::Bda { loc: yl, dmg: yd }) = (out, labels) else {
        return contract_err("bda_loss", format!("{} outputs with {} labels", out.task_name(), label_name(labels)));
    };
    let cc_loc = cross_entropy(g, *loc, yl, w.loc.as_deref())?;
    let cc_clf = cross_entropy(g, *dmg, yd, w.dmg.as_deref())?;
    let lov_loc = lovasz_on_logits(g, *loc, yl)?;
    let lov_clf = lovasz_on_logits(g, *dmg, yd)?;
    let [a, b, c, d] = BDA_WEIGHTS;
    let total = weighted_sum(g, &[(a, cc_loc), (b, cc_clf), (c, lov_loc), (d, lov_clf)])?;
    let report = LossReport {
        total: val(g, total),
        components: vec![
            ("cc_loc", val(g, cc_loc)),
            ("cc_clf", val(g, cc_clf)),
            ("lovasz_loc", val(g, lov_loc)),
            ("lovasz_clf", val(g, lov_clf)),
        ],
    };
    Ok((total, report))
}

/// `cc_cd + 0.5·(cc_t1 + cc_t2 + 0.5·sim) + 0.75·(lovasz_cd + 0.5·(lovasz_t1 + lovasz_t2))`.
pub fn scd_loss(g: &mut Graph, out: &HeadOutputs, labels: &TaskLabels, w: &LossWeights) -> Result<(Var, LossReport)> {
    let (HeadOutputs::Scd { change, sem_t1, sem_t2 }, TaskLabels::Scd { change: yc, t1, t2 }) = (out, labels) else {
        return contract_err("scd_loss", format!("{} outputs with {} labels", out.task_name(), label_name(labels)));
    };
    let cc_cd = cross_entropy(g, *change, yc, w.change.as_deref())?;
    let cc_t1 = cross_entropy(g, *sem_t1, t1, w.sem.as_deref())?;
    let cc_t2 = cross_entropy(g, *sem_t2, t2, w.sem.as_deref())?;
    let p1 = g.softmax(*sem_t1)?;
    let p2 = g.softmax(*sem_t2)?;
    let unchanged: Vec<bool> = yc.iter().map(|&y| y == 0).collect();
    let sim = similarity_loss(g, p1, p2, &unchanged)?;
    let lov_cd = lovasz_on_logits(g, *change, yc)?;
    let lov_t1 = lovasz_softmax(g, p1, t1)?;
    let lov_t2 = lovasz_softmax(g, p2, t2)?;

    let sem = weighted_sum(g, &[(1.0, cc_t1), (1.0, cc_t2), (0.5, sim)])?;
    let lov_sem = weighted_sum(g, &[(1.0, lov_t1), (1.0, lov_t2)])?;
    let lov = weighted_sum(g, &[(1.0, lov_cd), (0.5, lov_sem)])?;
    let total = weighted_sum(g, &[(1.0, cc_cd), (0.5, sem), (0.75, lov)])?;
    let report = LossReport {
        total: val(g, total),
        components: vec![
            ("cc_cd", val(g, cc_cd)),
            ("cc_t1", val(g, cc_t1)),
            ("cc_t2", val(g, cc_t2)),
            ("sim", val(g, sim)),
            ("lovasz_cd", val(g, lov_cd)),
            ("lovasz_t1", val(g, lov_t1)),
            ("lovasz_t2", val(g, lov_t2)),
        ],
    };
    Ok((total, report))
}

/// Scalar form of the binary change composition.
pub fn bcd_total(ce: f64, lovasz: f64) -> f64 {
    BCD_WEIGHTS[0] * ce + BCD_WEIGHTS[1] * lovasz
}

/// Scalar form of the damage assessment composition.
pub fn bda_total(cc_loc: f64, cc_clf: f64, lovasz_loc: f64, lovasz_clf: f64) -> f64 {
    let [a, b, c, d] = BDA_WEIGHTS;
    a * cc_loc + b * cc_clf + c * lovasz_loc + d * lovasz_clf
}

/// Scalar form of the semantic change composition.
#[allow(clippy::too_many_arguments)]
pub fn scd_total(cc_cd: f64, cc_t1: f64, cc_t2: f64, sim: f64, lovasz_cd: f64, lovasz_t1: f64, lovasz_t2: f64) -> f64 {
    cc_cd + 0.5 * (cc_t1 + cc_t2 + 0.5 * sim) + 0.75 * (lovasz_cd + 0.5 * (lovasz_t1 + lovasz_t2))
}

fn label_name(l: &TaskLabels) -> &'static str {
    match l {
        TaskLabels::Bcd { .. } => "bcd",
        TaskLabels::Scd { .. } => "scd",
        TaskLabels::Bda { .. } => "bda",
    }
}

/// Dispatch to the composition matching the outputs.
pub fn task_loss(g: &mut Graph, out: &HeadOutputs, labels: &TaskLabels, w: &LossWeights) -> Result<(Var, LossReport)> {
    match out {
        HeadOutputs::Bcd { .. } => bcd_loss(g, out, labels),
        HeadOutputs::Scd { .. } => scd_loss(g, out, labels, w),
        HeadOutputs::Bda { .. } => bda_loss(g, out, labels, w),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn uniform_two_class_ce_is_ln2() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        let l = cross_entropy(&mut g, x, &[0, 1, 1, 0], None).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_decreases_with_margin() {
        let mut last = f64::INFINITY;
        for m in [0.5, 1.0, 2.0, 5.0, 20.0] {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(&[1, 2, 1, 1], vec![m, 0.0]).unwrap());
            let l = cross_entropy(&mut g, x, &[0], None).unwrap();
            let v = g.value(l).data()[0];
            assert!(v < last);
            last = v;
        }
        assert!(last < 1e-8);
    }

    #[test]
    fn bad_label_names_pixel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 1, 2]));
        let err = cross_entropy(&mut g, x, &[0, 7], None).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("pixel 1")), "{err}");
    }

    #[test]
    fn lovasz_grad_cases() {
        assert_eq!(lovasz_grad(&[true]), vec![1.0]);
        assert!(lovasz_grad(&[]).is_empty());
        let g = lovasz_grad(&[true, false, true, false]);
        assert!(g.iter().all(|&v| v >= 0.0));
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lovasz_softmax_extremes() {
        let labels = [0, 0, 1, 1];
        let mut g = Graph::new();
        let perfect = Tensor::new(&[1, 2, 2, 2], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let p = g.constant(perfect.clone());
        let l = lovasz_softmax(&mut g, p, &labels).unwrap();
        assert_eq!(g.value(l).data()[0], 0.0);
        let wrong = Tensor::from_fn(&[1, 2, 2, 2], |i| 1.0 - perfect.data()[i]);
        let p = g.constant(wrong);
        let l = lovasz_softmax(&mut g, p, &labels).unwrap();
        assert!((g.value(l).data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn class_weights_have_unit_mean() {
        let w = class_weights(&[0, 0, 0, 1, IGNORE, 2, 2], 4);
        assert!((w[0] + w[1] + w[2] - 3.0).abs() < 1e-12);
        assert!(w[1] > w[2] && w[2] > w[0]);
        assert_eq!(w[3], 1.0);
    }

    #[test]
    fn mismatched_task_is_a_contract_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 1, 1]));
        let out = HeadOutputs::Bcd { change: x };
        let labels = TaskLabels::Bda { loc: vec![0], dmg: vec![0] };
        assert!(matches!(bcd_loss(&mut g, &out, &labels), Err(Error::Contract { .. })));
    }
}
