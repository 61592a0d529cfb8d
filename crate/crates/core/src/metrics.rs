//! Confusion-matrix based evaluation for binary change, semantic change and
//! damage assessment.
//!
//! Matrices are indexed `(reference, prediction)`. Ratios with a zero
//! denominator evaluate to 0 and raise the corresponding `degenerate` flag.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::error::{shape_err, Result};
use crate::loss::IGNORE;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, r: usize, p: usize) -> u64 {
        self.counts[r * self.k + p]
    }

    pub fn set(&mut self, r: usize, p: usize, v: u64) {
        self.counts[r * self.k + p] = v;
    }

    /// Count `(reference, prediction)` pairs; pixels whose reference is [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, reference: &[usize], prediction: &[usize]) -> Result<()> {
        if reference.len() != prediction.len() {
            return shape_err(
                "confusion_matrix",
                format!("{} reference vs {} predicted pixels", reference.len(), prediction.len()),
            );
        }
        for (&r, &p) in reference.iter().zip(prediction) {
            if r == IGNORE {
                continue;
            }
            if r >= self.k || p >= self.k {
                return shape_err("confusion_matrix", format!("pair ({r}, {p}) outside {} classes", self.k));
            }
            self.counts[r * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn from_labels(k: usize, reference: &[usize], prediction: &[usize]) -> Result<Self> {
        let mut cm = Self::new(k);
        cm.accumulate(reference, prediction)?;
        Ok(cm)
    }

    /// Element-wise sum of two matrices of equal size.
    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.k, other.k, "merging matrices of different size");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, r: usize) -> u64 {
        (0..self.k).map(|p| self.get(r, p)).sum()
    }

    pub fn col_sum(&self, p: usize) -> u64 {
        (0..self.k).map(|r| self.get(r, p)).sum()
    }
}

fn ratio(num: u64, den: u64, flag: &mut bool) -> f64 {
    if den == 0 {
        *flag = true;
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BinaryMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub degenerate: bool,
}

/// Metrics of the positive class (index 1) from counts.
pub fn binary_from_counts(tp: u64, fp: u64, fn_: u64) -> BinaryMetrics {
    let mut degenerate = false;
    BinaryMetrics {
        precision: ratio(tp, tp + fp, &mut degenerate),
        recall: ratio(tp, tp + fn_, &mut degenerate),
        f1: ratio(2 * tp, 2 * tp + fp + fn_, &mut degenerate),
        iou: ratio(tp, tp + fp + fn_, &mut degenerate),
        degenerate,
    }
}

/// Precision, recall, F1 and IoU of class 1 in a 2×2 matrix.
pub fn binary_metrics(cm: &ConfusionMatrix) -> BinaryMetrics {
    assert_eq!(cm.classes(), 2, "binary metrics need a 2×2 matrix");
    binary_from_counts(cm.get(1, 1), cm.get(0, 1), cm.get(1, 0))
}

/// Cohen's kappa. Returns `(κ, degenerate)`; an empty matrix gives `(0, true)`,
/// and chance agreement of 1 gives 1 for perfect agreement, else 0 flagged.
pub fn kappa(cm: &ConfusionMatrix) -> (f64, bool) {
    let total = cm.total();
    if total == 0 {
        return (0.0, true);
    }
    let n = total as f64;
    let po = cm.trace() as f64 / n;
    let pe: f64 = (0..cm.classes())
        .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        return if po >= 1.0 { (1.0, false) } else { (0.0, true) };
    }
    ((po - pe) / (1.0 - pe), false)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScdMetrics {
    pub oa: f64,
    pub miou: f64,
    pub iou_unchanged: f64,
    pub iou_changed: f64,
    pub kappa: f64,
    pub sek: f64,
    pub f1_scd: f64,
    pub degenerate: bool,
}

/// Semantic change metrics from a `(K+1)²` matrix whose class 0 is no-change.
///
/// * `OA = trace / total`
/// * `mIoU` averages the IoU of no-change and of changed (all classes pooled)
/// * `SeK = κ(Q)·exp(IoU_changed − 1)`, `Q` being the matrix with cell (0, 0) zeroed
/// * `F1_scd`: precision and recall of changed pixels whose class is also correct
pub fn scd_metrics(cm: &ConfusionMatrix) -> ScdMetrics {
    let mut degenerate = false;
    let total = cm.total();
    let oa = ratio(cm.trace(), total, &mut degenerate);
    let n00 = cm.get(0, 0);
    let ref_nc = cm.row_sum(0);
    let pred_nc = cm.col_sum(0);
    let both_changed = total + n00 - ref_nc - pred_nc;
    let iou_unchanged = ratio(n00, ref_nc + pred_nc - n00, &mut degenerate);
    let iou_changed = ratio(both_changed, total - n00, &mut degenerate);
    let mut q = cm.clone();
    q.set(0, 0, 0);
    let (kappa, kd) = kappa(&q);
    degenerate |= kd;
    let sek = kappa * (iou_changed - 1.0).exp();
    let sc_tp = cm.trace() - n00;
    let p = ratio(sc_tp, total - pred_nc, &mut degenerate);
    let r = ratio(sc_tp, total - ref_nc, &mut degenerate);
    let f1_scd = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    ScdMetrics {
        oa,
        miou: 0.5 * (iou_unchanged + iou_changed),
        iou_unchanged,
        iou_changed,
        kappa,
        sek,
        f1_scd,
        degenerate,
    }
}

/// Semantic matrix over both dates: predicted classes are forced to 0 where
/// the predicted change mask is unset.
pub fn scd_confusion(
    k1: usize,
    pred_change: &[usize],
    pred_t1: &[usize],
    pred_t2: &[usize],
    ref_t1: &[usize],
    ref_t2: &[usize],
) -> Result<ConfusionMatrix> {
    let mask = |p: &[usize]| -> Vec<usize> {
        p.iter().zip(pred_change).map(|(&c, &m)| if m == 1 { c } else { 0 }).collect()
    };
    let mut cm = ConfusionMatrix::new(k1);
    cm.accumulate(ref_t1, &mask(pred_t1))?;
    cm.accumulate(ref_t2, &mask(pred_t2))?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BdaMetrics {
    pub f1_loc: f64,
    /// F1 per damage level `1..=D`; `None` when the level is absent from
    /// both reference and prediction.
    pub per_class: Vec<Option<f64>>,
    pub f1_clf: f64,
    pub f1_overall: f64,
    pub degenerate: bool,
}

/// Weight of localization in the overall damage score.
pub const LOC_WEIGHT: f64 = 0.3;

/// Harmonic mean; 0 if any value is 0 or the slice is empty.
pub fn harmonic_mean(v: &[f64]) -> f64 {
    if v.is_empty() || v.iter().any(|&x| x <= 0.0) {
        return 0.0;
    }
    v.len() as f64 / v.iter().map(|x| 1.0 / x).sum::<f64>()
}

/// Damage assessment metrics.
///
/// Localization is scored on all non-ignored pixels (class 1 = building).
/// Damage levels `1..=levels` are scored on reference building pixels, i.e.
/// where `ref_dmg` is a level; each level is a one-vs-rest binary F1.
pub fn bda_metrics(
    levels: usize,
    ref_loc: &[usize],
    pred_loc: &[usize],
    ref_dmg: &[usize],
    pred_dmg: &[usize],
) -> Result<BdaMetrics> {
    let loc = binary_metrics(&ConfusionMatrix::from_labels(2, ref_loc, pred_loc)?);
    if ref_dmg.len() != pred_dmg.len() {
        return shape_err("bda_metrics", "damage maps differ in length");
    }
    let mut degenerate = loc.degenerate;
    let mut per_class = Vec::with_capacity(levels);
    for c in 1..=levels {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&r, &p) in ref_dmg.iter().zip(pred_dmg) {
            if !(1..=levels).contains(&r) {
                continue;
            }
            match (r == c, p == c) {
                (true, true) => tp += 1,
                (false, true) => fp += 1,
                (true, false) => fn_ += 1,
                _ => {}
            }
        }
        if tp + fp + fn_ == 0 {
            degenerate = true;
            per_class.push(None);
        } else {
            per_class.push(Some(binary_from_counts(tp, fp, fn_).f1));
        }
    }
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    let f1_clf = harmonic_mean(&scored);
    Ok(BdaMetrics {
        f1_loc: loc.f1,
        f1_clf,
        f1_overall: LOC_WEIGHT * loc.f1 + (1.0 - LOC_WEIGHT) * f1_clf,
        per_class,
        degenerate,
    })
}

/// One line of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub dataset: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(dataset: &str, task: &str, metric: &str, value: f64) -> Self {
        Self {
            dataset: dataset.into(),
            task: task.into(),
            metric: metric.into(),
            value,
        }
    }
}

pub fn write_csv(rows: &[MetricRow], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "dataset,task,metric,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.dataset, r.task, r.metric, r.value)?;
    }
    Ok(())
}

/// Aligned plain-text table of the rows.
pub fn format_table(rows: &[MetricRow]) -> String {
    let head = ["dataset", "task", "metric", "value"];
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| [r.dataset.clone(), r.task.clone(), r.metric.clone(), format!("{:.6}", r.value)])
        .collect();
    let mut width = head.map(str::len);
    for c in &cells {
        for (w, s) in width.iter_mut().zip(c) {
            *w = (*w).max(s.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, c: [&str; 4]| {
        let _ = writeln!(
            out,
            "{:<w0$}  {:<w1$}  {:<w2$}  {:>w3$}",
            c[0],
            c[1],
            c[2],
            c[3],
            w0 = width[0],
            w1 = width[1],
            w2 = width[2],
            w3 = width[3]
        );
    };
    line(&mut out, head);
    for c in &cells {
        line(&mut out, [&c[0], &c[1], &c[2], &c[3]]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_closed_form() {
        let m = binary_from_counts(50, 10, 10);
        assert!((m.precision - 50.0 / 60.0).abs() < 1e-15);
        assert!((m.f1 - 50.0 / 60.0).abs() < 1e-15);
        assert!((m.iou - 50.0 / 70.0).abs() < 1e-15);
        assert!(!m.degenerate);
        let d = binary_from_counts(0, 0, 0);
        assert!(d.degenerate && d.f1 == 0.0 && d.iou == 0.0);
    }

    #[test]
    fn perfect_semantic_prediction() {
        let y = [0, 1, 2, 3, 0, 2];
        let cm = ConfusionMatrix::from_labels(4, &y, &y).unwrap();
        let m = scd_metrics(&cm);
        assert_eq!((m.oa, m.miou, m.kappa, m.sek), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn all_unchanged_is_flagged() {
        let y = [0; 9];
        let m = scd_metrics(&ConfusionMatrix::from_labels(3, &y, &y).unwrap());
        assert_eq!(m.oa, 1.0);
        assert!(m.degenerate);
    }

    #[test]
    fn overall_damage_score() {
        assert!((harmonic_mean(&[0.8; 4]) - 0.8).abs() < 1e-15);
        assert_eq!(harmonic_mean(&[0.8, 0.0, 0.9]), 0.0);
        assert!((LOC_WEIGHT * 0.9 + (1.0 - LOC_WEIGHT) * 0.8 - 0.83).abs() < 1e-15);
    }

    #[test]
    fn table_aligns_columns() {
        let t = format_table(&[MetricRow::new("train", "bcd", "f1", 0.5)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].len(), lines[1].len());
    }
}
