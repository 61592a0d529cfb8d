mod common;

use common::rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;
use rscd_core::loss::IGNORE;
use rscd_core::metrics::{
    bda_metrics, binary_from_counts, binary_metrics, harmonic_mean, scd_confusion, scd_metrics, ConfusionMatrix,
};

fn count(n: usize, f: impl Fn(usize) -> bool) -> usize {
    (0..n).filter(|&i| f(i)).count()
}

fn frac(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[test]
fn binary_closed_form() {
    let m = binary_from_counts(50, 10, 10);
    assert!((m.precision - 50.0 / 60.0).abs() < 1e-15);
    assert!((m.recall - 0.833333333333).abs() < 1e-12);
    assert!((m.f1 - 0.833333333333).abs() < 1e-12);
    assert!((m.iou - 0.714285714285).abs() < 1e-12);
    assert!(!m.degenerate);
}

#[test]
fn no_positives_anywhere_is_flagged_zero() {
    let cm = ConfusionMatrix::from_labels(2, &[0; 9], &[0; 9]).unwrap();
    let m = binary_metrics(&cm);
    assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
    assert!(m.degenerate);
}

#[test]
fn ignored_pixels_are_not_counted() {
    let cm = ConfusionMatrix::from_labels(2, &[1, IGNORE, 0, 1], &[1, 1, 0, 0]).unwrap();
    assert_eq!(cm.total(), 3);
}

fn random_masks(r: &mut impl Rng, n: usize, k: usize) -> (Vec<usize>, Vec<usize>) {
    ((0..n).map(|_| r.gen_range(0..k)).collect(), (0..n).map(|_| r.gen_range(0..k)).collect())
}

#[test]
fn binary_matches_pixel_counting() {
    let mut r = rng(5);
    for _ in 0..100 {
        let n = r.gen_range(1..=256);
        let (re, pr) = random_masks(&mut r, n, 2);
        let m = binary_metrics(&ConfusionMatrix::from_labels(2, &re, &pr).unwrap());
        let tp = count(n, |i| re[i] == 1 && pr[i] == 1);
        let fp = count(n, |i| re[i] == 0 && pr[i] == 1);
        let fn_ = count(n, |i| re[i] == 1 && pr[i] == 0);
        assert_eq!(m.precision, frac(tp, tp + fp));
        assert_eq!(m.recall, frac(tp, tp + fn_));
        assert_eq!(m.iou, frac(tp, tp + fp + fn_));
        assert_eq!(m.f1, frac(2 * tp, 2 * tp + fp + fn_));
        if m.f1 > 0.0 {
            assert!((m.iou - m.f1 / (2.0 - m.f1)).abs() < 1e-12);
        }
    }
}

/// Formula-by-formula semantic change metrics from raw label pairs.
fn scd_oracle(re: &[usize], pr: &[usize], k1: usize) -> [f64; 6] {
    let n = re.len();
    let oa = frac(count(n, |i| re[i] == pr[i]), n);
    let iou_nc = frac(count(n, |i| re[i] == 0 && pr[i] == 0), count(n, |i| re[i] == 0 || pr[i] == 0));
    let iou_c = frac(count(n, |i| re[i] != 0 && pr[i] != 0), count(n, |i| re[i] != 0 || pr[i] != 0));
    let kept: Vec<usize> = (0..n).filter(|&i| !(re[i] == 0 && pr[i] == 0)).collect();
    let m = kept.len() as f64;
    let po = kept.iter().filter(|&&i| re[i] == pr[i]).count() as f64 / m;
    let pe: f64 = (0..k1)
        .map(|c| {
            let a = kept.iter().filter(|&&i| re[i] == c).count() as f64;
            let b = kept.iter().filter(|&&i| pr[i] == c).count() as f64;
            a * b
        })
        .sum::<f64>()
        / (m * m);
    let kappa = (po - pe) / (1.0 - pe);
    let hit = count(n, |i| re[i] != 0 && re[i] == pr[i]);
    let p = frac(hit, count(n, |i| pr[i] != 0));
    let rc = frac(hit, count(n, |i| re[i] != 0));
    let f1 = if p + rc > 0.0 { 2.0 * p * rc / (p + rc) } else { 0.0 };
    [oa, 0.5 * (iou_nc + iou_c), iou_nc, iou_c, kappa * (iou_c - 1.0).exp(), f1]
}

#[test]
fn scd_matches_formula_oracle() {
    let mut r = rng(9);
    for _ in 0..100 {
        let k1 = r.gen_range(3..=5);
        let n = r.gen_range(16..=256);
        let (re, pr) = random_masks(&mut r, n, k1);
        let m = scd_metrics(&ConfusionMatrix::from_labels(k1, &re, &pr).unwrap());
        let o = scd_oracle(&re, &pr, k1);
        let got = [m.oa, m.miou, m.iou_unchanged, m.iou_changed, m.sek, m.f1_scd];
        for (a, b) in got.iter().zip(o) {
            assert!((a - b).abs() < 1e-12, "{got:?} vs {o:?}");
        }
    }
}

#[test]
fn perfect_semantic_prediction() {
    let y: Vec<usize> = (0..64).map(|i| i % 3).collect();
    let m = scd_metrics(&ConfusionMatrix::from_labels(3, &y, &y).unwrap());
    assert_eq!((m.oa, m.miou, m.kappa, m.sek), (1.0, 1.0, 1.0, 1.0));
    assert!(!m.degenerate);
}

#[test]
fn all_no_change_is_flagged() {
    let m = scd_metrics(&ConfusionMatrix::from_labels(3, &[0; 64], &[0; 64]).unwrap());
    assert_eq!(m.oa, 1.0);
    assert!(m.degenerate);
}

#[test]
fn scd_confusion_masks_unchanged_predictions() {
    let cm = scd_confusion(3, &[0, 1], &[2, 2], &[1, 1], &[0, 2], &[0, 1]).unwrap();
    // pixel 0 predicted unchanged on both dates: counted as class 0
    assert_eq!(cm.get(0, 0), 2);
    assert_eq!(cm.get(2, 2), 1);
    assert_eq!(cm.get(1, 1), 1);
    assert_eq!(cm.total(), 4);
}

#[test]
fn bda_closed_form_example() {
    // four damage levels, five reference pixels each: four right and one
    // mistaken for the next level, so every level has F1 = 0.8
    let mut ref_dmg = Vec::new();
    let mut pred_dmg = Vec::new();
    for c in 1..=4 {
        ref_dmg.extend([c; 5]);
        pred_dmg.extend([c; 4]);
        pred_dmg.push(c % 4 + 1);
    }
    ref_dmg.extend([IGNORE; 2]);
    pred_dmg.extend([1, 1]);
    // localization: tp 18, fp 2, fn 2 → F1 = 0.9
    let ref_loc: Vec<usize> = [1; 20].into_iter().chain([0, 0]).collect();
    let pred_loc: Vec<usize> = [1; 18].into_iter().chain([0, 0, 1, 1]).collect();
    let m = bda_metrics(4, &ref_loc, &pred_loc, &ref_dmg, &pred_dmg).unwrap();
    for f in &m.per_class {
        assert!((f.unwrap() - 0.8).abs() < 1e-15);
    }
    assert!((m.f1_loc - 0.9).abs() < 1e-15);
    assert!((m.f1_clf - 0.8).abs() < 1e-15);
    assert!((m.f1_overall - 0.83).abs() < 1e-15);
}

#[test]
fn harmonic_mean_is_dominated_by_zero() {
    assert_eq!(harmonic_mean(&[0.9, 0.0, 0.7, 0.8]), 0.0);
    assert!((harmonic_mean(&[0.8; 4]) - 0.8).abs() < 1e-15);
}

#[test]
fn absent_damage_level_is_excluded_and_flagged() {
    let m = bda_metrics(4, &[1, 1, 1], &[1, 1, 1], &[1, 2, 2], &[1, 2, 2]).unwrap();
    assert_eq!(m.per_class[2], None);
    assert_eq!(m.per_class[3], None);
    assert_eq!(m.f1_clf, 1.0);
    assert!(m.degenerate);
}

#[test]
fn bda_matches_pixel_counting() {
    let mut r = rng(13);
    for _ in 0..100 {
        let n = r.gen_range(4..=256);
        let (ref_loc, pred_loc) = random_masks(&mut r, n, 2);
        let ref_dmg: Vec<usize> = ref_loc.iter().map(|&b| if b == 1 { r.gen_range(1..=4) } else { IGNORE }).collect();
        let pred_dmg: Vec<usize> = (0..n).map(|_| r.gen_range(1..=4)).collect();
        let m = bda_metrics(4, &ref_loc, &pred_loc, &ref_dmg, &pred_dmg).unwrap();

        let tp = count(n, |i| ref_loc[i] == 1 && pred_loc[i] == 1);
        let wrong = count(n, |i| ref_loc[i] != pred_loc[i]);
        assert_eq!(m.f1_loc, frac(2 * tp, 2 * tp + wrong));
        let mut scored = Vec::new();
        for c in 1..=4 {
            let on = |i: usize| ref_dmg[i] != IGNORE;
            let tp = count(n, |i| on(i) && ref_dmg[i] == c && pred_dmg[i] == c);
            let fp = count(n, |i| on(i) && ref_dmg[i] != c && pred_dmg[i] == c);
            let fn_ = count(n, |i| on(i) && ref_dmg[i] == c && pred_dmg[i] != c);
            let expect = (tp + fp + fn_ > 0).then(|| frac(2 * tp, 2 * tp + fp + fn_));
            assert_eq!(m.per_class[c - 1], expect);
            scored.extend(expect);
        }
        let hm = if scored.contains(&0.0) || scored.is_empty() {
            0.0
        } else {
            scored.len() as f64 / scored.iter().map(|f| 1.0 / f).sum::<f64>()
        };
        assert!((m.f1_clf - hm).abs() < 1e-12);
        assert!((m.f1_overall - (0.3 * m.f1_loc + 0.7 * hm)).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn confusion_is_order_free_and_mergeable(seed in any::<u64>(), n in 2usize..=256, cut in 0usize..256) {
        let mut r = rng(seed);
        let (re, pr) = random_masks(&mut r, n, 4);
        let whole = ConfusionMatrix::from_labels(4, &re, &pr).unwrap();
        prop_assert_eq!(whole.total(), n as u64);

        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut r);
        let (re2, pr2): (Vec<usize>, Vec<usize>) = idx.iter().map(|&i| (re[i], pr[i])).unzip();
        let shuffled = ConfusionMatrix::from_labels(4, &re2, &pr2).unwrap();
        prop_assert_eq!(&whole, &shuffled);
        prop_assert_eq!(scd_metrics(&whole), scd_metrics(&shuffled));

        let cut = cut % n;
        let mut a = ConfusionMatrix::from_labels(4, &re[..cut], &pr[..cut]).unwrap();
        a.merge(&ConfusionMatrix::from_labels(4, &re[cut..], &pr[cut..]).unwrap());
        prop_assert_eq!(a, whole);
    }
}
