mod common;

use common::{project, random, random_ssm, rng, unrolled_scan};
use proptest::prelude::*;
use rand::Rng;
use rscd_core::scan::{
    aggregate_directions, horizontal_concat, inverse_scan, scan, BitemporalPair, ScanDirection,
};
use rscd_core::ssm::discretize;
use rscd_core::Tensor;

fn grid_1_to_8() -> Tensor {
    Tensor::from_fn(&[1, 2, 4], |i| i as f64 + 1.0)
}

fn order(dir: ScanDirection) -> Vec<f64> {
    scan(&grid_1_to_8(), dir).unwrap().seq.data().to_vec()
}

#[test]
fn scan_orders_on_a_two_by_four_plane() {
    assert_eq!(order(ScanDirection::Row), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    assert_eq!(order(ScanDirection::Col), [1.0, 5.0, 2.0, 6.0, 3.0, 7.0, 4.0, 8.0]);
    assert_eq!(order(ScanDirection::RowRev), [8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]);
    assert_eq!(order(ScanDirection::ColRev), [8.0, 4.0, 7.0, 3.0, 6.0, 2.0, 5.0, 1.0]);
    assert_eq!(scan(&grid_1_to_8(), ScanDirection::Row).unwrap().seq.shape(), [8, 1]);
}

#[test]
fn concatenated_pair_places_post_on_the_right() {
    let mut r = rng(2);
    let (pre, post) = (random(&[3, 4, 4], &mut r), random(&[3, 4, 4], &mut r));
    let out = horizontal_concat(&BitemporalPair::new(pre.clone(), post.clone()).unwrap());
    assert_eq!(out.shape(), [3, 4, 8]);
    for c in 0..3 {
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(out.at(&[c, y, x]), pre.at(&[c, y, x]));
                assert_eq!(out.at(&[c, y, 4 + x]), post.at(&[c, y, x]));
            }
        }
    }
}

#[test]
fn random_aggregation_equals_elementwise_sum() {
    let mut r = rng(4);
    let maps: Vec<Tensor> = (0..4).map(|_| random(&[2, 3, 6], &mut r)).collect();
    let out = aggregate_directions([&maps[0], &maps[1], &maps[2], &maps[3]]).unwrap();
    for i in 0..out.len() {
        let s: f64 = maps.iter().map(|m| m.data()[i]).sum();
        assert!((out.data()[i] - s).abs() < 1e-15);
    }
    let z = Tensor::zeros(&[2, 3, 6]);
    assert_eq!(aggregate_directions([&z, &z, &z, &maps[0]]).unwrap(), maps[0]);
}

#[test]
fn projections_match_matrix_products() {
    let mut r = rng(8);
    let p = random_ssm(5, 3, &mut r);
    let x = random(&[7, 5], &mut r);
    let (dl, b, c) = p.generate_params(&x).unwrap();
    let (odl, ob, oc) = project(&p, &x);
    for t in 0..7 {
        for d in 0..5 {
            assert!((dl.at(&[t, d]) - odl[t][d]).abs() < 1e-12);
        }
        for s in 0..3 {
            assert!((b.at(&[t, s]) - ob[t][s]).abs() < 1e-12);
            assert!((c.at(&[t, s]) - oc[t][s]).abs() < 1e-12);
        }
    }
}

#[test]
fn vanishing_step_freezes_the_state() {
    let a = Tensor::new(&[2, 2], vec![-0.5, -3.0, -1.0, -7.0]).unwrap();
    let b = Tensor::new(&[1, 2], vec![2.0, -4.0]).unwrap();
    let mut last = f64::INFINITY;
    for dl in [1e-2, 1e-4, 1e-8] {
        let (abar, bbar) = discretize(&a, &b, &Tensor::full(&[1, 2], dl)).unwrap();
        let gap = abar
            .data()
            .iter()
            .map(|v| (v - 1.0).abs())
            .chain(bbar.data().iter().map(|v| v.abs()))
            .fold(0.0, f64::max);
        assert!(gap < last);
        last = gap;
    }
    assert!(last < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn scan_round_trip_is_bitwise(c in 1usize..4, h in 1usize..6, w in 1usize..8, seed in any::<u64>()) {
        let x = random(&[c, h, w], &mut rng(seed));
        for dir in ScanDirection::ALL {
            let s = scan(&x, dir).unwrap();
            prop_assert_eq!(s.seq.shape(), &[h * w, c]);
            prop_assert_eq!(inverse_scan(&s).unwrap(), x.clone());
        }
    }

    #[test]
    fn identical_images_give_mirrored_halves(seed in any::<u64>()) {
        let x = random(&[2, 3, 5], &mut rng(seed));
        let out = horizontal_concat(&BitemporalPair::new(x.clone(), x).unwrap());
        for c in 0..2 {
            for y in 0..3 {
                for i in 0..5 {
                    prop_assert_eq!(out.at(&[c, y, i]), out.at(&[c, y, 5 + i]));
                }
            }
        }
    }

    #[test]
    fn selective_scan_matches_unrolled_recurrence(
        l in 1usize..=64,
        dm in 1usize..5,
        n in 1usize..=8,
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let p = random_ssm(dm, n, &mut r);
        let u = Tensor::from_fn(&[l, dm], |_| r.gen_range(-2.0..2.0));
        let y = p.selective_scan(&u).unwrap();
        prop_assert!(y.max_abs_diff(&unrolled_scan(&p, &u)) <= 1e-10);
    }
}
