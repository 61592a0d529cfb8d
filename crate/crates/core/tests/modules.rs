mod common;

use common::{bilinear_oracle, conv_oracle, random, rng};
use rscd_core::decoder::Decoder;
use rscd_core::encoder::{Encoder, FeaturePyramid};
use rscd_core::fcpg::{radial_frequency_map, triple_product, SpatialModulator};
use rscd_core::head::{suppress_background, UnifiedHead};
use rscd_core::model::{Model, ModelConfig};
use rscd_core::params::{Ctx, Mode, ParamBuilder, ParamStore};
use rscd_core::head::TaskKind;
use rscd_core::{Error, Tensor};

#[test]
fn radial_map_matches_per_bin_formula() {
    let f = radial_frequency_map(8, 8).unwrap();
    let axis = |k: usize, n: usize| k.min(n - k) as f64 / n as f64;
    for u in 0..8 {
        for v in 0..8 {
            let expect = (axis(u, 8).powi(2) + axis(v, 8).powi(2)).sqrt() / 0.5f64.sqrt();
            assert!((f.at(&[u, v]) - expect).abs() < 1e-15);
            assert_eq!(f.at(&[u, v]), f.at(&[(8 - u) % 8, (8 - v) % 8]));
        }
    }
    assert!((f.at(&[4, 4]) - 1.0).abs() < 1e-15);
}

fn empty_store() -> ParamStore {
    ParamBuilder::new(0).finish()
}

#[test]
fn triple_product_neutral_and_annihilating_factors() {
    let store = empty_store();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let mut r = rng(3);
    let mask = Tensor::from_fn(&[1, 1, 4, 4], |i| (i % 3) as f64 * 0.5);
    let wg = cx.g.constant(Tensor::ones(&[1, 3, 1, 1]));
    let ws = cx.g.constant(Tensor::ones(&[1, 1, 4, 4]));
    let m = cx.g.constant(mask.clone());
    let p = triple_product(&mut cx, wg, m, ws).unwrap();
    let p = cx.g.value(p).clone();
    assert_eq!(p.shape(), [1, 3, 4, 4]);
    for c in 0..3 {
        for i in 0..16 {
            assert_eq!(p.data()[c * 16 + i], mask.data()[i]);
        }
    }
    let wg = cx.g.constant(random(&[1, 3, 1, 1], &mut r));
    let ws = cx.g.constant(random(&[1, 1, 4, 4], &mut r));
    let zero = cx.g.constant(Tensor::zeros(&[1, 1, 4, 4]));
    let p = triple_product(&mut cx, wg, zero, ws).unwrap();
    assert!(cx.g.value(p).data().iter().all(|&v| v == 0.0));
}

#[test]
fn triple_product_matches_elementwise_oracle() {
    let store = empty_store();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let mut r = rng(5);
    let (g0, x0, s0) = (random(&[2, 3, 1, 1], &mut r), random(&[2, 3, 4, 5], &mut r), random(&[2, 1, 4, 5], &mut r));
    let (g, x, s) = (cx.g.constant(g0.clone()), cx.g.constant(x0.clone()), cx.g.constant(s0.clone()));
    let p = triple_product(&mut cx, g, x, s).unwrap();
    let p = cx.g.value(p);
    for n in 0..2 {
        for c in 0..3 {
            for y in 0..4 {
                for z in 0..5 {
                    let e = g0.at(&[n, c, 0, 0]) * x0.at(&[n, c, y, z]) * s0.at(&[n, 0, y, z]);
                    assert!((p.at(&[n, c, y, z]) - e).abs() < 1e-12);
                }
            }
        }
    }
}

fn modulator(groups: usize, bias: f64) -> (SpatialModulator, ParamStore) {
    let mut pb = ParamBuilder::new(9);
    let spm = SpatialModulator::new(&mut pb, "spm", groups);
    let mut store = pb.finish();
    if bias != 0.0 {
        store.value_mut(spm.conv.w).data_mut().fill(0.0);
        store.value_mut(spm.conv.b.unwrap()).data_mut().fill(bias);
    }
    (spm, store)
}

#[test]
fn saturated_gate_passes_prompt_through() {
    let (spm, store) = modulator(2, 60.0);
    let x = random(&[1, 4, 4, 4], &mut rng(1));
    let mut cx = Ctx::new(&store, Mode::Eval);
    let xv = cx.g.constant(x.clone());
    let y = spm.forward(&mut cx, xv).unwrap();
    assert_eq!(cx.g.value(y), &x);
    let z = cx.g.constant(Tensor::zeros(&[1, 4, 4, 4]));
    let y = spm.forward(&mut cx, z).unwrap();
    assert!(cx.g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn one_channel_groups_are_the_channels() {
    let store = empty_store();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let x = random(&[2, 4, 3, 3], &mut rng(2));
    let xv = cx.g.constant(x.clone());
    let gm = cx.g.group_mean(xv, 4).unwrap();
    assert_eq!(cx.g.value(gm), &x);
    assert!(matches!(cx.g.group_mean(xv, 3), Err(Error::Config(_)) | Err(Error::Shape { .. })));
}

fn tiny_model() -> (Model, ParamStore) {
    Model::new(&ModelConfig::tiny(TaskKind::Bcd), 4).unwrap()
}

#[test]
fn patch_embedding_shape_and_zero_input() {
    let cfg = ModelConfig::toy(TaskKind::Bcd);
    let mut pb = ParamBuilder::new(1);
    let enc = Encoder::new(&mut pb, &cfg.encoder).unwrap();
    let mut store = pb.finish();
    store.value_mut(enc.embed.b.unwrap()).data_mut().fill(0.0);
    let mut cx = Ctx::new(&store, Mode::Eval);
    let x = cx.g.constant(random(&[1, 3, 32, 64], &mut rng(0)));
    let e = enc.patch_embed(&mut cx, x).unwrap();
    assert_eq!(cx.g.shape(e), [1, 16, 8, 16]);
    let z = cx.g.constant(Tensor::zeros(&[1, 3, 32, 64]));
    let e = enc.patch_embed(&mut cx, z).unwrap();
    assert!(cx.g.value(e).data().iter().all(|&v| v == 0.0));
    let bad = cx.g.constant(Tensor::zeros(&[1, 3, 30, 64]));
    assert!(matches!(enc.patch_embed(&mut cx, bad), Err(Error::Config(_))));
}

#[test]
fn pyramid_shapes_of_a_concatenated_pair() {
    let (model, store) = tiny_model();
    let d = model.cfg.encoder.dims;
    let mut r = rng(6);
    let (pre, post) = (random(&[1, 3, 32, 32], &mut r), random(&[1, 3, 32, 32], &mut r));
    let mut cx = Ctx::new(&store, Mode::Eval);
    let x = model.layout(&pre, &post).unwrap();
    assert_eq!(x.shape(), [1, 3, 32, 64]);
    let x = cx.g.constant(x);
    let f = model.encoder.encode(&mut cx, x).unwrap();
    let expect = [[d[0], 8, 16], [d[1], 4, 8], [d[2], 2, 4], [d[3], 1, 2]];
    for (lvl, e) in f.levels.iter().zip(expect) {
        assert_eq!(&cx.g.shape(*lvl)[1..], e);
    }
}

fn pyramid(cx: &mut Ctx, dims: [usize; 4], seed: u64) -> (FeaturePyramid, Vec<Tensor>) {
    let mut r = rng(seed);
    let ts: Vec<Tensor> = (0..4)
        .map(|i| random(&[1, dims[i], 8 >> i, 16 >> i], &mut r))
        .collect();
    let levels: Vec<_> = ts.iter().map(|t| cx.g.constant(t.clone())).collect();
    (
        FeaturePyramid {
            levels: levels.try_into().unwrap(),
        },
        ts,
    )
}

fn decoder(seed: u64) -> (Decoder, ParamStore) {
    let mut pb = ParamBuilder::new(seed);
    let d = Decoder::new(&mut pb, &[4, 8, 16, 32], 4);
    let mut store = pb.finish();
    // random biases so the oracle sees them
    let mut r = rng(seed + 1);
    for conv in d.lateral.iter().chain(&d.smooth).chain([&d.fuse]) {
        let b = store.value_mut(conv.b.unwrap());
        *b = random(b.shape(), &mut r);
    }
    (d, store)
}

#[test]
fn identity_lateral_projection_passes_through() {
    let mut pb = ParamBuilder::new(0);
    let d = Decoder::new(&mut pb, &[4, 8, 16, 32], 4);
    let mut store = pb.finish();
    let l = &d.lateral[0];
    *store.value_mut(l.w) = Tensor::from_fn(&[4, 4, 1, 1], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
    let mut cx = Ctx::new(&store, Mode::Eval);
    let x = random(&[1, 4, 8, 16], &mut rng(1));
    let xv = cx.g.constant(x.clone());
    let y = l.forward(&mut cx, xv).unwrap();
    assert_eq!(cx.g.value(y), &x);

    let mut store = store.clone();
    store.value_mut(l.w).data_mut().fill(0.0);
    let mut cx = Ctx::new(&store, Mode::Eval);
    let xv = cx.g.constant(x);
    let y = l.forward(&mut cx, xv).unwrap();
    assert!(cx.g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn top_down_fusion_zero_and_identity_cases() {
    let mut pb = ParamBuilder::new(0);
    let d = Decoder::new(&mut pb, &[4, 8, 16, 32], 4);
    let store = pb.finish();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let zeros: Vec<_> = (0..4).map(|i| cx.g.constant(Tensor::zeros(&[1, 4, 8 >> i, 16 >> i]))).collect();
    let p: [_; 4] = zeros.clone().try_into().unwrap();
    let n = d.topdown_fuse(&mut cx, &p).unwrap();
    for v in n {
        assert!(cx.g.value(v).data().iter().all(|&x| x == 0.0));
    }
    let fused = d.fuse_final(&mut cx, &n).unwrap();
    assert!(cx.g.value(fused).data().iter().all(|&x| x == 0.0));

    // identity-like smoothing: centre tap 1 on the diagonal
    let mut store = store.clone();
    *store.value_mut(d.smooth[0].w) = Tensor::from_fn(&[4, 4, 3, 3], |i| {
        let (o, c, t) = (i / 36, (i / 9) % 4, i % 9);
        if o == c && t == 4 {
            1.0
        } else {
            0.0
        }
    });
    let mut cx = Ctx::new(&store, Mode::Eval);
    let p1 = random(&[1, 4, 8, 16], &mut rng(3));
    let mut p: Vec<_> = (0..4).map(|i| cx.g.constant(Tensor::zeros(&[1, 4, 8 >> i, 16 >> i]))).collect();
    p[0] = cx.g.constant(p1.clone());
    let n = d.topdown_fuse(&mut cx, &p.try_into().unwrap()).unwrap();
    assert_eq!(cx.g.value(n[0]), &p1);

    let bad: [_; 4] = [zeros[0], zeros[0], zeros[2], zeros[3]];
    assert!(matches!(d.topdown_fuse(&mut cx, &bad), Err(Error::Contract { .. })));
}

#[test]
fn decoder_matches_stepwise_composition() {
    let (d, store) = decoder(12);
    let mut cx = Ctx::new(&store, Mode::Eval);
    let (f, ts) = pyramid(&mut cx, [4, 8, 16, 32], 13);
    let out = d.forward(&mut cx, &f).unwrap();
    let out = cx.g.value(out).clone();

    let conv = |x: &Tensor, c: &rscd_core::layers::Conv2d| {
        conv_oracle(x, store.value(c.w), store.value(c.b.unwrap()).data(), c.pad)
    };
    let add = |a: &Tensor, b: &Tensor| Tensor::from_fn(a.shape(), |i| a.data()[i] + b.data()[i]);
    let p: Vec<Tensor> = ts.iter().zip(&d.lateral).map(|(t, c)| conv(t, c)).collect();
    let mut n = p.clone();
    for i in (0..3).rev() {
        n[i] = conv(&add(&bilinear_oracle(&n[i + 1], 2), &p[i]), &d.smooth[i]);
    }
    let parts = [
        bilinear_oracle(&n[3], 8),
        bilinear_oracle(&n[2], 4),
        bilinear_oracle(&n[1], 2),
        n[0].clone(),
    ];
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().to_vec()).collect();
    let cat = Tensor::new(&[1, 16, 8, 16], data).unwrap();
    let expect = bilinear_oracle(&conv(&cat, &d.fuse), 4);
    assert_eq!(out.shape(), expect.shape());
    assert!(out.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn shared_head_maps_zero_to_zero() {
    let mut pb = ParamBuilder::new(2);
    let h = UnifiedHead::new(&mut pb, 8, 8);
    let store = pb.finish();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let z = cx.g.constant(Tensor::zeros(&[1, 8, 4, 8]));
    let y = h.forward(&mut cx, z).unwrap();
    assert_eq!(cx.g.shape(y), [1, 4, 4, 8]);
    assert!(cx.g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn zero_change_probability_leaves_only_the_background_channel() {
    let store = empty_store();
    let mut cx = Ctx::new(&store, Mode::Eval);
    let logits = random(&[1, 4, 3, 3], &mut rng(8));
    let l = cx.g.constant(logits.clone());
    let p = cx.g.constant(Tensor::zeros(&[1, 1, 3, 3]));
    let s = suppress_background(&mut cx, l, p).unwrap();
    let s = cx.g.value(s);
    for i in 0..9 {
        assert_eq!(s.data()[i], logits.data()[i]);
    }
    assert!(s.data()[9..].iter().all(|&v| v == 0.0));
}

#[test]
fn head_output_shapes_per_task() {
    let mut r = rng(4);
    let (pre, post) = (random(&[2, 3, 32, 32], &mut r), random(&[2, 3, 32, 32], &mut r));
    for (task, chans) in [
        (TaskKind::Bcd, vec![2]),
        (TaskKind::Scd { classes: 3 }, vec![2, 4, 4]),
        (TaskKind::Bda { levels: 4 }, vec![2, 5]),
    ] {
        let (model, store) = Model::new(&ModelConfig::tiny(task), 1).unwrap();
        let mut cx = Ctx::new(&store, Mode::Eval);
        let out = model.forward(&mut cx, &pre, &post).unwrap();
        let got: Vec<usize> = out.head.named().iter().map(|(_, v)| cx.g.shape(*v)[1]).collect();
        assert_eq!(got, chans);
        for (_, v) in out.head.named() {
            assert_eq!(&cx.g.shape(v)[2..], [32, 32]);
        }
    }
}
