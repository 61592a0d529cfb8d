//! Bitemporal concatenation and four-directional cross-scanning.
//!
//! A `[C, H, W']` map is flattened into an `[L, C]` sequence (`L = H·W'`) in
//! one of four raster orders and restored by the inverse permutation.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, contract_err, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Registered image pair of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct BitemporalPair {
    pre: Tensor,
    post: Tensor,
}

impl BitemporalPair {
    pub fn new(pre: Tensor, post: Tensor) -> Result<Self> {
        if pre.shape() != post.shape() {
            return arg_err(
                "BitemporalPair",
                format!("pre {:?} and post {:?} differ", pre.shape(), post.shape()),
            );
        }
        if pre.rank() < 2 {
            return arg_err("BitemporalPair", "images need at least two spatial axes");
        }
        Ok(Self { pre, post })
    }

    pub fn pre(&self) -> &Tensor {
        &self.pre
    }

    pub fn post(&self) -> &Tensor {
        &self.post
    }
}

/// How the two acquisitions are combined before encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatMode {
    /// Side by side along the width axis.
    #[default]
    Horizontal,
    /// Stacked along the channel axis.
    Channel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScanDirection {
    Row,
    RowRev,
    Col,
    ColRev,
}

impl ScanDirection {
    pub const ALL: [ScanDirection; 4] = [
        ScanDirection::Row,
        ScanDirection::RowRev,
        ScanDirection::Col,
        ScanDirection::ColRev,
    ];
}

/// Flattened map in one scan order.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanSequence {
    pub direction: ScanDirection,
    /// `[L, C]`
    pub seq: Tensor,
    /// `(H, W')` of the map the sequence came from.
    pub origin_shape: (usize, usize),
}

/// `out[t]` is the row-major spatial position visited at step `t`.
pub fn scan_order(h: usize, w: usize, dir: ScanDirection) -> Vec<usize> {
    let row: Vec<usize> = (0..h * w).collect();
    let col: Vec<usize> = (0..w).flat_map(|x| (0..h).map(move |y| y * w + x)).collect();
    match dir {
        ScanDirection::Row => row,
        ScanDirection::RowRev => row.into_iter().rev().collect(),
        ScanDirection::Col => col,
        ScanDirection::ColRev => col.into_iter().rev().collect(),
    }
}

fn inverse_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (t, &p) in order.iter().enumerate() {
        inv[p] = t;
    }
    inv
}

/// Concatenate along the last (width) axis: `[.., H, W] × 2 → [.., H, 2W]`.
pub fn horizontal_concat(pair: &BitemporalPair) -> Tensor {
    concat_last_axis(pair.pre(), pair.post())
}

/// Concatenate along the channel axis (axis `rank-3`).
pub fn channel_concat(pair: &BitemporalPair) -> Result<Tensor> {
    let s = pair.pre().shape();
    if s.len() < 3 {
        return arg_err("channel_concat", format!("need [.., C, H, W], got {s:?}"));
    }
    let axis = s.len() - 3;
    let outer: usize = s[..axis].iter().product();
    let inner: usize = s[axis..].iter().product();
    let mut data = Vec::with_capacity(2 * pair.pre().len());
    for o in 0..outer {
        data.extend_from_slice(&pair.pre().data()[o * inner..(o + 1) * inner]);
        data.extend_from_slice(&pair.post().data()[o * inner..(o + 1) * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] *= 2;
    Tensor::new(&shape, data)
}

fn concat_last_axis(a: &Tensor, b: &Tensor) -> Tensor {
    let w = *a.shape().last().unwrap();
    let mut data = Vec::with_capacity(a.len() * 2);
    for (ra, rb) in a.data().chunks_exact(w).zip(b.data().chunks_exact(w)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() *= 2;
    Tensor::new(&shape, data).expect("concat shape")
}

/// Split a `[.., H, 2W]` map back into its two `[.., H, W]` halves.
pub fn split_halves(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let w2 = *x.shape().last().unwrap();
    if !w2.is_multiple_of(2) {
        return shape_err("split_halves", format!("odd width {w2}"));
    }
    let w = w2 / 2;
    let mut a = Vec::with_capacity(x.len() / 2);
    let mut b = Vec::with_capacity(x.len() / 2);
    for r in x.data().chunks_exact(w2) {
        a.extend_from_slice(&r[..w]);
        b.extend_from_slice(&r[w..]);
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = w;
    Ok((Tensor::new(&shape, a)?, Tensor::new(&shape, b)?))
}

/// Flatten a `[C, H, W']` map into an `[L, C]` sequence.
pub fn scan(x: &Tensor, dir: ScanDirection) -> Result<ScanSequence> {
    let s = x.shape();
    if s.len() != 3 {
        return shape_err("scan", format!("need [C, H, W], got {s:?}"));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let order = scan_order(h, w, dir);
    let mut data = Vec::with_capacity(x.len());
    for &p in &order {
        for ch in 0..c {
            data.push(x.data()[ch * h * w + p]);
        }
    }
    Ok(ScanSequence {
        direction: dir,
        seq: Tensor::new(&[h * w, c], data)?,
        origin_shape: (h, w),
    })
}

/// Restore the `[C, H, W']` map a sequence was scanned from.
pub fn inverse_scan(s: &ScanSequence) -> Result<Tensor> {
    let (h, w) = s.origin_shape;
    let ss = s.seq.shape();
    if ss.len() != 2 || ss[0] != h * w {
        return contract_err(
            "inverse_scan",
            format!("sequence {ss:?} inconsistent with origin {h}×{w}"),
        );
    }
    let c = ss[1];
    let order = scan_order(h, w, s.direction);
    let mut out = vec![0.0; c * h * w];
    for (t, &p) in order.iter().enumerate() {
        for ch in 0..c {
            out[ch * h * w + p] = s.seq.data()[t * c + ch];
        }
    }
    Tensor::new(&[c, h, w], out)
}

/// Elementwise sum of the four directional maps, accumulated in a fixed order.
pub fn aggregate_directions(maps: [&Tensor; 4]) -> Result<Tensor> {
    let shape = maps[0].shape();
    if maps.iter().any(|m| m.shape() != shape) {
        return shape_err("aggregate_directions", "directional maps differ in shape");
    }
    let mut out = maps[0].clone();
    for m in &maps[1..] {
        for (o, v) in out.data_mut().iter_mut().zip(m.data()) {
            *o += v;
        }
    }
    Ok(out)
}

/// Graph form of [`scan`] on a batch: `[N, C, H, W'] → [N, L, C]`.
pub fn scan_var(g: &mut Graph, x: Var, dir: ScanDirection) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return shape_err("scan", format!("need [N, C, H, W], got {s:?}"));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let order = scan_order(h, w, dir);
    let mut idx = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for &p in &order {
            for ch in 0..c {
                idx.push((b * c + ch) * h * w + p);
            }
        }
    }
    g.gather(x, &[n, h * w, c], idx)
}

/// Graph form of [`inverse_scan`] on a batch: `[N, L, C] → [N, C, H, W']`.
pub fn inverse_scan_var(g: &mut Graph, s: Var, dir: ScanDirection, h: usize, w: usize) -> Result<Var> {
    let ss = g.shape(s).to_vec();
    if ss.len() != 3 || ss[1] != h * w {
        return contract_err("inverse_scan", format!("sequence {ss:?} inconsistent with {h}×{w}"));
    }
    let (n, l, c) = (ss[0], ss[1], ss[2]);
    let inv = inverse_order(&scan_order(h, w, dir));
    let mut idx = Vec::with_capacity(n * c * l);
    for b in 0..n {
        for ch in 0..c {
            for &t in &inv {
                idx.push((b * l + t) * c + ch);
            }
        }
    }
    g.gather(s, &[n, c, h, w], idx)
}

/// Graph form of [`horizontal_concat`] on batches `[N, C, H, W]`.
pub fn horizontal_concat_var(g: &mut Graph, pre: Var, post: Var) -> Result<Var> {
    if g.shape(pre) != g.shape(post) {
        return arg_err("horizontal_concat", "pre and post differ in shape");
    }
    let axis = g.shape(pre).len() - 1;
    g.concat(&[pre, post], axis)
}

/// Left (pre) and right (post) halves of a `[N, C, H, 2W]` map.
pub fn split_halves_var(g: &mut Graph, x: Var) -> Result<(Var, Var)> {
    let s = g.shape(x).to_vec();
    let axis = s.len() - 1;
    if !s[axis].is_multiple_of(2) {
        return shape_err("split_halves", format!("odd width in {s:?}"));
    }
    let w = s[axis] / 2;
    Ok((g.slice(x, axis, 0, w)?, g.slice(x, axis, w, w)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| i as f64 + 1.0)
    }

    #[test]
    fn concat_shapes_and_index_mapping() {
        let pre = ramp(&[3, 4, 4]);
        let post = pre.map(|v| -v);
        let pair = BitemporalPair::new(pre.clone(), post.clone()).unwrap();
        let out = horizontal_concat(&pair);
        assert_eq!(out.shape(), &[3, 4, 8]);
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(out.at(&[c, y, x]), pre.at(&[c, y, x]));
                    assert_eq!(out.at(&[c, y, 4 + x]), post.at(&[c, y, x]));
                }
            }
        }
        let (a, b) = split_halves(&out).unwrap();
        assert_eq!((a, b), (pre, post));
    }

    #[test]
    fn identical_pair_duplicates() {
        let t = ramp(&[2, 3, 5]);
        let out = horizontal_concat(&BitemporalPair::new(t.clone(), t).unwrap());
        for c in 0..2 {
            for y in 0..3 {
                for x in 0..5 {
                    assert_eq!(out.at(&[c, y, x]), out.at(&[c, y, 5 + x]));
                }
            }
        }
    }

    #[test]
    fn mismatched_pair_is_rejected() {
        assert!(BitemporalPair::new(Tensor::zeros(&[3, 4, 4]), Tensor::zeros(&[3, 4, 5])).is_err());
    }

    #[test]
    fn scan_orders_on_small_grid() {
        let x = ramp(&[1, 2, 4]);
        let seq = |d| scan(&x, d).unwrap().seq.into_data();
        assert_eq!(seq(ScanDirection::Row), vec![1., 2., 3., 4., 5., 6., 7., 8.]);
        assert_eq!(seq(ScanDirection::Col), vec![1., 5., 2., 6., 3., 7., 4., 8.]);
        assert_eq!(seq(ScanDirection::RowRev), vec![8., 7., 6., 5., 4., 3., 2., 1.]);
        assert_eq!(seq(ScanDirection::ColRev), vec![8., 4., 7., 3., 6., 2., 5., 1.]);
        assert_eq!(scan(&x, ScanDirection::Row).unwrap().seq.shape(), &[2 * 4, 1]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let x = Tensor::from_fn(&[2, 3, 6], |i| ((i * 37) % 17) as f64 * 0.123 - 1.0);
        for d in ScanDirection::ALL {
            assert_eq!(inverse_scan(&scan(&x, d).unwrap()).unwrap(), x);
        }
    }

    #[test]
    fn zero_sequence_restores_zero_map() {
        let s = ScanSequence {
            direction: ScanDirection::Col,
            seq: Tensor::zeros(&[12, 2]),
            origin_shape: (3, 4),
        };
        assert_eq!(inverse_scan(&s).unwrap(), Tensor::zeros(&[2, 3, 4]));
    }

    #[test]
    fn inconsistent_length_is_a_contract_error() {
        let s = ScanSequence {
            direction: ScanDirection::Row,
            seq: Tensor::zeros(&[11, 2]),
            origin_shape: (3, 4),
        };
        assert!(matches!(inverse_scan(&s), Err(crate::Error::Contract { .. })));
    }

    #[test]
    fn aggregation_sums() {
        let t = ramp(&[2, 2, 2]);
        let z = Tensor::zeros(&[2, 2, 2]);
        assert_eq!(aggregate_directions([&t, &t, &t, &t]).unwrap(), t.map(|v| 4.0 * v));
        assert_eq!(aggregate_directions([&z, &z, &t, &z]).unwrap(), t);
        assert!(aggregate_directions([&t, &t, &t, &Tensor::zeros(&[2, 2, 1])]).is_err());
    }

    #[test]
    fn graph_scan_matches_tensor_scan() {
        let x = Tensor::from_fn(&[1, 3, 2, 6], |i| i as f64);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        for d in ScanDirection::ALL {
            let s = scan_var(&mut g, xv, d).unwrap();
            let expect = scan(&x.clone().reshape(&[3, 2, 6]).unwrap(), d).unwrap().seq;
            assert_eq!(g.value(s).data(), expect.data());
            let back = inverse_scan_var(&mut g, s, d, 2, 6).unwrap();
            assert_eq!(g.value(back), &x);
        }
    }
}
