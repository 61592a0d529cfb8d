//! Forward and backward kernels for convolution, interpolation and dense products.

use std::cell::Cell;

thread_local! {
    static FLIP_CONV_WEIGHT_GRAD: Cell<bool> = const { Cell::new(false) };
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::F64) };
}

/// Arithmetic width of the dense products behind convolutions and linear
/// layers. Verification runs in `F64`; training may use `F32` products with
/// f64 accumulation of their results.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Products smaller than this many multiply-adds always run in f64.
const F32_MIN_WORK: usize = 1 << 16;

/// Restores the previous precision when dropped.
pub struct PrecisionGuard(Precision);

impl Drop for PrecisionGuard {
    fn drop(&mut self) {
        PRECISION.with(|c| c.set(self.0));
    }
}

/// Set the product precision on the current thread until the guard drops.
pub fn use_precision(p: Precision) -> PrecisionGuard {
    PrecisionGuard(PRECISION.with(|c| c.replace(p)))
}

pub fn precision() -> Precision {
    PRECISION.with(|c| c.get())
}

/// Fault injection for the gradient-check canary: negates the convolution
/// weight gradient on the current thread while enabled.
#[doc(hidden)]
pub fn inject_conv_grad_sign_flip(enabled: bool) {
    FLIP_CONV_WEIGHT_GRAD.with(|c| c.set(enabled));
}

/// `c = a·b + beta·c` with optional transposition of `a` (m×k) and `b` (k×n).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if precision() == Precision::F32 && m * k * n >= F32_MIN_WORK {
        let a32: Vec<f32> = a[..m * k].iter().map(|&x| x as f32).collect();
        let b32: Vec<f32> = b[..k * n].iter().map(|&x| x as f32).collect();
        let mut c32 = vec![0.0f32; m * n];
        // SAFETY: the buffers hold exactly the strided extents passed.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a32.as_ptr(),
                rsa,
                csa,
                b32.as_ptr(),
                rsb,
                csb,
                0.0,
                c32.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for (ci, &p) in c[..m * n].iter_mut().zip(&c32) {
            *ci = p as f64 + if beta == 0.0 { 0.0 } else { beta * *ci };
        }
        return;
    }
    // SAFETY: the slices cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }
}

/// Unfold one group of one sample into `[cin_g·k·k, ho·wo]` columns.
fn im2col(x: &[f64], g: &ConvGeom, ci0: usize, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    for ci in 0..g.cin_g() {
        let plane = &x[(ci0 + ci) * g.h * g.w..(ci0 + ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, ci0: usize, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let k = g.k;
    for ci in 0..g.cin_g() {
        let plane = &mut dx[(ci0 + ci) * g.h * g.w..(ci0 + ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let kk = g.cin_g() * g.k * g.k;
    let mut out = vec![0.0; g.n * g.cout * hw];
    let mut cols = vec![0.0; kk * hw];
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let on = &mut out[n * g.cout * hw..(n + 1) * g.cout * hw];
        for gi in 0..g.groups {
            im2col(xn, g, gi * g.cin_g(), &mut cols);
            let co0 = gi * g.cout_g();
            gemm(
                g.cout_g(),
                kk,
                hw,
                &w[co0 * kk..(co0 + g.cout_g()) * kk],
                false,
                &cols,
                false,
                0.0,
                &mut on[co0 * hw..(co0 + g.cout_g()) * hw],
            );
        }
        if let Some(b) = b {
            for (co, &bv) in b.iter().enumerate() {
                for v in &mut on[co * hw..(co + 1) * hw] {
                    *v += bv;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`; each is computed only when requested.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    want_dx: bool,
    want_dw: bool,
    want_db: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let kk = g.cin_g() * g.k * g.k;
    let mut dx = want_dx.then(|| vec![0.0; x.len()]);
    let mut dw = want_dw.then(|| vec![0.0; w.len()]);
    let db = want_db.then(|| {
        let mut db = vec![0.0; g.cout];
        for n in 0..g.n {
            for (co, d) in db.iter_mut().enumerate() {
                let o = (n * g.cout + co) * hw;
                *d += dout[o..o + hw].iter().sum::<f64>();
            }
        }
        db
    });
    let mut cols = vec![0.0; kk * hw];
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let dn = &dout[n * g.cout * hw..(n + 1) * g.cout * hw];
        for gi in 0..g.groups {
            let co0 = gi * g.cout_g();
            let dg = &dn[co0 * hw..(co0 + g.cout_g()) * hw];
            if let Some(dw) = dw.as_mut() {
                im2col(xn, g, gi * g.cin_g(), &mut cols);
                gemm(
                    g.cout_g(),
                    hw,
                    kk,
                    dg,
                    false,
                    &cols,
                    true,
                    1.0,
                    &mut dw[co0 * kk..(co0 + g.cout_g()) * kk],
                );
            }
            if let Some(dx) = dx.as_mut() {
                gemm(
                    kk,
                    g.cout_g(),
                    hw,
                    &w[co0 * kk..(co0 + g.cout_g()) * kk],
                    true,
                    dg,
                    false,
                    0.0,
                    &mut cols,
                );
                let dxn = &mut dx[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
                col2im(&cols, g, gi * g.cin_g(), dxn);
            }
        }
    }
    if FLIP_CONV_WEIGHT_GRAD.with(|c| c.get()) {
        if let Some(dw) = dw.as_mut() {
            dw.iter_mut().for_each(|v| *v = -*v);
        }
    }
    (dx, dw, db)
}

/// Source indices and weights for one axis of a half-pixel-centred bilinear resize.
pub(crate) fn bilinear_taps(src: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    let scale = 1.0 / factor as f64;
    (0..src * factor)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(src - 1);
            let i1 = if i0 + 1 < src { i0 + 1 } else { i0 };
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

pub(crate) fn upsample_forward(x: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let (ho, wo) = (h * f, w * f);
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (1.0 - lx) + src[y1 * w + x1] * lx;
                dst[oy * wo + ox] = top * (1.0 - ly) + bot * ly;
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(d: &[f64], planes: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let ty = bilinear_taps(h, f);
    let tx = bilinear_taps(w, f);
    let (ho, wo) = (h * f, w * f);
    let mut dx = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &d[p * ho * wo..(p + 1) * ho * wo];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let g = src[oy * wo + ox];
                dst[y0 * w + x0] += g * (1.0 - ly) * (1.0 - lx);
                dst[y0 * w + x1] += g * (1.0 - ly) * lx;
                dst[y1 * w + x0] += g * ly * (1.0 - lx);
                dst[y1 * w + x1] += g * ly * lx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_loops() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, 0.0, &mut c);
        for i in 0..m {
            for j in 0..n {
                let r: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - r).abs() < 1e-12);
            }
        }
        // transposed operands
        let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, &at, true, &b, false, 0.0, &mut c2);
        assert_eq!(c, c2);
    }

    #[test]
    fn taps_for_factor_one_are_identity() {
        for (o, &(i0, _, l)) in bilinear_taps(5, 1).iter().enumerate() {
            assert_eq!(i0, o);
            assert_eq!(l, 0.0);
        }
    }
}
