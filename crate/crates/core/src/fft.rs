//! Two-dimensional discrete Fourier transforms over the trailing two axes.
//!
//! Forward transforms are unnormalized; the inverse divides by `H·W`, so
//! `ifft2d(fft2d(x)) == x` and `Σ|x|² == Σ|X|² / (H·W)`.

use std::cell::RefCell;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftDirection, FftPlanner};

use crate::tensor::{ComplexTensor, Tensor};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, dir: FftDirection) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft(len, dir))
}

/// In-place 2D transform of one `h×w` plane (row-major).
pub(crate) fn transform_plane(buf: &mut [Complex64], h: usize, w: usize, dir: FftDirection) {
    debug_assert_eq!(buf.len(), h * w);
    let row = plan(w, dir);
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let col = plan(h, dir);
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

fn plane_dims(shape: &[usize]) -> (usize, usize, usize) {
    assert!(shape.len() >= 2, "fft2d needs at least two axes");
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    let planes = shape[..shape.len() - 2].iter().product();
    (planes, h, w)
}

/// Forward 2D DFT of every trailing `H×W` plane.
pub fn fft2d(x: &Tensor) -> ComplexTensor {
    let (planes, h, w) = plane_dims(x.shape());
    let mut out = ComplexTensor::zeros(x.shape());
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (b, &v) in buf.iter_mut().zip(src) {
            *b = Complex64::new(v, 0.0);
        }
        transform_plane(&mut buf, h, w, FftDirection::Forward);
        for (i, b) in buf.iter().enumerate() {
            out.re[p * h * w + i] = b.re;
            out.im[p * h * w + i] = b.im;
        }
    }
    out
}

/// Inverse 2D DFT returning the real part and the largest discarded imaginary magnitude.
pub fn ifft2d_with_residue(spec: &ComplexTensor) -> (Tensor, f64) {
    let (planes, h, w) = plane_dims(&spec.shape);
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; spec.re.len()];
    let mut residue: f64 = 0.0;
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for p in 0..planes {
        let o = p * h * w;
        for i in 0..h * w {
            buf[i] = Complex64::new(spec.re[o + i], spec.im[o + i]);
        }
        transform_plane(&mut buf, h, w, FftDirection::Inverse);
        for i in 0..h * w {
            out[o + i] = buf[i].re * scale;
            residue = residue.max((buf[i].im * scale).abs());
        }
    }
    (
        Tensor::new(&spec.shape, out).expect("shape preserved"),
        residue,
    )
}

/// Inverse 2D DFT; the imaginary part is dropped.
pub fn ifft2d(spec: &ComplexTensor) -> Tensor {
    ifft2d_with_residue(spec).0
}

/// `Re(ifft2(fft2(x) ⊙ mask))` for every plane, with a real mask of shape `[H, W]`.
///
/// Returns the filtered planes and the spectrum of `x` (needed for the mask gradient).
pub(crate) fn spectral_filter(x: &[f64], planes: usize, h: usize, w: usize, mask: &[f64]) -> Vec<f64> {
    let scale = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; x.len()];
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    for p in 0..planes {
        let o = p * h * w;
        for i in 0..h * w {
            buf[i] = Complex64::new(x[o + i], 0.0);
        }
        transform_plane(&mut buf, h, w, FftDirection::Forward);
        for (b, &m) in buf.iter_mut().zip(mask) {
            *b *= m;
        }
        transform_plane(&mut buf, h, w, FftDirection::Inverse);
        for i in 0..h * w {
            out[o + i] = buf[i].re * scale;
        }
    }
    out
}

/// Gradient of `Σ g ⊙ Re(ifft2(fft2(x) ⊙ mask))` with respect to the mask:
/// `Σ_planes Re(X_k · conj(G_k)) / (H·W)`.
pub(crate) fn spectral_mask_grad(
    x: &[f64],
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> Vec<f64> {
    let scale = 1.0 / (h * w) as f64;
    let mut acc = vec![0.0; h * w];
    let mut bx = vec![Complex64::new(0.0, 0.0); h * w];
    let mut bg = vec![Complex64::new(0.0, 0.0); h * w];
    for p in 0..planes {
        let o = p * h * w;
        for i in 0..h * w {
            bx[i] = Complex64::new(x[o + i], 0.0);
            bg[i] = Complex64::new(g[o + i], 0.0);
        }
        transform_plane(&mut bx, h, w, FftDirection::Forward);
        transform_plane(&mut bg, h, w, FftDirection::Forward);
        for i in 0..h * w {
            acc[i] += (bx[i] * bg[i].conj()).re * scale;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_has_only_dc() {
        let x = Tensor::full(&[1, 4, 8], 2.5);
        let s = fft2d(&x);
        assert!((s.re[0] - 2.5 * 32.0).abs() < 1e-12);
        for i in 1..32 {
            assert!(s.re[i].abs() < 1e-12 && s.im[i].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let mut x = Tensor::zeros(&[1, 4, 4]);
        x.set(&[0, 0, 0], 1.0);
        let s = fft2d(&x);
        for i in 0..16 {
            assert!((s.re[i] - 1.0).abs() < 1e-12 && s.im[i].abs() < 1e-12);
        }
    }

    #[test]
    fn non_power_of_two_round_trip() {
        let x = Tensor::from_fn(&[2, 3, 5], |i| ((i * 7) % 11) as f64 - 5.0);
        let (back, res) = ifft2d_with_residue(&fft2d(&x));
        assert!(back.max_abs_diff(&x) < 1e-12);
        assert!(res < 1e-12);
    }

    #[test]
    fn all_pass_filter_is_identity() {
        let x: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).cos()).collect();
        let y = spectral_filter(&x, 2, 4, 4, &[1.0; 16]);
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
