//! Dense row-major tensors and the raw `UTSR` dump format.

use std::io::{Read, Write};

use crate::error::{arg_err, shape_err, Error, Result};

/// Dense row-major array of 64-bit floats.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return arg_err("Tensor::new", format!("zero extent in shape {shape:?}"));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return shape_err(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            );
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Value at a multi-index.
    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        idx.iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &e)| {
                debug_assert!(i < e);
                acc * e + i
            })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Round every value to the nearest 32-bit float.
    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }

    /// Write the `UTSR` dump: magic, u32 rank, u32 extents, little-endian f64 payload.
    pub fn write_utsr<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(b"UTSR")?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_utsr<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"UTSR" {
            return Err(Error::Format(format!("bad UTSR magic {magic:?}")));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 16 {
            return Err(Error::Format(format!("implausible UTSR rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Complex spectrum stored as split real and imaginary planes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub shape: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn norm_sqr_sum(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_payload() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(&[2, 0], vec![]).is_err());
        let t = Tensor::new(&[2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.len(), 6);
    }

    #[test]
    fn multi_index_is_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
    }

    #[test]
    fn utsr_round_trip() {
        let t = Tensor::from_fn(&[2, 1, 3], |i| (i as f64).sin() * 1e3);
        let mut buf = Vec::new();
        t.write_utsr(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"UTSR");
        assert_eq!(buf.len(), 4 + 4 + 3 * 4 + 6 * 8);
        let back = Tensor::read_utsr(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn utsr_rejects_bad_magic() {
        let buf = b"XXXX\x01\x00\x00\x00";
        assert!(matches!(
            Tensor::read_utsr(&buf[..]),
            Err(Error::Format(_))
        ));
    }
}
