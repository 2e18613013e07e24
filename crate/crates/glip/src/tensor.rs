use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense rank-4 array (batch, channels, height, width), row-major with
/// width fastest. The single carrier type for images, feature volumes,
/// kernels and gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Tensor4 {
    /// Builds a tensor from raw data. Fails if the length does not match
    /// the dims or if any value is non-finite.
    pub fn new(dims: (usize, usize, usize, usize), data: Vec<f32>) -> Result<Self> {
        let (n, c, h, w) = dims;
        if data.len() != n * c * h * w {
            return Err(Error::Shape(format!(
                "data length {} != {}x{}x{}x{}",
                data.len(),
                n,
                c,
                h,
                w
            )));
        }
        let t = Tensor4 { n, c, h, w, data };
        t.check_finite("Tensor4::new")?;
        Ok(t)
    }

    /// Internal constructor that skips the finiteness scan (callers must
    /// guarantee the data is already validated or about to be).
    pub(crate) fn from_raw(dims: (usize, usize, usize, usize), data: Vec<f32>) -> Self {
        let (n, c, h, w) = dims;
        debug_assert_eq!(data.len(), n * c * h * w);
        Tensor4 { n, c, h, w, data }
    }

    pub fn zeros(dims: (usize, usize, usize, usize)) -> Self {
        let (n, c, h, w) = dims;
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn filled(dims: (usize, usize, usize, usize), v: f32) -> Self {
        let (n, c, h, w) = dims;
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![v; n * c * h * w],
        }
    }

    /// Scalar tensor of dims (1,1,1,1).
    pub fn scalar(v: f32) -> Self {
        Tensor4 {
            n: 1,
            c: 1,
            h: 1,
            w: 1,
            data: vec![v],
        }
    }

    pub fn from_fn(
        dims: (usize, usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize, usize) -> f32,
    ) -> Self {
        let (n, c, h, w) = dims;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for hi in 0..h {
                    for wi in 0..w {
                        data.push(f(ni, ci, hi, wi));
                    }
                }
            }
        }
        Tensor4 { n, c, h, w, data }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }
    pub fn c(&self) -> usize {
        self.c
    }
    pub fn h(&self) -> usize {
        self.h
    }
    pub fn w(&self) -> usize {
        self.w
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn idx(&self, ni: usize, ci: usize, hi: usize, wi: usize) -> usize {
        ((ni * self.c + ci) * self.h + hi) * self.w + wi
    }

    #[inline]
    pub fn at(&self, ni: usize, ci: usize, hi: usize, wi: usize) -> f32 {
        self.data[self.idx(ni, ci, hi, wi)]
    }

    #[inline]
    pub fn at_mut(&mut self, ni: usize, ci: usize, hi: usize, wi: usize) -> &mut f32 {
        let i = self.idx(ni, ci, hi, wi);
        &mut self.data[i]
    }

    /// One (batch, channel) plane as a contiguous slice.
    pub fn plane(&self, ni: usize, ci: usize) -> &[f32] {
        let s = (ni * self.c + ci) * self.h * self.w;
        &self.data[s..s + self.h * self.w]
    }

    pub fn plane_mut(&mut self, ni: usize, ci: usize) -> &mut [f32] {
        let hw = self.h * self.w;
        let s = (ni * self.c + ci) * hw;
        &mut self.data[s..s + hw]
    }

    pub fn same_dims(&self, other: &Tensor4) -> bool {
        self.dims() == other.dims()
    }

    /// Sum of all elements, accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor4 {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip(&self, other: &Tensor4, f: impl Fn(f32, f32) -> f32) -> Result<Tensor4> {
        if !self.same_dims(other) {
            return Err(Error::Shape(format!(
                "zip dims {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    /// Writes the raw "T4F" fixture format: magic `T4F1`, four u32 LE dims
    /// (n,c,h,w), then the f32 LE payload, width fastest.
    pub fn write_t4f<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(b"T4F1")?;
        for d in [self.n, self.c, self.h, self.w] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_t4f<R: Read>(inp: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        inp.read_exact(&mut magic)?;
        if &magic != b"T4F1" {
            return Err(Error::Format("bad T4F magic".into()));
        }
        let mut dims = [0usize; 4];
        for d in dims.iter_mut() {
            let mut b = [0u8; 4];
            inp.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let count = dims.iter().product::<usize>();
        let mut data = Vec::with_capacity(count);
        let mut b = [0u8; 4];
        for _ in 0..count {
            inp.read_exact(&mut b)?;
            data.push(f32::from_le_bytes(b));
        }
        Tensor4::new((dims[0], dims[1], dims[2], dims[3]), data)
    }

    pub fn save_t4f(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_t4f(&mut f)
    }

    pub fn load_t4f(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Tensor4::read_t4f(&mut f)
    }
}

/// Convolution descriptor: kernel (out_channels, in_channels, kh, kw),
/// per-output-channel bias, stride and zero padding.
#[derive(Clone, Debug)]
pub struct ConvSpec {
    pub kernel: Tensor4,
    pub bias: Vec<f32>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(kernel: Tensor4, bias: Vec<f32>, stride: usize, padding: usize) -> Result<Self> {
        let (oc, ic, kh, kw) = kernel.dims();
        if oc == 0 || ic == 0 || kh == 0 || kw == 0 {
            return Err(Error::Invalid("empty convolution kernel".into()));
        }
        if bias.len() != oc {
            return Err(Error::Invalid(format!(
                "bias length {} != out_channels {}",
                bias.len(),
                oc
            )));
        }
        if stride == 0 {
            return Err(Error::Invalid("stride must be >= 1".into()));
        }
        if bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ConvSpec::new"));
        }
        Ok(ConvSpec {
            kernel,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.n()
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.c()
    }

    pub fn kh(&self) -> usize {
        self.kernel.h()
    }

    pub fn kw(&self) -> usize {
        self.kernel.w()
    }

    /// Output spatial dims of a plain convolution over an (h, w) input:
    /// floor((d + 2 pad - k) / stride) + 1. Errors when non-positive.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = conv_out_dim(h, self.kh(), self.stride, self.padding)?;
        let ow = conv_out_dim(w, self.kw(), self.stride, self.padding)?;
        Ok((oh, ow))
    }

    /// Output spatial dims of the transposed operator: (d - 1) stride + k - 2 pad.
    pub fn deconv_out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = (h - 1) * self.stride + self.kh();
        let ow = (w - 1) * self.stride + self.kw();
        if oh <= 2 * self.padding || ow <= 2 * self.padding {
            return Err(Error::Shape(format!(
                "transposed conv output dims non-positive for input {}x{}",
                h, w
            )));
        }
        Ok((oh - 2 * self.padding, ow - 2 * self.padding))
    }
}

pub(crate) fn conv_out_dim(d: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = d + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "kernel {} larger than padded input {}",
            k, padded
        )));
    }
    Ok((padded - k) / stride + 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor4::new((1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn new_rejects_nan() {
        assert!(Tensor4::new((1, 1, 1, 2), vec![0.0, f32::NAN]).is_err());
    }

    #[test]
    fn index_is_row_major_w_fastest() {
        let t = Tensor4::from_fn((2, 3, 4, 5), |n, c, h, w| (n * 1000 + c * 100 + h * 10 + w) as f32);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.idx(0, 0, 0, 1)], 1.0);
        assert_eq!(t.data()[t.idx(0, 0, 1, 0)], 10.0);
    }

    #[test]
    fn t4f_roundtrip() {
        let t = Tensor4::from_fn((2, 1, 3, 2), |n, _, h, w| n as f32 * 7.25 - h as f32 + 0.5 * w as f32);
        let mut buf = Vec::new();
        t.write_t4f(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"T4F1");
        let back = Tensor4::read_t4f(&mut &buf[..]).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn conv_spec_validation() {
        let k = Tensor4::zeros((4, 3, 7, 7));
        assert!(ConvSpec::new(k.clone(), vec![0.0; 3], 1, 1).is_err());
        assert!(ConvSpec::new(k.clone(), vec![0.0; 4], 0, 1).is_err());
        let spec = ConvSpec::new(k, vec![0.0; 4], 2, 3).unwrap();
        assert_eq!(spec.out_dims(32, 32).unwrap(), (16, 16));
    }

    #[test]
    fn conv_out_dim_shape_arithmetic() {
        // 4x4 input, 2x2 kernel, stride 2, pad 0 -> 2x2
        assert_eq!(conv_out_dim(4, 2, 2, 0).unwrap(), 2);
        assert!(conv_out_dim(1, 3, 1, 0).is_err());
    }
}
