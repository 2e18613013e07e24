//! Binary validity masks, the mask-update (dilation) rule, and the public
//! partial-convolution entry point. Convention throughout: 1 = valid/known,
//! 0 = hole.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{conv_out_dim, ConvSpec, Tensor4};

/// A binary validity plane. Construction re-binarizes: anything > 0 is valid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlane {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl MaskPlane {
    pub fn new(h: usize, w: usize, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != h * w {
            return Err(Error::Shape(format!("mask bits {} != {}x{}", bits.len(), h, w)));
        }
        Ok(MaskPlane {
            h,
            w,
            bits: bits.into_iter().map(|b| u8::from(b > 0)).collect(),
        })
    }

    pub fn from_f32(h: usize, w: usize, vals: &[f32]) -> Result<Self> {
        if vals.len() != h * w {
            return Err(Error::Shape(format!("mask values {} != {}x{}", vals.len(), h, w)));
        }
        Ok(MaskPlane {
            h,
            w,
            bits: vals.iter().map(|&v| u8::from(v > 0.0)).collect(),
        })
    }

    pub fn ones(h: usize, w: usize) -> Self {
        MaskPlane { h, w, bits: vec![1; h * w] }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        MaskPlane { h, w, bits: vec![0; h * w] }
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.w + j] == 1
    }

    pub fn set(&mut self, i: usize, j: usize, valid: bool) {
        self.bits[i * self.w + j] = u8::from(valid);
    }

    pub fn count_valid(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn hole_fraction(&self) -> f64 {
        1.0 - self.count_valid() as f64 / (self.h * self.w) as f64
    }

    pub fn all_valid(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    pub fn invert(&self) -> MaskPlane {
        MaskPlane {
            h: self.h,
            w: self.w,
            bits: self.bits.iter().map(|&b| 1 - b).collect(),
        }
    }

    /// Pointwise >= comparison (monotonicity checks).
    pub fn covers(&self, other: &MaskPlane) -> bool {
        self.h == other.h
            && self.w == other.w
            && self.bits.iter().zip(&other.bits).all(|(a, b)| a >= b)
    }

    /// self - other as a {0,1} plane; meaningful when self covers other.
    pub fn diff(&self, other: &MaskPlane) -> MaskPlane {
        debug_assert!(self.covers(other));
        MaskPlane {
            h: self.h,
            w: self.w,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| a.saturating_sub(*b))
                .collect(),
        }
    }

    /// The mask as a (1, 1, h, w) tensor of 0.0/1.0.
    pub fn to_tensor(&self) -> Tensor4 {
        Tensor4::new(
            (1, 1, self.h, self.w),
            self.bits.iter().map(|&b| b as f32).collect(),
        )
        .expect("binary data is finite")
    }

    /// Plane of 0.0/1.0 values.
    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| b as f32).collect()
    }

    /// Nearest-neighbor decimation (keeps every factor-th sample).
    pub fn downsample_nearest(&self, factor: usize) -> MaskPlane {
        assert!(factor >= 1 && self.h % factor == 0 && self.w % factor == 0);
        let (oh, ow) = (self.h / factor, self.w / factor);
        let mut bits = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                bits.push(self.bits[i * factor * self.w + j * factor]);
            }
        }
        MaskPlane { h: oh, w: ow, bits }
    }

    pub fn upsample_nearest(&self, factor: usize) -> MaskPlane {
        assert!(factor >= 1);
        let (oh, ow) = (self.h * factor, self.w * factor);
        let mut bits = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                bits.push(self.bits[(i / factor) * self.w + j / factor]);
            }
        }
        MaskPlane { h: oh, w: ow, bits }
    }
}

/// Mask update paired with a partial convolution: an output pixel is valid
/// iff its receptive field contains at least one valid pixel (binarized
/// all-ones convolution). Output dims follow the conv arithmetic.
pub fn update_mask(m: &MaskPlane, kh: usize, kw: usize, stride: usize, padding: usize) -> Result<MaskPlane> {
    let oh = conv_out_dim(m.h, kh, stride, padding)?;
    let ow = conv_out_dim(m.w, kw, stride, padding)?;
    let mut bits = vec![0u8; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            'scan: for u in 0..kh {
                let ih = (i * stride + u) as isize - padding as isize;
                if ih < 0 || ih >= m.h as isize {
                    continue;
                }
                for v in 0..kw {
                    let iw = (j * stride + v) as isize - padding as isize;
                    if iw >= 0 && iw < m.w as isize && m.get(ih as usize, iw as usize) {
                        bits[i * ow + j] = 1;
                        break 'scan;
                    }
                }
            }
        }
    }
    Ok(MaskPlane { h: oh, w: ow, bits })
}

/// Partial convolution over a plain tensor: masked patches rescaled by
/// (in-image patch size / valid count); fully-invalid patches output 0 with
/// the bias suppressed. The mask is a constant w.r.t. differentiation.
pub fn partial_conv(x: &Tensor4, m: &MaskPlane, spec: &ConvSpec) -> Result<Tensor4> {
    let (out, _aux) = ops::partial_conv(x, m, &spec.kernel, Some(&spec.bias), spec.stride, spec.padding)?;
    out.check_finite("partial_conv")?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::conv2d;
    use crate::testutil::rng_tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn square_hole(h: usize, w: usize, ci: usize, cj: usize, r: usize) -> MaskPlane {
        let mut m = MaskPlane::ones(h, w);
        for i in ci.saturating_sub(r)..(ci + r).min(h) {
            for j in cj.saturating_sub(r)..(cj + r).min(w) {
                m.set(i, j, false);
            }
        }
        m
    }

    #[test]
    fn rebinarizes_on_construction() {
        let m = MaskPlane::new(1, 3, vec![0, 2, 255]).unwrap();
        assert_eq!(m.bits(), &[0, 1, 1]);
    }

    #[test]
    fn update_all_zeros_stays_zero() {
        let m = MaskPlane::zeros(5, 5);
        let u = update_mask(&m, 3, 3, 1, 1).unwrap();
        assert_eq!(u.count_valid(), 0);
    }

    #[test]
    fn update_single_pixel_dilates_to_block() {
        let mut m = MaskPlane::zeros(5, 5);
        m.set(2, 2, true);
        let u = update_mask(&m, 3, 3, 1, 1).unwrap();
        assert_eq!(u.count_valid(), 9);
        for i in 1..4 {
            for j in 1..4 {
                assert!(u.get(i, j));
            }
        }
    }

    #[test]
    fn update_all_ones_is_fixed_point() {
        let m = MaskPlane::ones(6, 7);
        let u = update_mask(&m, 3, 3, 1, 1).unwrap();
        assert_eq!(u, m);
    }

    #[test]
    fn update_is_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let bits: Vec<u8> = (0..64).map(|_| rng.random_range(0..2u8)).collect();
            let m = MaskPlane::new(8, 8, bits).unwrap();
            let u = update_mask(&m, 3, 3, 1, 1).unwrap();
            assert!(u.covers(&m));
        }
    }

    #[test]
    fn hole_of_inradius_r_closes_in_exactly_r_updates() {
        for r in 1..=6usize {
            let mut m = square_hole(20, 20, 10, 10, r);
            for step in 1..=r {
                m = update_mask(&m, 3, 3, 1, 1).unwrap();
                if step < r {
                    assert!(!m.all_valid(), "r={r} closed early at step {step}");
                }
            }
            assert!(m.all_valid(), "r={r} not closed after r updates");
        }
    }

    #[test]
    fn all_valid_equals_plain_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let x = rng_tensor(&mut rng, (1, 3, 7, 9));
            let k = rng_tensor(&mut rng, (4, 3, 3, 3));
            let bias: Vec<f32> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let spec = ConvSpec::new(k.clone(), bias.clone(), 1, 1).unwrap();
            let m = MaskPlane::ones(7, 9);
            let y = partial_conv(&x, &m, &spec).unwrap();
            let c = conv2d(&x, &k, Some(&bias), 1, 1).unwrap();
            let diff = y.zip(&c, |a, b| (a - b).abs()).unwrap().max_abs();
            assert!(diff < 1e-6, "diff {diff}");
        }
    }

    #[test]
    fn fully_invalid_patch_outputs_zero_not_bias() {
        let x = Tensor4::filled((1, 1, 5, 5), 1.0);
        let m = MaskPlane::zeros(5, 5);
        let k = Tensor4::filled((1, 1, 3, 3), 1.0);
        let spec = ConvSpec::new(k, vec![7.5], 1, 1).unwrap();
        let y = partial_conv(&x, &m, &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_of_nine_valid_rescales_to_full_sum() {
        // interior patch, 3 valid pixels of value 1 under an all-ones kernel:
        // masked sum 3, scale 9/3 -> 9.0
        let x = Tensor4::filled((1, 1, 5, 5), 1.0);
        let mut m = MaskPlane::zeros(5, 5);
        m.set(1, 1, true);
        m.set(2, 2, true);
        m.set(3, 3, true);
        let k = Tensor4::filled((1, 1, 3, 3), 1.0);
        let spec = ConvSpec::new(k, vec![0.0], 1, 1).unwrap();
        let y = partial_conv(&x, &m, &spec).unwrap();
        assert_eq!(y.at(0, 0, 2, 2), 9.0);
    }

    #[test]
    fn scale_invariance_in_valid_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = rng_tensor(&mut rng, (1, 2, 6, 6));
        let bits: Vec<u8> = (0..36).map(|_| rng.random_range(0..2u8)).collect();
        let m = MaskPlane::new(6, 6, bits).unwrap();
        let k = rng_tensor(&mut rng, (3, 2, 3, 3));
        let spec = ConvSpec::new(k, vec![0.0; 3], 1, 1).unwrap();
        let y1 = partial_conv(&x, &m, &spec).unwrap();
        let alpha = 2.5f32;
        let xs = x.map(|v| alpha * v);
        let y2 = partial_conv(&xs, &m, &spec).unwrap();
        let diff = y2.zip(&y1, |a, b| (a - alpha * b).abs()).unwrap().max_abs();
        assert!(diff < 1e-4, "diff {diff}");
    }
}
