//! CPU kernels for the spatial operators: convolution (plus its input/kernel
//! adjoints, shared with the transposed form), partial convolution, the fixed
//! depthwise Gaussian blur, nearest-neighbor resampling, batch normalization,
//! 2x2 max pooling and Gram matrices.
//!
//! Parallel loops split over independent output planes only; the per-element
//! accumulation order is identical to the sequential loops, so results are
//! bit-identical with and without rayon.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::pconv::MaskPlane;
use crate::tensor::{conv_out_dim, Tensor4};

/// Cross-correlation with bias: out (n, oc, oh, ow).
pub fn conv2d(x: &Tensor4, k: &Tensor4, bias: Option<&[f32]>, stride: usize, pad: usize) -> Result<Tensor4> {
    let (n, cin, h, w) = x.dims();
    let (oc, kin, kh, kw) = k.dims();
    if cin != kin {
        return Err(Error::Shape(format!(
            "conv2d input channels {} != kernel in_channels {}",
            cin, kin
        )));
    }
    if let Some(b) = bias {
        if b.len() != oc {
            return Err(Error::Shape(format!("bias length {} != out_channels {}", b.len(), oc)));
        }
    }
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(w, kw, stride, pad)?;
    let mut out = Tensor4::zeros((n, oc, oh, ow));
    let ohw = oh * ow;
    out.data_mut()
        .par_chunks_mut(ohw)
        .enumerate()
        .for_each(|(pi, plane)| {
            let ni = pi / oc;
            let oci = pi % oc;
            for ici in 0..cin {
                let xp = x.plane(ni, ici);
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = k.at(oci, ici, khi, kwi);
                        accum_corr_row(plane, xp, wv, h, w, oh, ow, khi, kwi, stride, pad);
                    }
                }
            }
            // bias last, so the masked/renormalized variant can share the
            // accumulation order bit-for-bit
            if let Some(b) = bias {
                let bv = b[oci];
                for v in plane.iter_mut() {
                    *v += bv;
                }
            }
        });
    Ok(out)
}

/// plane[oh][ow] += wv * xp[oh*stride + khi - pad][ow*stride + kwi - pad]
#[inline]
fn accum_corr_row(
    plane: &mut [f32],
    xp: &[f32],
    wv: f32,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    khi: usize,
    kwi: usize,
    stride: usize,
    pad: usize,
) {
    for ohi in 0..oh {
        let ih = (ohi * stride + khi) as isize - pad as isize;
        if ih < 0 || ih >= h as isize {
            continue;
        }
        let xrow = &xp[ih as usize * w..ih as usize * w + w];
        let orow = &mut plane[ohi * ow..ohi * ow + ow];
        if stride == 1 {
            // iw = owi + kwi - pad: clip to the in-bounds window and walk two
            // contiguous slices.
            let shift = kwi as isize - pad as isize;
            let lo = (-shift).max(0) as usize;
            let hi = ow.min((w as isize - shift).max(0) as usize);
            if lo >= hi {
                continue;
            }
            let xs = &xrow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
            for (o, xv) in orow[lo..hi].iter_mut().zip(xs) {
                *o += wv * xv;
            }
        } else {
            for (owi, o) in orow.iter_mut().enumerate() {
                let iw = (owi * stride + kwi) as isize - pad as isize;
                if iw >= 0 && iw < w as isize {
                    *o += wv * xrow[iw as usize];
                }
            }
        }
    }
}

/// Adjoint of `conv2d` in its input: scatters `src` (n, oc, sh, sw) back
/// through the kernel into a tensor of `target_dims`. Also the forward pass
/// of the transposed convolution.
pub fn conv2d_back_input(
    src: &Tensor4,
    k: &Tensor4,
    stride: usize,
    pad: usize,
    target_dims: (usize, usize, usize, usize),
) -> Result<Tensor4> {
    let (n, soc, sh, sw) = src.dims();
    let (koc, kic, kh, kw) = k.dims();
    if soc != koc {
        return Err(Error::Shape(format!(
            "transposed conv channels {} != kernel out_channels {}",
            soc, koc
        )));
    }
    let (tn, tc, th, tw) = target_dims;
    if tn != n || tc != kic {
        return Err(Error::Shape("transposed conv target dims inconsistent".into()));
    }
    let mut out = Tensor4::zeros(target_dims);
    let thw = th * tw;
    out.data_mut()
        .par_chunks_mut(thw)
        .enumerate()
        .for_each(|(pi, plane)| {
            let ni = pi / tc;
            let ici = pi % tc;
            for oci in 0..soc {
                let sp = src.plane(ni, oci);
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let wv = k.at(oci, ici, khi, kwi);
                        scatter_row(plane, sp, wv, th, tw, sh, sw, khi, kwi, stride, pad);
                    }
                }
            }
        });
    Ok(out)
}

/// plane[sh*stride + khi - pad][sw*stride + kwi - pad] += wv * sp[sh][sw]
#[inline]
fn scatter_row(
    plane: &mut [f32],
    sp: &[f32],
    wv: f32,
    th: usize,
    tw: usize,
    sh: usize,
    sw: usize,
    khi: usize,
    kwi: usize,
    stride: usize,
    pad: usize,
) {
    for shi in 0..sh {
        let ih = (shi * stride + khi) as isize - pad as isize;
        if ih < 0 || ih >= th as isize {
            continue;
        }
        let srow = &sp[shi * sw..shi * sw + sw];
        let orow = &mut plane[ih as usize * tw..ih as usize * tw + tw];
        if stride == 1 {
            let shift = kwi as isize - pad as isize;
            let lo = (-shift).max(0) as usize;
            let hi = sw.min((tw as isize - shift).max(0) as usize);
            if lo >= hi {
                continue;
            }
            let os = &mut orow[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
            for (o, sv) in os.iter_mut().zip(&srow[lo..hi]) {
                *o += wv * sv;
            }
        } else {
            for (swi, sv) in srow.iter().enumerate() {
                let iw = (swi * stride + kwi) as isize - pad as isize;
                if iw >= 0 && iw < tw as isize {
                    orow[iw as usize] += wv * sv;
                }
            }
        }
    }
}

/// Kernel gradient of `conv2d`: dk[oc][ic][kh][kw] = sum dy[n,oc,oh,ow] * x[n,ic,...].
pub fn conv2d_back_kernel(
    x: &Tensor4,
    dy: &Tensor4,
    stride: usize,
    pad: usize,
    kdims: (usize, usize, usize, usize),
) -> Tensor4 {
    let (n, _cin, h, w) = x.dims();
    let (_, oc, oh, ow) = dy.dims();
    let (koc, kic, kh, kw) = kdims;
    debug_assert_eq!(koc, oc);
    let mut dk = Tensor4::zeros(kdims);
    let per_oc = kic * kh * kw;
    dk.data_mut()
        .par_chunks_mut(per_oc)
        .enumerate()
        .for_each(|(oci, kslab)| {
            for ici in 0..kic {
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let mut acc = 0.0f32;
                        for ni in 0..n {
                            let xp = x.plane(ni, ici);
                            let dyp = dy.plane(ni, oci);
                            for ohi in 0..oh {
                                let ih = (ohi * stride + khi) as isize - pad as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                let xrow = &xp[ih as usize * w..ih as usize * w + w];
                                let dyrow = &dyp[ohi * ow..ohi * ow + ow];
                                if stride == 1 {
                                    let shift = kwi as isize - pad as isize;
                                    let lo = (-shift).max(0) as usize;
                                    let hi = ow.min((w as isize - shift).max(0) as usize);
                                    if lo < hi {
                                        let xs = &xrow[(lo as isize + shift) as usize
                                            ..(hi as isize + shift) as usize];
                                        for (d, xv) in dyrow[lo..hi].iter().zip(xs) {
                                            acc += d * xv;
                                        }
                                    }
                                } else {
                                    for (owi, d) in dyrow.iter().enumerate() {
                                        let iw = (owi * stride + kwi) as isize - pad as isize;
                                        if iw >= 0 && iw < w as isize {
                                            acc += d * xrow[iw as usize];
                                        }
                                    }
                                }
                            }
                        }
                        kslab[(ici * kh + khi) * kw + kwi] = acc;
                    }
                }
            }
        });
    dk
}

/// Bias gradient: per-out-channel sum of dy over (n, h, w).
pub fn conv2d_back_bias(dy: &Tensor4) -> Vec<f32> {
    let (n, oc, _, _) = dy.dims();
    let mut db = vec![0.0f32; oc];
    for ni in 0..n {
        for oci in 0..oc {
            let mut acc = 0.0f64;
            for &v in dy.plane(ni, oci) {
                acc += v as f64;
            }
            db[oci] += acc as f32;
        }
    }
    db
}

/// Transposed convolution (gradient-of-conv operator): input channels must
/// equal the kernel's out_channels; overlapping contributions sum. No bias.
pub fn deconv2d(x: &Tensor4, k: &Tensor4, stride: usize, pad: usize) -> Result<Tensor4> {
    let (n, xc, h, w) = x.dims();
    let (koc, kic, kh, kw) = k.dims();
    if xc != koc {
        return Err(Error::Shape(format!(
            "deconv2d input channels {} != kernel out_channels {}",
            xc, koc
        )));
    }
    let th = (h - 1) * stride + kh;
    let tw = (w - 1) * stride + kw;
    if th <= 2 * pad || tw <= 2 * pad {
        return Err(Error::Shape("deconv2d output dims non-positive".into()));
    }
    conv2d_back_input(x, k, stride, pad, (n, kic, th - 2 * pad, tw - 2 * pad))
}

/// Input gradient of `deconv2d`: a plain correlation of dy with the kernel.
pub fn deconv2d_back_input(dy: &Tensor4, k: &Tensor4, stride: usize, pad: usize, xdims: (usize, usize, usize, usize)) -> Result<Tensor4> {
    let got = conv2d(dy, k, None, stride, pad)?;
    if got.dims() != xdims {
        return Err(Error::Shape("deconv2d backward dims drifted".into()));
    }
    Ok(got)
}

/// Kernel gradient of `deconv2d`. The transposed conv is the adjoint of a
/// virtual convolution that maps dy (the large side) to x (the small side)
/// with the same kernel layout, so the conv kernel-gradient applies directly
/// with dy on the input side and x on the output side.
pub fn deconv2d_back_kernel(x: &Tensor4, dy: &Tensor4, stride: usize, pad: usize, kdims: (usize, usize, usize, usize)) -> Tensor4 {
    conv2d_back_kernel(dy, x, stride, pad, kdims)
}

/// Per-output-position renormalization data for a partial convolution.
#[derive(Clone, Debug)]
pub struct PconvAux {
    /// in-image patch size / valid count, or 0.0 where no valid pixel exists.
    pub scale: Vec<f32>,
    pub oh: usize,
    pub ow: usize,
}

/// Mask-renormalized convolution. Only in-image patch positions count toward
/// the numerator, so an all-valid mask reproduces `conv2d` exactly (ratio 1
/// everywhere, including borders). Fully invalid patches output 0, bias
/// suppressed.
pub fn partial_conv(
    x: &Tensor4,
    mask: &MaskPlane,
    k: &Tensor4,
    bias: Option<&[f32]>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4, PconvAux)> {
    let (n, cin, h, w) = x.dims();
    if mask.h() != h || mask.w() != w {
        return Err(Error::Shape(format!(
            "mask dims {}x{} != input spatial dims {}x{}",
            mask.h(),
            mask.w(),
            h,
            w
        )));
    }
    let (oc, kin, kh, kw) = k.dims();
    if cin != kin {
        return Err(Error::Shape(format!(
            "partial_conv input channels {} != kernel in_channels {}",
            cin, kin
        )));
    }
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(w, kw, stride, pad)?;
    let aux = pconv_scales(mask, kh, kw, stride, pad, oh, ow);
    let xm = mask_mul(x, mask);
    let raw = conv2d(&xm, k, None, stride, pad)?;
    let mut out = Tensor4::zeros((n, oc, oh, ow));
    for ni in 0..n {
        for oci in 0..oc {
            let b = bias.map_or(0.0, |b| b[oci]);
            let rp = raw.plane(ni, oci);
            let op = out.plane_mut(ni, oci);
            for (i, (o, r)) in op.iter_mut().zip(rp).enumerate() {
                let s = aux.scale[i];
                if s > 0.0 {
                    *o = r * s + b;
                }
            }
        }
    }
    Ok((out, aux))
}

pub(crate) fn pconv_scales(mask: &MaskPlane, kh: usize, kw: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> PconvAux {
    let (h, w) = (mask.h(), mask.w());
    let mut scale = vec![0.0f32; oh * ow];
    for ohi in 0..oh {
        for owi in 0..ow {
            let mut valid = 0u32;
            let mut inimg = 0u32;
            for khi in 0..kh {
                let ih = (ohi * stride + khi) as isize - pad as isize;
                if ih < 0 || ih >= h as isize {
                    continue;
                }
                for kwi in 0..kw {
                    let iw = (owi * stride + kwi) as isize - pad as isize;
                    if iw < 0 || iw >= w as isize {
                        continue;
                    }
                    inimg += 1;
                    if mask.get(ih as usize, iw as usize) {
                        valid += 1;
                    }
                }
            }
            if valid > 0 {
                scale[ohi * ow + owi] = inimg as f32 / valid as f32;
            }
        }
    }
    PconvAux { scale, oh, ow }
}

/// x with each channel multiplied by the binary mask plane.
pub fn mask_mul(x: &Tensor4, mask: &MaskPlane) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    debug_assert_eq!((mask.h(), mask.w()), (h, w));
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let p = out.plane_mut(ni, ci);
            for (v, m) in p.iter_mut().zip(mask.bits()) {
                if *m == 0 {
                    *v = 0.0;
                }
            }
        }
    }
    out
}

/// Backward of `partial_conv` w.r.t. input, kernel and bias. The mask and the
/// renormalization are constants.
pub fn partial_conv_back(
    x: &Tensor4,
    mask: &MaskPlane,
    k: &Tensor4,
    stride: usize,
    pad: usize,
    aux: &PconvAux,
    dy: &Tensor4,
) -> Result<(Tensor4, Tensor4, Vec<f32>)> {
    let (n, oc, _, _) = dy.dims();
    // dz = dy * scale (per position, every channel)
    let mut dz = dy.clone();
    for ni in 0..n {
        for oci in 0..oc {
            let p = dz.plane_mut(ni, oci);
            for (v, s) in p.iter_mut().zip(&aux.scale) {
                *v *= s;
            }
        }
    }
    let xm = mask_mul(x, mask);
    let dxm = conv2d_back_input(&dz, k, stride, pad, x.dims())?;
    let dx = mask_mul(&dxm, mask);
    let dk = conv2d_back_kernel(&xm, &dz, stride, pad, k.dims());
    // bias gradient only where a valid pixel existed
    let mut db = vec![0.0f32; oc];
    for ni in 0..n {
        for oci in 0..oc {
            let mut acc = 0.0f64;
            for (i, &v) in dy.plane(ni, oci).iter().enumerate() {
                if aux.scale[i] > 0.0 {
                    acc += v as f64;
                }
            }
            db[oci] += acc as f32;
        }
    }
    Ok((dx, dk, db))
}

const BLUR3: [[f32; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];

#[inline]
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    // mirror without repeating the edge sample; degenerates to clamping for n == 1
    if n == 1 {
        return 0;
    }
    if i < 0 {
        (-i) as usize
    } else if i >= n as isize {
        2 * n - 2 - i as usize
    } else {
        i as usize
    }
}

/// Fixed depthwise 3x3 Gaussian [1 2 1; 2 4 2; 1 2 1]/16, stride 1,
/// reflect padding (constants stay constant at borders).
pub fn blur3_reflect(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let mut out = Tensor4::zeros((n, c, h, w));
    let hw = h * w;
    out.data_mut()
        .par_chunks_mut(hw)
        .enumerate()
        .for_each(|(pi, plane)| {
            let xp = x.plane(pi / c, pi % c);
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0f32;
                    for (di, row) in BLUR3.iter().enumerate() {
                        let ii = reflect(i as isize + di as isize - 1, h);
                        for (dj, &cv) in row.iter().enumerate() {
                            let jj = reflect(j as isize + dj as isize - 1, w);
                            acc += cv * xp[ii * w + jj];
                        }
                    }
                    plane[i * w + j] = acc * (1.0 / 16.0);
                }
            }
        });
    out
}

/// Adjoint of `blur3_reflect` (scatters through the reflected indices).
pub fn blur3_reflect_adjoint(dy: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = dy.dims();
    let mut out = Tensor4::zeros((n, c, h, w));
    let hw = h * w;
    out.data_mut()
        .par_chunks_mut(hw)
        .enumerate()
        .for_each(|(pi, plane)| {
            let dp = dy.plane(pi / c, pi % c);
            for i in 0..h {
                for j in 0..w {
                    let g = dp[i * w + j] * (1.0 / 16.0);
                    for (di, row) in BLUR3.iter().enumerate() {
                        let ii = reflect(i as isize + di as isize - 1, h);
                        for (dj, &cv) in row.iter().enumerate() {
                            let jj = reflect(j as isize + dj as isize - 1, w);
                            plane[ii * w + jj] += cv * g;
                        }
                    }
                }
            }
        });
    out
}

/// Nearest-neighbor upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor4, factor: usize) -> Tensor4 {
    assert!(factor >= 1);
    let (n, c, h, w) = x.dims();
    let mut out = Tensor4::zeros((n, c, h * factor, w * factor));
    let ow = w * factor;
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.plane(ni, ci);
            let op = out.plane_mut(ni, ci);
            for i in 0..h * factor {
                let xrow = &xp[(i / factor) * w..(i / factor) * w + w];
                let orow = &mut op[i * ow..i * ow + ow];
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = xrow[j / factor];
                }
            }
        }
    }
    out
}

/// Backward of nearest upsampling: sums each replicated block.
pub fn upsample_nearest_back(dy: &Tensor4, factor: usize, xdims: (usize, usize, usize, usize)) -> Tensor4 {
    let (n, c, h, w) = xdims;
    let mut dx = Tensor4::zeros(xdims);
    let ow = w * factor;
    for ni in 0..n {
        for ci in 0..c {
            let dp = dy.plane(ni, ci);
            let xp = dx.plane_mut(ni, ci);
            for i in 0..h * factor {
                let xrow = &mut xp[(i / factor) * w..(i / factor) * w + w];
                let drow = &dp[i * ow..i * ow + ow];
                for (j, d) in drow.iter().enumerate() {
                    xrow[j / factor] += d;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor decimation: keeps every factor-th row/column (offset 0).
pub fn downsample_nearest(x: &Tensor4, factor: usize) -> Tensor4 {
    assert!(factor >= 1);
    let (n, c, h, w) = x.dims();
    let (oh, ow) = (h / factor, w / factor);
    Tensor4::from_fn((n, c, oh, ow), |ni, ci, i, j| x.at(ni, ci, i * factor, j * factor))
}

pub fn downsample_nearest_back(dy: &Tensor4, factor: usize, xdims: (usize, usize, usize, usize)) -> Tensor4 {
    let (_, _, oh, ow) = dy.dims();
    let mut dx = Tensor4::zeros(xdims);
    let (n, c, _, _) = xdims;
    for ni in 0..n {
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    *dx.at_mut(ni, ci, i * factor, j * factor) += dy.at(ni, ci, i, j);
                }
            }
        }
    }
    dx
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BnSaved {
    pub mean: Vec<f32>,
    pub inv_std: Vec<f32>,
}

/// Per-channel standardization over (n, h, w) with learned affine.
/// Statistics always come from the batch; variance floored at 1e-5.
pub fn batchnorm(x: &Tensor4, gamma: &[f32], beta: &[f32]) -> Result<(Tensor4, BnSaved)> {
    let (n, c, h, w) = x.dims();
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Shape(format!(
            "batchnorm affine length {}/{} != channels {}",
            gamma.len(),
            beta.len(),
            c
        )));
    }
    let m = (n * h * w) as f64;
    let mut mean = vec![0.0f32; c];
    let mut inv_std = vec![0.0f32; c];
    for ci in 0..c {
        let mut s = 0.0f64;
        for ni in 0..n {
            for &v in x.plane(ni, ci) {
                s += v as f64;
            }
        }
        let mu = s / m;
        let mut var = 0.0f64;
        for ni in 0..n {
            for &v in x.plane(ni, ci) {
                let d = v as f64 - mu;
                var += d * d;
            }
        }
        var /= m;
        mean[ci] = mu as f32;
        inv_std[ci] = (1.0 / (var + BN_EPS).sqrt()) as f32;
    }
    let mut out = Tensor4::zeros(x.dims());
    for ni in 0..n {
        for ci in 0..c {
            let (mu, is, g, b) = (mean[ci], inv_std[ci], gamma[ci], beta[ci]);
            let xp = x.plane(ni, ci);
            let op = out.plane_mut(ni, ci);
            for (o, &v) in op.iter_mut().zip(xp) {
                *o = g * (v - mu) * is + b;
            }
        }
    }
    Ok((out, BnSaved { mean, inv_std }))
}

/// Standard batch-statistics backward; returns (dx, dgamma, dbeta).
pub fn batchnorm_back(
    x: &Tensor4,
    gamma: &[f32],
    saved: &BnSaved,
    dy: &Tensor4,
) -> (Tensor4, Vec<f32>, Vec<f32>) {
    let (n, c, h, w) = x.dims();
    let m = (n * h * w) as f64;
    let mut dx = Tensor4::zeros(x.dims());
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for ci in 0..c {
        let (mu, is) = (saved.mean[ci] as f64, saved.inv_std[ci] as f64);
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let xp = x.plane(ni, ci);
            let dp = dy.plane(ni, ci);
            for (&xv, &dv) in xp.iter().zip(dp) {
                let xhat = (xv as f64 - mu) * is;
                sum_dy += dv as f64;
                sum_dy_xhat += dv as f64 * xhat;
            }
        }
        dgamma[ci] = sum_dy_xhat as f32;
        dbeta[ci] = sum_dy as f32;
        let g = gamma[ci] as f64;
        for ni in 0..n {
            let xp = x.plane(ni, ci);
            let dp = dy.plane(ni, ci);
            let ox = dx.plane_mut(ni, ci);
            for ((o, &xv), &dv) in ox.iter_mut().zip(xp).zip(dp) {
                let xhat = (xv as f64 - mu) * is;
                let t = dv as f64 - sum_dy / m - xhat * sum_dy_xhat / m;
                *o = (g * is * t) as f32;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// 2x2 max pooling, stride 2 (floor semantics); returns argmax flat indices
/// into the input plane for the backward routing.
pub fn maxpool2(x: &Tensor4) -> (Tensor4, Vec<u32>) {
    let (n, c, h, w) = x.dims();
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor4::zeros((n, c, oh, ow));
    let mut arg = vec![0u32; n * c * oh * ow];
    for ni in 0..n {
        for ci in 0..c {
            let xp = x.plane(ni, ci);
            let base = (ni * c + ci) * oh * ow;
            let op = out.plane_mut(ni, ci);
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut bi = 0usize;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = (2 * i + di) * w + 2 * j + dj;
                            if xp[idx] > best {
                                best = xp[idx];
                                bi = idx;
                            }
                        }
                    }
                    op[i * ow + j] = best;
                    arg[base + i * ow + j] = bi as u32;
                }
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_back(dy: &Tensor4, arg: &[u32], xdims: (usize, usize, usize, usize)) -> Tensor4 {
    let (n, c, _, _) = xdims;
    let (_, _, oh, ow) = dy.dims();
    let mut dx = Tensor4::zeros(xdims);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * oh * ow;
            let dp = dy.plane(ni, ci);
            let xp = dx.plane_mut(ni, ci);
            for (i, &d) in dp.iter().enumerate() {
                xp[arg[base + i] as usize] += d;
            }
        }
    }
    dx
}

/// Per-sample Gram matrix of the channel-major flattening, scaled by
/// 1/(H W C): out (n, 1, C, C).
pub fn gram(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let hw = h * w;
    let norm = 1.0 / (hw * c) as f64;
    let mut out = Tensor4::zeros((n, 1, c, c));
    for ni in 0..n {
        for c1 in 0..c {
            let p1 = x.plane(ni, c1);
            for c2 in c1..c {
                let p2 = x.plane(ni, c2);
                let mut acc = 0.0f64;
                for (a, b) in p1.iter().zip(p2) {
                    acc += *a as f64 * *b as f64;
                }
                let v = (acc * norm) as f32;
                *out.at_mut(ni, 0, c1, c2) = v;
                *out.at_mut(ni, 0, c2, c1) = v;
            }
        }
    }
    out
}

pub fn gram_back(x: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let hw = h * w;
    let norm = 1.0 / (hw * c) as f32;
    let mut dx = Tensor4::zeros(x.dims());
    for ni in 0..n {
        for c1 in 0..c {
            for c2 in 0..c {
                let g = (dy.at(ni, 0, c1, c2) + dy.at(ni, 0, c2, c1)) * norm;
                if g == 0.0 {
                    continue;
                }
                let src = x.plane(ni, c2).to_vec();
                let dst = dx.plane_mut(ni, c1);
                for (d, s) in dst.iter_mut().zip(&src) {
                    *d += g * s;
                }
            }
        }
    }
    dx
}
