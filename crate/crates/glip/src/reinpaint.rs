//! Stage 3: reinpainting enhancement of the fused sub-volumes using
//! neighboring iterations gated by mask fronts, fill-weighted feature
//! merging, and the reconstruction head that brings the working-resolution
//! volume back to a full-resolution image.

use crate::error::{Error, Result};
use crate::iterative::LEAKY_SLOPE;
use crate::pconv::{update_mask, MaskPlane};
use crate::tape::{ConvVars, Tape, Var};
use crate::tensor::Tensor4;

/// Three-convolution enhancement branches: branch 1 consumes the
/// (prev, cur, next) concatenation, branch 2 the (cur, next) one.
#[derive(Clone, Copy, Debug)]
pub struct ReinpaintVars {
    pub b1: [ConvVars; 3],
    pub b2: [ConvVars; 3],
}

/// A conv-bn-relu-conv block with identity skip.
#[derive(Clone, Copy, Debug)]
pub struct ResBlockVars {
    pub conv1: ConvVars,
    pub bn: (Var, Var),
    pub conv2: ConvVars,
}

/// Reconstruction head: three upsample+partial-conv+bn+leaky blocks, three
/// residual blocks, then three head convolutions into a sigmoid image.
pub struct ReconstructVars {
    pub ups: Vec<(ConvVars, (Var, Var))>,
    pub res: Vec<ResBlockVars>,
    pub head: Vec<ConvVars>,
}

fn conv_relu_chain(tape: &mut Tape, x: Var, convs: &[ConvVars; 3]) -> Result<Var> {
    let mut y = x;
    for c in convs {
        y = c.apply(tape, y)?;
        y = tape.relu(y)?;
    }
    Ok(y)
}

/// Enhances sub-volume tau (1 <= tau <= T-1). Branch 1 blends
/// (prev, cur, next) and is gated by the mask of iteration tau-1; branch 2
/// blends (cur, next) and is gated by the newly filled band
/// H(tau) - H(tau-1). Both add residually onto the current sub-volume.
/// `prev` is None at tau = 1 (void slot, treated as zeros).
pub fn reinpaint_step(
    tape: &mut Tape,
    prev: Option<Var>,
    cur: Var,
    next: Var,
    h_prev: &MaskPlane,
    h_cur: &MaskPlane,
    w: &ReinpaintVars,
) -> Result<Var> {
    let prev = match prev {
        Some(p) => p,
        None => tape.leaf(Tensor4::zeros(tape.dims(cur)), false)?,
    };
    if tape.dims(prev) != tape.dims(cur) || tape.dims(next) != tape.dims(cur) {
        return Err(Error::Shape("reinpaint_step sub-volume dims differ".into()));
    }
    let b1_in = tape.concat(&[prev, cur, next])?;
    let b1 = conv_relu_chain(tape, b1_in, &w.b1)?;
    let b1 = tape.mask_mul(b1, &h_prev.to_f32())?;

    let b2_in = tape.concat(&[cur, next])?;
    let b2 = conv_relu_chain(tape, b2_in, &w.b2)?;
    let band = h_cur.diff(h_prev);
    let b2 = tape.mask_mul(b2, &band.to_f32())?;

    let s = tape.add(b1, b2)?;
    tape.add(s, cur)
}

/// Fill-weighted merge of the enhanced sub-volumes: each position averages
/// the iterations in which it was already valid; never-valid positions take
/// the last sub-volume.
pub fn feature_merge(tape: &mut Tape, f_reinp: &[Var], mask_history: &[MaskPlane]) -> Result<Var> {
    if mask_history.len() != f_reinp.len() + 1 {
        return Err(Error::Invalid(format!(
            "feature_merge wants H(0)..H(T) for T={} volumes, got {} masks",
            f_reinp.len(),
            mask_history.len()
        )));
    }
    let planes: Vec<Vec<f32>> = mask_history[1..].iter().map(|m| m.to_f32()).collect();
    tape.merge_weighted(f_reinp, &planes)
}

/// Reconstruction: three [x2 nearest upsample, partial conv with the mask
/// upsampled alongside (then updated), batch norm, leaky ReLU] blocks, three
/// residual blocks, head convolutions with a final sigmoid into [0, 1].
pub fn reconstruct(tape: &mut Tape, f_merged: Var, mask: &MaskPlane, w: &ReconstructVars) -> Result<Var> {
    if w.ups.len() != 3 || w.res.len() != 3 || w.head.len() != 3 {
        return Err(Error::Invalid("reconstruction head wants 3 blocks of each kind".into()));
    }
    let mut x = f_merged;
    let mut m = mask.clone();
    for (pc, bn) in &w.ups {
        x = tape.upsample_nearest(x, 2)?;
        m = m.upsample_nearest(2);
        x = tape.partial_conv(x, &m, pc.kernel, pc.bias, pc.stride, pc.padding)?;
        let kd = tape.dims(pc.kernel);
        m = update_mask(&m, kd.2, kd.3, pc.stride, pc.padding)?;
        x = tape.batch_norm(x, bn.0, bn.1)?;
        x = tape.leaky_relu(x, LEAKY_SLOPE)?;
    }
    for rb in &w.res {
        let r = rb.conv1.apply(tape, x)?;
        let r = tape.batch_norm(r, rb.bn.0, rb.bn.1)?;
        let r = tape.relu(r)?;
        let r = rb.conv2.apply(tape, r)?;
        x = tape.add(x, r)?;
    }
    x = w.head[0].apply(tape, x)?;
    x = tape.relu(x)?;
    x = w.head[1].apply(tape, x)?;
    x = tape.relu(x)?;
    x = w.head[2].apply(tape, x)?;
    tape.sigmoid(x)
}

/// Pastes the known region over the prediction:
/// I_comp = M (x) I_in + (1 - M) (x) I_out.
pub fn composite(i_out: &Tensor4, i_in: &Tensor4, m: &MaskPlane) -> Result<Tensor4> {
    if !i_out.same_dims(i_in) {
        return Err(Error::Shape("composite dims differ".into()));
    }
    let (n, c, h, w) = i_in.dims();
    if (m.h(), m.w()) != (h, w) {
        return Err(Error::Shape("composite mask dims differ".into()));
    }
    let mut out = i_out.clone();
    for ni in 0..n {
        for ci in 0..c {
            let src = i_in.plane(ni, ci);
            let dst = out.plane_mut(ni, ci);
            for (i, (d, s)) in dst.iter_mut().zip(src).enumerate() {
                if m.bits()[i] == 1 {
                    *d = *s;
                }
            }
        }
    }
    Ok(out)
}
