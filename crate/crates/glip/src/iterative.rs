//! Stage 2: two parallel branches (low/high frequency), each two partial
//! convolutions with batch norm and leaky ReLU followed by feature attention,
//! applied recurrently for T iterations with a shared mask stream. The
//! per-iteration outputs concatenate into F_cat, which a fusing convolution
//! turns into F_int (addressable as T sub-volumes).

use crate::error::{Error, Result};
use crate::pconv::{update_mask, MaskPlane};
use crate::tape::{ConvVars, Tape, Var};

pub const LEAKY_SLOPE: f32 = 0.2;

/// One branch's weights: two resolution-preserving partial convolutions with
/// their batch-norm affines.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub pconv1: ConvVars,
    pub bn1: (Var, Var),
    pub pconv2: ConvVars,
    pub bn2: (Var, Var),
}

/// Rolling state of the iterative stage.
pub struct IterState {
    pub f_low: Var,
    pub f_high: Var,
    pub mask: MaskPlane,
    pub tau: usize,
}

fn branch(tape: &mut Tape, x: Var, m0: &MaskPlane, m1: &MaskPlane, w: &BranchVars) -> Result<Var> {
    let y = tape.partial_conv(x, m0, w.pconv1.kernel, w.pconv1.bias, w.pconv1.stride, w.pconv1.padding)?;
    let y = tape.batch_norm(y, w.bn1.0, w.bn1.1)?;
    let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
    let y = tape.partial_conv(y, m1, w.pconv2.kernel, w.pconv2.bias, w.pconv2.stride, w.pconv2.padding)?;
    let y = tape.batch_norm(y, w.bn2.0, w.bn2.1)?;
    let y = tape.leaky_relu(y, LEAKY_SLOPE)?;
    tape.attention(y)
}

/// One iteration: both branches consume the same mask, each partial
/// convolution advances it by one update (two updates per iteration).
pub fn iterate_once(tape: &mut Tape, s: &IterState, w_low: &BranchVars, w_high: &BranchVars) -> Result<IterState> {
    let m0 = &s.mask;
    let k = (w_low.pconv1.stride, w_low.pconv1.padding);
    let (kh, kw) = {
        let kd = tape.dims(w_low.pconv1.kernel);
        (kd.2, kd.3)
    };
    let m1 = update_mask(m0, kh, kw, k.0, k.1)?;
    let m2 = update_mask(&m1, kh, kw, k.0, k.1)?;
    let f_low = branch(tape, s.f_low, m0, &m1, w_low)?;
    let f_high = branch(tape, s.f_high, m0, &m1, w_high)?;
    Ok(IterState {
        f_low,
        f_high,
        mask: m2,
        tau: s.tau + 1,
    })
}

/// Runs T iterations (T >= 2) and concatenates every iteration's pair
/// [low; high] into F_cat. Returns the mask history H(0)..H(T).
pub fn run_iterations(
    tape: &mut Tape,
    f_low0: Var,
    f_high0: Var,
    h0: &MaskPlane,
    t_iters: usize,
    w_low: &BranchVars,
    w_high: &BranchVars,
) -> Result<(Var, Vec<MaskPlane>)> {
    if t_iters < 2 {
        return Err(Error::Invalid(format!(
            "iteration count {t_iters} < 2: the enhancement stage needs neighbors"
        )));
    }
    let mut state = IterState {
        f_low: f_low0,
        f_high: f_high0,
        mask: h0.clone(),
        tau: 0,
    };
    let mut history = vec![h0.clone()];
    let mut parts = Vec::with_capacity(2 * t_iters);
    for _ in 0..t_iters {
        state = iterate_once(tape, &state, w_low, w_high)?;
        history.push(state.mask.clone());
        parts.push(state.f_low);
        parts.push(state.f_high);
    }
    let f_cat = tape.concat(&parts)?;
    Ok((f_cat, history))
}

/// Fusing convolution (3x3, channel-preserving) with leaky ReLU. The output
/// keeps 2 T C channels and is addressable as T sub-volumes of 2 C each.
pub fn fuse(tape: &mut Tape, f_cat: Var, w: &ConvVars) -> Result<Var> {
    let y = w.apply(tape, f_cat)?;
    tape.leaky_relu(y, LEAKY_SLOPE)
}

/// Sub-volume tau (1-based) of the fused volume: channels [(tau-1) 2C, tau 2C).
pub fn subvolume(tape: &mut Tape, f_int: Var, tau: usize, c_sub: usize) -> Result<Var> {
    tape.slice_channels(f_int, (tau - 1) * c_sub, tau * c_sub)
}
