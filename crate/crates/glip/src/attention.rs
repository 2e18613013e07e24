//! Feature attention: cosine-similarity scores between every pair of
//! locations, a spatial softmax per query, and reconstruction of the feature
//! map by blending 3x3 feature patches (reflect padded, overlap normalized)
//! with the scores as deconvolutional stencils.
//!
//! Score layout: (n, H*W, H, W) — channel = flattened query location (i, j),
//! spatial = source location (i', j'). Every softmaxed slice sums to 1.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::reflect;
use crate::tensor::Tensor4;

pub const NORM_EPS: f32 = 1e-8;

/// Softmax-normalized attention scores for one sample.
#[derive(Clone, Debug)]
pub struct AttentionScores {
    pub h: usize,
    pub w: usize,
    /// (1, H*W, H, W), each channel slice sums to 1.
    pub scores: Tensor4,
}

/// Raw cosine-similarity scores for a single-sample feature volume:
/// z[u, p] = <f_u / ||f_u||, f_p / ||f_p||>, zero-norm vectors treated as 0.
pub fn cosine_scores(f: &Tensor4) -> Result<Tensor4> {
    if f.n() != 1 {
        return Err(Error::Invalid("cosine_scores expects a single-sample tensor".into()));
    }
    let (y, _r) = loc_normalize_fwd(f);
    Ok(pairwise_dot_fwd(&y))
}

/// Softmax across each query's H x W score map, stabilized by max subtraction.
pub fn attention_scores(raw: &Tensor4) -> Result<AttentionScores> {
    let (n, l, h, w) = raw.dims();
    if n != 1 || l != h * w {
        return Err(Error::Shape(format!(
            "raw scores dims {:?} are not (1, H*W, H, W)",
            raw.dims()
        )));
    }
    raw.check_finite("attention_scores")?;
    Ok(AttentionScores {
        h,
        w,
        scores: softmax_slices_fwd(raw),
    })
}

/// Reconstructs a feature map as a score-weighted blend of 3x3 input patches.
pub fn attend_reconstruct(f: &Tensor4, s: &AttentionScores) -> Result<Tensor4> {
    let (n, _c, h, w) = f.dims();
    if n != 1 || h != s.h || w != s.w {
        return Err(Error::Shape("attend_reconstruct dims mismatch".into()));
    }
    Ok(patch_blend_fwd(f, &s.scores))
}

// ---- kernels (shared with the tape ops) -------------------------------------

/// Per-location L2 normalization: y[., u] = x[., u] / max(||x[., u]||, eps).
/// Returns the raw norms for the backward pass.
pub(crate) fn loc_normalize_fwd(x: &Tensor4) -> (Tensor4, Vec<f32>) {
    let (n, c, h, w) = x.dims();
    let hw = h * w;
    let mut norms = vec![0.0f32; n * hw];
    let mut y = x.clone();
    for ni in 0..n {
        for u in 0..hw {
            let mut acc = 0.0f64;
            for ci in 0..c {
                let v = x.data()[(ni * c + ci) * hw + u];
                acc += v as f64 * v as f64;
            }
            let r = (acc.sqrt()) as f32;
            norms[ni * hw + u] = r;
            let scale = 1.0 / r.max(NORM_EPS);
            for ci in 0..c {
                y.data_mut()[(ni * c + ci) * hw + u] *= scale;
            }
        }
    }
    (y, norms)
}

pub(crate) fn loc_normalize_bwd(y: &Tensor4, norms: &[f32], dy: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = y.dims();
    let hw = h * w;
    let mut dx = Tensor4::zeros(y.dims());
    for ni in 0..n {
        for u in 0..hw {
            let r = norms[ni * hw + u];
            if r > NORM_EPS {
                let mut d = 0.0f64;
                for ci in 0..c {
                    let i = (ni * c + ci) * hw + u;
                    d += dy.data()[i] as f64 * y.data()[i] as f64;
                }
                let d = d as f32;
                for ci in 0..c {
                    let i = (ni * c + ci) * hw + u;
                    dx.data_mut()[i] = (dy.data()[i] - y.data()[i] * d) / r;
                }
            } else {
                // clamped region: y = x / eps is linear
                for ci in 0..c {
                    let i = (ni * c + ci) * hw + u;
                    dx.data_mut()[i] = dy.data()[i] / NORM_EPS;
                }
            }
        }
    }
    dx
}

/// Location-major copy (L x C) of a channel-major feature volume sample.
fn loc_major(x: &Tensor4, ni: usize) -> Vec<f32> {
    let (_, c, h, w) = x.dims();
    let hw = h * w;
    let mut out = vec![0.0f32; hw * c];
    for ci in 0..c {
        let p = x.plane(ni, ci);
        for (u, &v) in p.iter().enumerate() {
            out[u * c + ci] = v;
        }
    }
    out
}

/// All-pairs dot products: S[u, p] = <x[., u], x[., p]> per sample.
pub(crate) fn pairwise_dot_fwd(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let hw = h * w;
    let mut out = Tensor4::zeros((n, hw, h, w));
    for ni in 0..n {
        let xl = loc_major(x, ni);
        let base = ni * hw * hw;
        let data = out.data_mut();
        let sample = &mut data[base..base + hw * hw];
        sample.par_chunks_mut(hw).enumerate().for_each(|(u, row)| {
            let xu = &xl[u * c..u * c + c];
            for (p, r) in row.iter_mut().enumerate() {
                let xp = &xl[p * c..p * c + c];
                let mut acc = 0.0f32;
                for (a, b) in xu.iter().zip(xp) {
                    acc += a * b;
                }
                *r = acc;
            }
        });
    }
    out
}

pub(crate) fn pairwise_dot_bwd(x: &Tensor4, ds: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let hw = h * w;
    let mut dx = Tensor4::zeros(x.dims());
    for ni in 0..n {
        let xl = loc_major(x, ni);
        let sbase = ni * hw * hw;
        let s = &ds.data()[sbase..sbase + hw * hw];
        // dX_l[u] = sum_p (dS[u,p] + dS[p,u]) x_l[p]
        let mut dxl = vec![0.0f32; hw * c];
        dxl.par_chunks_mut(c).enumerate().for_each(|(u, row)| {
            for p in 0..hw {
                let g = s[u * hw + p] + s[p * hw + u];
                if g == 0.0 {
                    continue;
                }
                let xp = &xl[p * c..p * c + c];
                for (r, v) in row.iter_mut().zip(xp) {
                    *r += g * v;
                }
            }
        });
        for ci in 0..c {
            let plane = dx.plane_mut(ni, ci);
            for (u, o) in plane.iter_mut().enumerate() {
                *o = dxl[u * c + ci];
            }
        }
    }
    dx
}

/// Softmax over the (h, w) slice of every (n, channel), max-stabilized.
pub(crate) fn softmax_slices_fwd(z: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = z.dims();
    let hw = h * w;
    let mut out = z.clone();
    out.data_mut().par_chunks_mut(hw).for_each(|slice| {
        let m = slice.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0f64;
        for v in slice.iter_mut() {
            *v = (*v - m).exp();
            denom += *v as f64;
        }
        let inv = (1.0 / denom) as f32;
        for v in slice.iter_mut() {
            *v *= inv;
        }
    });
    let _ = (n, c);
    out
}

pub(crate) fn softmax_slices_bwd(y: &Tensor4, dy: &Tensor4) -> Tensor4 {
    let (_, _, h, w) = y.dims();
    let hw = h * w;
    let mut dz = dy.clone();
    let yd = y.data();
    dz.data_mut()
        .par_chunks_mut(hw)
        .enumerate()
        .for_each(|(si, slice)| {
            let ys = &yd[si * hw..si * hw + hw];
            let mut inner = 0.0f64;
            for (d, &yv) in slice.iter().zip(ys) {
                inner += *d as f64 * yv as f64;
            }
            let inner = inner as f32;
            for (d, &yv) in slice.iter_mut().zip(ys) {
                *d = (*d - inner) * yv;
            }
        });
    dz
}

/// Extracts reflect-padded 3x3 patches: P (L x 9C), row p holds
/// [c0 d0..d8, c1 d0..d8, ...].
fn extract_patches(f: &Tensor4, ni: usize) -> Vec<f32> {
    let (_, c, h, w) = f.dims();
    let hw = h * w;
    let pl = 9 * c;
    let mut out = vec![0.0f32; hw * pl];
    for pi in 0..h {
        for pj in 0..w {
            let p = pi * w + pj;
            for ci in 0..c {
                let plane = f.plane(ni, ci);
                for di in 0..3usize {
                    let ii = reflect(pi as isize + di as isize - 1, h);
                    for dj in 0..3usize {
                        let jj = reflect(pj as isize + dj as isize - 1, w);
                        out[p * pl + ci * 9 + di * 3 + dj] = plane[ii * w + jj];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of patch extraction: scatters patch gradients back through the
/// reflected indices.
fn scatter_patches(dp: &[f32], df: &mut Tensor4, ni: usize) {
    let (_, c, h, w) = df.dims();
    let pl = 9 * c;
    for pi in 0..h {
        for pj in 0..w {
            let p = pi * w + pj;
            for ci in 0..c {
                let plane = df.plane_mut(ni, ci);
                for di in 0..3usize {
                    let ii = reflect(pi as isize + di as isize - 1, h);
                    for dj in 0..3usize {
                        let jj = reflect(pj as isize + dj as isize - 1, w);
                        plane[ii * w + jj] += dp[p * pl + ci * 9 + di * 3 + dj];
                    }
                }
            }
        }
    }
}

/// Number of in-image 3x3 stamps covering each position.
fn overlap_counts(h: usize, w: usize) -> Vec<f32> {
    let mut cnt = vec![0.0f32; h * w];
    for i in 0..h {
        for j in 0..w {
            let ni = 1 + usize::from(i > 0) + usize::from(i + 1 < h);
            let nj = 1 + usize::from(j > 0) + usize::from(j + 1 < w);
            cnt[i * w + j] = (ni * nj) as f32;
        }
    }
    cnt
}

/// Blends per-query patches B[u] = sum_p s[u,p] P[p], stamps B[u] around u,
/// and normalizes by the overlap count.
pub(crate) fn patch_blend_fwd(f: &Tensor4, s: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = f.dims();
    let hw = h * w;
    let pl = 9 * c;
    let cnt = overlap_counts(h, w);
    let mut out = Tensor4::zeros(f.dims());
    for ni in 0..n {
        let patches = extract_patches(f, ni);
        let srow = &s.data()[ni * hw * hw..(ni + 1) * hw * hw];
        let mut blended = vec![0.0f32; hw * pl];
        blended.par_chunks_mut(pl).enumerate().for_each(|(u, b)| {
            for p in 0..hw {
                let sv = srow[u * hw + p];
                if sv == 0.0 {
                    continue;
                }
                let pr = &patches[p * pl..p * pl + pl];
                for (bv, pv) in b.iter_mut().zip(pr) {
                    *bv += sv * pv;
                }
            }
        });
        // stamp each blended patch around its query location
        for u in 0..hw {
            let (ui, uj) = (u / w, u % w);
            let b = &blended[u * pl..u * pl + pl];
            for ci in 0..c {
                let plane = out.plane_mut(ni, ci);
                for di in 0..3usize {
                    let vi = ui as isize + di as isize - 1;
                    if vi < 0 || vi >= h as isize {
                        continue;
                    }
                    for dj in 0..3usize {
                        let vj = uj as isize + dj as isize - 1;
                        if vj < 0 || vj >= w as isize {
                            continue;
                        }
                        plane[vi as usize * w + vj as usize] += b[ci * 9 + di * 3 + dj];
                    }
                }
            }
        }
        for ci in 0..c {
            let plane = out.plane_mut(ni, ci);
            for (v, k) in plane.iter_mut().zip(&cnt) {
                *v /= k;
            }
        }
    }
    out
}

/// Backward of `patch_blend_fwd` w.r.t. both the feature map (through the
/// patches) and the scores.
pub(crate) fn patch_blend_bwd(f: &Tensor4, s: &Tensor4, dout: &Tensor4) -> (Tensor4, Tensor4) {
    let (n, c, h, w) = f.dims();
    let hw = h * w;
    let pl = 9 * c;
    let cnt = overlap_counts(h, w);
    let mut df = Tensor4::zeros(f.dims());
    let mut ds = Tensor4::zeros(s.dims());
    for ni in 0..n {
        let patches = extract_patches(f, ni);
        let srow = &s.data()[ni * hw * hw..(ni + 1) * hw * hw];
        // dacc = dout / cnt, gathered per query stamp: dB[u][c,d] = dacc[c][u+d]
        let mut dacc = vec![0.0f32; c * hw];
        for ci in 0..c {
            let p = dout.plane(ni, ci);
            for (i, (&d, k)) in p.iter().zip(&cnt).enumerate() {
                dacc[ci * hw + i] = d / k;
            }
        }
        let mut db = vec![0.0f32; hw * pl];
        db.par_chunks_mut(pl).enumerate().for_each(|(u, b)| {
            let (ui, uj) = (u / w, u % w);
            for ci in 0..c {
                for di in 0..3usize {
                    let vi = ui as isize + di as isize - 1;
                    if vi < 0 || vi >= h as isize {
                        continue;
                    }
                    for dj in 0..3usize {
                        let vj = uj as isize + dj as isize - 1;
                        if vj < 0 || vj >= w as isize {
                            continue;
                        }
                        b[ci * 9 + di * 3 + dj] = dacc[ci * hw + vi as usize * w + vj as usize];
                    }
                }
            }
        });
        // dS[u,p] = <dB[u], P[p]>
        {
            let dsd = ds.data_mut();
            let srow_out = &mut dsd[ni * hw * hw..(ni + 1) * hw * hw];
            srow_out.par_chunks_mut(hw).enumerate().for_each(|(u, row)| {
                let bu = &db[u * pl..u * pl + pl];
                for (p, r) in row.iter_mut().enumerate() {
                    let pp = &patches[p * pl..p * pl + pl];
                    let mut acc = 0.0f32;
                    for (a, b) in bu.iter().zip(pp) {
                        acc += a * b;
                    }
                    *r = acc;
                }
            });
        }
        // dP[p] = sum_u s[u,p] dB[u], then scatter back through reflection
        let mut dp = vec![0.0f32; hw * pl];
        dp.par_chunks_mut(pl).enumerate().for_each(|(p, row)| {
            for u in 0..hw {
                let sv = srow[u * hw + p];
                if sv == 0.0 {
                    continue;
                }
                let bu = &db[u * pl..u * pl + pl];
                for (r, b) in row.iter_mut().zip(bu) {
                    *r += sv * b;
                }
            }
        });
        scatter_patches(&dp, &mut df, ni);
    }
    (df, ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{dot, rng_tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scores_for(h: usize, w: usize, pick: impl Fn(usize) -> usize) -> AttentionScores {
        let hw = h * w;
        let mut data = vec![0.0f32; hw * hw];
        for u in 0..hw {
            data[u * hw + pick(u)] = 1.0;
        }
        AttentionScores {
            h,
            w,
            scores: Tensor4::new((1, hw, h, w), data).unwrap(),
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let f = rng_tensor(&mut rng, (1, 4, 4, 4));
        let raw = cosine_scores(&f).unwrap();
        let hw = 16;
        for u in 0..hw {
            let v = raw.data()[u * hw + u];
            assert!((v - 1.0).abs() < 1e-5, "self score {v}");
            // self-score maximality
            for p in 0..hw {
                assert!(raw.data()[u * hw + u] >= raw.data()[u * hw + p] - 1e-6);
            }
        }
    }

    #[test]
    fn orthogonal_and_antipodal_vectors() {
        // two locations: f0 = e0, f1 = e1 (orthogonal), f2 = -f0
        let mut f = Tensor4::zeros((1, 2, 1, 3));
        *f.at_mut(0, 0, 0, 0) = 1.0;
        *f.at_mut(0, 1, 0, 1) = 1.0;
        *f.at_mut(0, 0, 0, 2) = -1.0;
        let raw = cosine_scores(&f).unwrap();
        let l = 3;
        assert!((raw.data()[l] - 0.0).abs() < 1e-6); // z(0,1)
        assert!((raw.data()[2] + 1.0).abs() < 1e-6); // z(0,2)
    }

    #[test]
    fn zero_vector_scores_zero() {
        let mut f = Tensor4::zeros((1, 2, 1, 2));
        *f.at_mut(0, 0, 0, 1) = 3.0;
        let raw = cosine_scores(&f).unwrap();
        // location 0 is the zero vector: its scores against everything are 0
        assert_eq!(raw.data()[0], 0.0);
        assert_eq!(raw.data()[1], 0.0);
    }

    #[test]
    fn softmax_slices_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let raw = rng_tensor(&mut rng, (1, 12, 3, 4));
        let s = attention_scores(&raw).unwrap();
        for u in 0..12 {
            let sum: f64 = s.scores.plane(0, u).iter().map(|&v| v as f64).sum();
            assert!((sum - 1.0).abs() < 1e-6, "slice {u} sums to {sum}");
        }
    }

    #[test]
    fn uniform_slice_gives_uniform_softmax() {
        let raw = Tensor4::zeros((1, 4, 2, 2));
        let s = attention_scores(&raw).unwrap();
        for &v in s.scores.data() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn dominant_entry_saturates() {
        let mut raw = Tensor4::zeros((1, 4, 2, 2));
        *raw.at_mut(0, 0, 1, 1) = 50.0;
        let s = attention_scores(&raw).unwrap();
        assert!((s.scores.at(0, 0, 1, 1) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn identity_scores_reproduce_any_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let f = rng_tensor(&mut rng, (1, 3, 4, 5));
        let s = scores_for(4, 5, |u| u);
        let y = attend_reconstruct(&f, &s).unwrap();
        let diff = y.zip(&f, |a, b| (a - b).abs()).unwrap().max_abs();
        assert!(diff < 1e-5, "identity blend diff {diff}");
    }

    #[test]
    fn constant_input_stays_constant_under_any_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let f = Tensor4::filled((1, 2, 4, 4), 0.37);
        let raw = rng_tensor(&mut rng, (1, 16, 4, 4));
        let s = attention_scores(&raw).unwrap();
        let y = attend_reconstruct(&f, &s).unwrap();
        for &v in y.data() {
            assert!((v - 0.37).abs() < 1e-5);
        }
    }

    #[test]
    fn one_hot_copy_on_2x2_toy() {
        // every query attends to location (0,0); constant patches make the
        // expected output the (0,0) patch value everywhere
        let f = Tensor4::new((1, 1, 2, 2), vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let s = scores_for(2, 2, |_| 0);
        let y = attend_reconstruct(&f, &s).unwrap();
        for &v in y.data() {
            assert!((v - 5.0).abs() < 1e-6);
        }
        // brute-force scatter oracle on a non-constant map
        let f = Tensor4::new((1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = attend_reconstruct(&f, &s).unwrap();
        let oracle = {
            // all queries blend patch of (0,0): reflect-padded 3x3 around (0,0)
            let mut patch = [0.0f32; 9];
            for di in 0..3isize {
                for dj in 0..3isize {
                    let ii = reflect(di - 1, 2);
                    let jj = reflect(dj - 1, 2);
                    patch[(di * 3 + dj) as usize] = f.at(0, 0, ii, jj);
                }
            }
            let mut acc = vec![0.0f32; 4];
            let mut cnt = vec![0.0f32; 4];
            for u in 0..4usize {
                let (ui, uj) = (u / 2, u % 2);
                for di in 0..3isize {
                    for dj in 0..3isize {
                        let vi = ui as isize + di - 1;
                        let vj = uj as isize + dj - 1;
                        if (0..2).contains(&vi) && (0..2).contains(&vj) {
                            acc[(vi * 2 + vj) as usize] += patch[(di * 3 + dj) as usize];
                            cnt[(vi * 2 + vj) as usize] += 0.0;
                        }
                    }
                }
            }
            // overlap counts on a 2x2 grid are all 4
            for (a, _c) in acc.iter_mut().zip(&cnt) {
                *a /= 4.0;
            }
            acc
        };
        for (got, want) in y.data().iter().zip(&oracle) {
            assert!((got - want).abs() < 1e-5, "{got} vs {want}");
        }
    }

    #[test]
    fn convexity_of_blend() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let f = rng_tensor(&mut rng, (1, 1, 5, 5));
        let raw = rng_tensor(&mut rng, (1, 25, 5, 5));
        let s = attention_scores(&raw).unwrap();
        let y = attend_reconstruct(&f, &s).unwrap();
        let lo = f.data().iter().cloned().fold(f32::INFINITY, f32::min);
        let hi = f.data().iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        for &v in y.data() {
            assert!(v >= lo - 1e-5 && v <= hi + 1e-5, "{v} outside [{lo}, {hi}]");
        }
    }

    #[test]
    fn patch_blend_adjointness_in_features() {
        // linearity check: <blend(f, s), g> == <f, df> where df is the
        // backward of g (constant scores make blend linear in f)
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let f = rng_tensor(&mut rng, (1, 2, 4, 4));
        let raw = rng_tensor(&mut rng, (1, 16, 4, 4));
        let s = softmax_slices_fwd(&raw);
        let g = rng_tensor(&mut rng, (1, 2, 4, 4));
        let y = patch_blend_fwd(&f, &s);
        let (df, _ds) = patch_blend_bwd(&f, &s, &g);
        let lhs = dot(y.data(), g.data());
        let rhs = dot(f.data(), df.data());
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
