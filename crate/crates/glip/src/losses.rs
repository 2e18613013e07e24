//! The composite training loss: masked L1 over valid and hole regions,
//! perceptual and style distances over a fixed feature extractor, and a
//! total-variation term over the dilated hole region.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::pconv::{update_mask, MaskPlane};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

/// Loss term weights; defaults are the published training values.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub valid: f32,
    pub hole: f32,
    pub perc: f32,
    pub style: f32,
    pub tv: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            valid: 1.0,
            hole: 6.0,
            perc: 0.05,
            style: 120.0,
            tv: 0.1,
        }
    }
}

/// Produces the feature maps that the perceptual and style losses compare.
/// Implementations must be deterministic and are never trained.
pub trait FeatureExtract {
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>>;
}

/// Default extractor: stages of [3x3 conv (fixed seeded weights), ReLU,
/// 2x2 max-pool] with channels 16/32/64. A stand-in for pretrained
/// pooling-layer features; a weight file in checkpoint format can replace
/// the seeded tensors.
pub struct FixedExtractor {
    stages: Vec<(Tensor4, Tensor4)>,
}

pub const EXTRACTOR_CHANNELS: [usize; 3] = [16, 32, 64];
pub const EXTRACTOR_SEED: u64 = 0x61e8_57a1;

impl FixedExtractor {
    /// Deterministic He-scaled normal weights from the given seed.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stages = Vec::new();
        let mut cin = 3usize;
        for &cout in &EXTRACTOR_CHANNELS {
            let std = (2.0 / (cin as f64 * 9.0)).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            let data: Vec<f32> = (0..cout * cin * 9).map(|_| dist.sample(&mut rng) as f32).collect();
            let kernel = Tensor4::from_raw((cout, cin, 3, 3), data);
            let bias = Tensor4::zeros((1, cout, 1, 1));
            stages.push((kernel, bias));
            cin = cout;
        }
        FixedExtractor { stages }
    }

    /// Loads stage weights named `stage{i}.kernel` / `stage{i}.bias` from a
    /// checkpoint file (e.g. exported pretrained pooling features).
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut stages = Vec::new();
        for i in 0.. {
            let (kn, bn) = (format!("stage{i}.kernel"), format!("stage{i}.bias"));
            match (ck.params.get(&kn), ck.params.get(&bn)) {
                (Some(k), Some(b)) => stages.push((k.clone(), b.clone())),
                (None, None) => break,
                _ => return Err(Error::Mismatch(format!("extractor stage {i} incomplete"))),
            }
        }
        if stages.is_empty() {
            return Err(Error::Mismatch("no extractor stages in checkpoint".into()));
        }
        Ok(FixedExtractor { stages })
    }
}

impl Default for FixedExtractor {
    fn default() -> Self {
        Self::seeded(EXTRACTOR_SEED)
    }
}

impl FeatureExtract for FixedExtractor {
    fn features(&self, tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        let mut out = Vec::with_capacity(self.stages.len());
        let mut cur = x;
        for (k, b) in &self.stages {
            let kv = tape.leaf(k.clone(), false)?;
            let bv = tape.leaf(b.clone(), false)?;
            let y = tape.conv2d(cur, kv, bv, 1, 1)?;
            let y = tape.relu(y)?;
            let y = tape.maxpool2(y)?;
            out.push(y);
            cur = y;
        }
        Ok(out)
    }
}

/// Trivial extractor whose single "feature map" is the image itself.
/// Makes the loss formulas hand-computable in tests.
pub struct IdentityExtractor;

impl FeatureExtract for IdentityExtractor {
    fn features(&self, _tape: &mut Tape, x: Var) -> Result<Vec<Var>> {
        Ok(vec![x])
    }
}

/// Mean absolute difference over all elements.
pub fn mean_abs_diff(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.sub(a, b)?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Sum over stages of the mean absolute feature difference.
pub fn perceptual_loss(tape: &mut Tape, out: Var, gt: Var, fx: &dyn FeatureExtract) -> Result<Var> {
    let fo = fx.features(tape, out)?;
    let fg = fx.features(tape, gt)?;
    let mut total: Option<Var> = None;
    for (o, g) in fo.into_iter().zip(fg) {
        let term = mean_abs_diff(tape, o, g)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Invalid("feature extractor produced no stages".into()))
}

/// Sum over stages of |Gram(gt) - Gram(out)|_1 / C^2, Gram scaled by
/// 1/(H W C); batch entries averaged.
pub fn style_loss(tape: &mut Tape, out: Var, gt: Var, fx: &dyn FeatureExtract) -> Result<Var> {
    let fo = fx.features(tape, out)?;
    let fg = fx.features(tape, gt)?;
    let mut total: Option<Var> = None;
    for (o, g) in fo.into_iter().zip(fg) {
        let (n, c, _, _) = tape.dims(o);
        let go = tape.gram(o)?;
        let gg = tape.gram(g)?;
        let d = tape.sub(gg, go)?;
        let d = tape.abs(d)?;
        let s = tape.sum(d)?;
        let term = tape.scale(s, 1.0 / (c * c * n) as f32)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Invalid("feature extractor produced no stages".into()))
}

/// The total-variation region: the hole dilated by one pixel.
pub fn tv_region_of(m_gt: &MaskPlane) -> MaskPlane {
    update_mask(&m_gt.invert(), 3, 3, 1, 1).expect("same-dims dilation cannot fail")
}

/// Mean absolute neighbor difference over pairs inside the dilated hole
/// region, normalized by the image element count.
pub fn tv_loss(tape: &mut Tape, out: Var, m_gt: &MaskPlane) -> Result<Var> {
    let region = tv_region_of(m_gt);
    tape.tv_region(out, &region.to_f32())
}

/// L1 over the undamaged region (mask 1 = valid), mean over all elements.
pub fn valid_loss(tape: &mut Tape, out: Var, gt: Var, m_gt: &MaskPlane) -> Result<Var> {
    let d = tape.sub(out, gt)?;
    let d = tape.mask_mul(d, &m_gt.to_f32())?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// L1 over the filled region, mean over all elements.
pub fn hole_loss(tape: &mut Tape, out: Var, gt: Var, m_gt: &MaskPlane) -> Result<Var> {
    let d = tape.sub(out, gt)?;
    let d = tape.mask_mul(d, &m_gt.invert().to_f32())?;
    let d = tape.abs(d)?;
    tape.mean(d)
}

/// Weighted sum of five scalar terms, in (valid, hole, perc, style, tv) order.
pub fn combine_terms(tape: &mut Tape, terms: [Var; 5], lw: &LossWeights) -> Result<Var> {
    let ws = [lw.valid, lw.hole, lw.perc, lw.style, lw.tv];
    let mut total: Option<Var> = None;
    for (t, w) in terms.into_iter().zip(ws) {
        let s = tape.scale(t, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.unwrap())
}

/// Snapshot of the individual term values for logging.
#[derive(Clone, Copy, Debug, Default, serde::Serialize)]
pub struct LossTerms {
    pub valid: f32,
    pub hole: f32,
    pub perc: f32,
    pub style: f32,
    pub tv: f32,
    pub total: f32,
}

/// Builds the full composite loss on the tape and returns its var together
/// with the per-term values.
pub fn composite_loss(
    tape: &mut Tape,
    out: Var,
    gt: Var,
    m_gt: &MaskPlane,
    fx: &dyn FeatureExtract,
    lw: &LossWeights,
) -> Result<(Var, LossTerms)> {
    let v = valid_loss(tape, out, gt, m_gt)?;
    let h = hole_loss(tape, out, gt, m_gt)?;
    let p = perceptual_loss(tape, out, gt, fx)?;
    let s = style_loss(tape, out, gt, fx)?;
    let t = tv_loss(tape, out, m_gt)?;
    let total = combine_terms(tape, [v, h, p, s, t], lw)?;
    let val = |tape: &Tape, v: Var| tape.value(v).data()[0];
    let terms = LossTerms {
        valid: val(tape, v),
        hole: val(tape, h),
        perc: val(tape, p),
        style: val(tape, s),
        tv: val(tape, t),
        total: val(tape, total),
    };
    Ok((total, terms))
}
