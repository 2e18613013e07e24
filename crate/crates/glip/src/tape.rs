//! Wengert-style tape: forward ops are recorded in order, then replayed in
//! reverse to accumulate gradients. One backward pass per recorded graph;
//! re-running backward without re-recording is an error.
//!
//! Every public op validates shapes up front and checks its output for
//! non-finite values, so NaN/Inf surface as errors at the op that produced
//! them instead of propagating.

use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention;
use crate::error::{Error, Result};
use crate::ops::{self, BnSaved, PconvAux};
use crate::pconv::MaskPlane;
use crate::tensor::Tensor4;

static TAPE_IDS: AtomicU32 = AtomicU32::new(1);

/// Handle to a tensor recorded on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    node: u32,
    tape: u32,
}

/// A convolution's parameters bound to a tape, plus its geometry.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
    pub stride: usize,
    pub padding: usize,
}

impl ConvVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.conv2d(x, self.kernel, self.bias, self.stride, self.padding)
    }
}

enum Op {
    Conv2d { x: usize, k: usize, b: usize, stride: usize, pad: usize },
    Deconv2d { x: usize, k: usize, stride: usize, pad: usize },
    PartialConv { x: usize, k: usize, b: usize, stride: usize, pad: usize, mask: MaskPlane, aux: PconvAux },
    Blur3 { x: usize },
    Upsample { x: usize, factor: usize },
    Downsample { x: usize, factor: usize },
    Relu { x: usize },
    LeakyRelu { x: usize, slope: f32 },
    Sigmoid { x: usize },
    Tanh { x: usize },
    Abs { x: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, alpha: f32 },
    MaskMul { x: usize, plane: Vec<f32> },
    BatchNorm { x: usize, gamma: usize, beta: usize, saved: BnSaved },
    MaxPool2 { x: usize, arg: Vec<u32> },
    Concat { xs: Vec<usize> },
    SliceCh { x: usize, from: usize },
    Sum { x: usize },
    LocNormalize { x: usize, norms: Vec<f32> },
    PairwiseDot { x: usize },
    SoftmaxSlices { x: usize },
    PatchBlend { f: usize, s: usize },
    Gram { x: usize },
    TvRegion { x: usize, region: Vec<f32> },
    MergeWeighted { xs: Vec<usize>, planes: Vec<Vec<f32>>, denom: Vec<f32> },
}

struct Node {
    value: Tensor4,
    requires_grad: bool,
    op: Option<Op>,
}

/// Recording tape for one forward graph.
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4, requires_grad: bool, op: Option<Op>, name: &'static str) -> Result<Var> {
        value.check_finite(name)?;
        self.nodes.push(Node { value, requires_grad, op });
        self.grads.push(None);
        Ok(Var {
            node: (self.nodes.len() - 1) as u32,
            tape: self.id,
        })
    }

    fn ix(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::ForeignVar);
        }
        Ok(v.node as usize)
    }

    /// Inserts a tensor as a leaf (input or parameter).
    pub fn leaf(&mut self, value: Tensor4, requires_grad: bool) -> Result<Var> {
        self.push(value, requires_grad, None, "leaf")
    }

    pub fn value(&self, v: Var) -> &Tensor4 {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.node as usize].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize, usize, usize) {
        self.value(v).dims()
    }

    /// Gradient of a variable after `backward`, as a tensor of its dims.
    pub fn grad(&self, v: Var) -> Option<Tensor4> {
        assert_eq!(v.tape, self.id, "variable from another tape");
        self.grads[v.node as usize]
            .as_ref()
            .map(|g| Tensor4::from_raw(self.nodes[v.node as usize].value.dims(), g.clone()))
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    // ---- recorded ops -------------------------------------------------------

    /// Cross-correlation with bias. Kernel (oc, ic, kh, kw), bias (1, oc, 1, 1).
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, ki, bi) = (self.ix(x)?, self.ix(k)?, self.ix(b)?);
        let bdims = self.nodes[bi].value.dims();
        let oc = self.nodes[ki].value.n();
        if bdims != (1, oc, 1, 1) {
            return Err(Error::Shape(format!("conv bias dims {bdims:?} != (1, {oc}, 1, 1)")));
        }
        let out = ops::conv2d(
            &self.nodes[xi].value,
            &self.nodes[ki].value,
            Some(self.nodes[bi].value.data()),
            stride,
            pad,
        )?;
        let rg = self.rg(xi) || self.rg(ki) || self.rg(bi);
        self.push(out, rg, Some(Op::Conv2d { x: xi, k: ki, b: bi, stride, pad }), "conv2d")
    }

    /// Transposed convolution (adjoint of conv2d); no bias; input channels
    /// must equal the kernel's out_channels.
    pub fn deconv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, ki) = (self.ix(x)?, self.ix(k)?);
        let out = ops::deconv2d(&self.nodes[xi].value, &self.nodes[ki].value, stride, pad)?;
        let rg = self.rg(xi) || self.rg(ki);
        self.push(out, rg, Some(Op::Deconv2d { x: xi, k: ki, stride, pad }), "deconv2d")
    }

    /// Mask-renormalized convolution; the mask is a constant.
    pub fn partial_conv(&mut self, x: Var, mask: &MaskPlane, k: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (xi, ki, bi) = (self.ix(x)?, self.ix(k)?, self.ix(b)?);
        let oc = self.nodes[ki].value.n();
        if self.nodes[bi].value.dims() != (1, oc, 1, 1) {
            return Err(Error::Shape("partial_conv bias dims".into()));
        }
        let bias: Vec<f32> = self.nodes[bi].value.data().to_vec();
        let (out, aux) = ops::partial_conv(
            &self.nodes[xi].value,
            mask,
            &self.nodes[ki].value,
            Some(&bias),
            stride,
            pad,
        )?;
        let rg = self.rg(xi) || self.rg(ki) || self.rg(bi);
        self.push(
            out,
            rg,
            Some(Op::PartialConv { x: xi, k: ki, b: bi, stride, pad, mask: mask.clone(), aux }),
            "partial_conv",
        )
    }

    /// Fixed depthwise 3x3 Gaussian blur, reflect padded.
    pub fn blur3(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = ops::blur3_reflect(&self.nodes[xi].value);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::Blur3 { x: xi }), "blur3")
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Invalid("upsample factor must be >= 1".into()));
        }
        let xi = self.ix(x)?;
        let out = ops::upsample_nearest(&self.nodes[xi].value, factor);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::Upsample { x: xi, factor }), "upsample_nearest")
    }

    pub fn downsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor == 0 {
            return Err(Error::Invalid("downsample factor must be >= 1".into()));
        }
        let xi = self.ix(x)?;
        let out = ops::downsample_nearest(&self.nodes[xi].value, factor);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::Downsample { x: xi, factor }), "downsample_nearest")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = self.nodes[xi].value.map(|v| v.max(0.0));
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::Relu { x: xi }), "relu")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = self.nodes[xi].value.map(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::LeakyRelu { x: xi, slope }), "leaky_relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = self.nodes[xi].value.map(|v| 1.0 / (1.0 + (-v).exp()));
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::Sigmoid { x: xi }), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = self.nodes[xi].value.map(f32::tanh);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::Tanh { x: xi }), "tanh")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = self.nodes[xi].value.map(f32::abs);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::Abs { x: xi }), "abs")
    }

    fn binary_dims_check(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.nodes[a].value.dims() != self.nodes[b].value.dims() {
            return Err(Error::Shape(format!(
                "{what}: dims {:?} vs {:?} (no implicit broadcasting)",
                self.nodes[a].value.dims(),
                self.nodes[b].value.dims()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.ix(a)?, self.ix(b)?);
        self.binary_dims_check(ai, bi, "add")?;
        let out = self.nodes[ai].value.zip(&self.nodes[bi].value, |x, y| x + y)?;
        let rg = self.rg(ai) || self.rg(bi);
        self.push(out, rg, Some(Op::Add { a: ai, b: bi }), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.ix(a)?, self.ix(b)?);
        self.binary_dims_check(ai, bi, "sub")?;
        let out = self.nodes[ai].value.zip(&self.nodes[bi].value, |x, y| x - y)?;
        let rg = self.rg(ai) || self.rg(bi);
        self.push(out, rg, Some(Op::Sub { a: ai, b: bi }), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.ix(a)?, self.ix(b)?);
        self.binary_dims_check(ai, bi, "mul")?;
        let out = self.nodes[ai].value.zip(&self.nodes[bi].value, |x, y| x * y)?;
        let rg = self.rg(ai) || self.rg(bi);
        self.push(out, rg, Some(Op::Mul { a: ai, b: bi }), "mul")
    }

    pub fn scale(&mut self, x: Var, alpha: f32) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = self.nodes[xi].value.map(|v| alpha * v);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::Scale { x: xi, alpha }), "scale")
    }

    /// Multiplies every channel by a constant (h, w) plane.
    pub fn mask_mul(&mut self, x: Var, plane: &[f32]) -> Result<Var> {
        let xi = self.ix(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims();
        if plane.len() != h * w {
            return Err(Error::Shape(format!("mask plane {} != {}x{}", plane.len(), h, w)));
        }
        let mut out = self.nodes[xi].value.clone();
        for ni in 0..n {
            for ci in 0..c {
                for (v, m) in out.plane_mut(ni, ci).iter_mut().zip(plane) {
                    *v *= m;
                }
            }
        }
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::MaskMul { x: xi, plane: plane.to_vec() }), "mask_mul")
    }

    /// Batch-statistics normalization with learned affine; gamma and beta are
    /// (1, c, 1, 1) vars. Freezing is an optimizer concern, not the op's.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.ix(x)?, self.ix(gamma)?, self.ix(beta)?);
        let c = self.nodes[xi].value.c();
        for (name, i) in [("gamma", gi), ("beta", bi)] {
            let d = self.nodes[i].value.dims();
            if d != (1, c, 1, 1) {
                return Err(Error::Shape(format!("batch_norm {name} dims {d:?} != (1, {c}, 1, 1)")));
            }
        }
        let (out, saved) = ops::batchnorm(
            &self.nodes[xi].value,
            self.nodes[gi].value.data(),
            self.nodes[bi].value.data(),
        )?;
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        self.push(out, rg, Some(Op::BatchNorm { x: xi, gamma: gi, beta: bi, saved }), "batch_norm")
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let (out, arg) = ops::maxpool2(&self.nodes[xi].value);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::MaxPool2 { x: xi, arg }), "maxpool2")
    }

    /// Channel concatenation; spatial and batch dims must match.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let idx: Vec<usize> = xs.iter().map(|&v| self.ix(v)).collect::<Result<_>>()?;
        let (n, _, h, w) = self.nodes[idx[0]].value.dims();
        let mut c_total = 0;
        for &i in &idx {
            let (ni, ci, hi, wi) = self.nodes[i].value.dims();
            if (ni, hi, wi) != (n, h, w) {
                return Err(Error::Shape("concat: batch/spatial dims differ".into()));
            }
            c_total += ci;
        }
        let mut out = Tensor4::zeros((n, c_total, h, w));
        for ni in 0..n {
            let mut co = 0;
            for &i in &idx {
                let t = &self.nodes[i].value;
                for ci in 0..t.c() {
                    out.plane_mut(ni, co).copy_from_slice(t.plane(ni, ci));
                    co += 1;
                }
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(out, rg, Some(Op::Concat { xs: idx }), "concat")
    }

    /// Channel slice [from, to).
    pub fn slice_channels(&mut self, x: Var, from: usize, to: usize) -> Result<Var> {
        let xi = self.ix(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims();
        if from >= to || to > c {
            return Err(Error::Invalid(format!("channel slice {from}..{to} of {c}")));
        }
        let t = &self.nodes[xi].value;
        let mut out = Tensor4::zeros((n, to - from, h, w));
        for ni in 0..n {
            for (co, ci) in (from..to).enumerate() {
                out.plane_mut(ni, co).copy_from_slice(t.plane(ni, ci));
            }
        }
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::SliceCh { x: xi, from }), "slice_channels")
    }

    /// Sum of all elements, as a (1,1,1,1) scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let s = self.nodes[xi].value.sum() as f32;
        let rg = self.rg(xi);
        self.push(Tensor4::scalar(s), rg, Some(Op::Sum { x: xi }), "sum")
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn loc_normalize(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let (out, norms) = attention::loc_normalize_fwd(&self.nodes[xi].value);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::LocNormalize { x: xi, norms }), "loc_normalize")
    }

    pub fn pairwise_dot(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = attention::pairwise_dot_fwd(&self.nodes[xi].value);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::PairwiseDot { x: xi }), "pairwise_dot")
    }

    pub fn softmax_slices(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = attention::softmax_slices_fwd(&self.nodes[xi].value);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::SoftmaxSlices { x: xi }), "softmax_slices")
    }

    pub fn patch_blend(&mut self, f: Var, s: Var) -> Result<Var> {
        let (fi, si) = (self.ix(f)?, self.ix(s)?);
        let (n, _c, h, w) = self.nodes[fi].value.dims();
        let sd = self.nodes[si].value.dims();
        if sd != (n, h * w, h, w) {
            return Err(Error::Shape(format!("patch_blend scores dims {sd:?}")));
        }
        let out = attention::patch_blend_fwd(&self.nodes[fi].value, &self.nodes[si].value);
        let rg = self.rg(fi) || self.rg(si);
        self.push(out, rg, Some(Op::PatchBlend { f: fi, s: si }), "patch_blend")
    }

    /// Full feature-attention block: normalize, all-pairs cosine scores,
    /// spatial softmax, patch-blend reconstruction.
    pub fn attention(&mut self, x: Var) -> Result<Var> {
        let normed = self.loc_normalize(x)?;
        let raw = self.pairwise_dot(normed)?;
        let scores = self.softmax_slices(raw)?;
        self.patch_blend(x, scores)
    }

    /// Per-sample Gram matrix scaled by 1/(H W C): out (n, 1, C, C).
    pub fn gram(&mut self, x: Var) -> Result<Var> {
        let xi = self.ix(x)?;
        let out = ops::gram(&self.nodes[xi].value);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::Gram { x: xi }), "gram")
    }

    /// Total-variation loss over a constant region plane: mean over samples of
    /// (sum of |neighbor diffs| with both endpoints in the region) / numel.
    pub fn tv_region(&mut self, x: Var, region: &[f32]) -> Result<Var> {
        let xi = self.ix(x)?;
        let (n, c, h, w) = self.nodes[xi].value.dims();
        if region.len() != h * w {
            return Err(Error::Shape(format!("tv region {} != {}x{}", region.len(), h, w)));
        }
        let t = &self.nodes[xi].value;
        let nelem = (c * h * w) as f64;
        let mut total = 0.0f64;
        for ni in 0..n {
            let mut s = 0.0f64;
            for ci in 0..c {
                let p = t.plane(ni, ci);
                for i in 0..h {
                    for j in 0..w {
                        if region[i * w + j] == 0.0 {
                            continue;
                        }
                        if j + 1 < w && region[i * w + j + 1] > 0.0 {
                            s += (p[i * w + j + 1] - p[i * w + j]).abs() as f64;
                        }
                        if i + 1 < h && region[(i + 1) * w + j] > 0.0 {
                            s += (p[(i + 1) * w + j] - p[i * w + j]).abs() as f64;
                        }
                    }
                }
            }
            total += s / nelem;
        }
        let out = Tensor4::scalar((total / n as f64) as f32);
        let rg = self.rg(xi);
        self.push(out, rg, Some(Op::TvRegion { x: xi, region: region.to_vec() }), "tv_region")
    }

    /// Fill-weighted average across iterations: per position, the mean of the
    /// inputs whose plane weight is 1; positions never filled take the last
    /// input's value.
    pub fn merge_weighted(&mut self, xs: &[Var], planes: &[Vec<f32>]) -> Result<Var> {
        if xs.is_empty() || xs.len() != planes.len() {
            return Err(Error::Invalid("merge_weighted needs one plane per input".into()));
        }
        let idx: Vec<usize> = xs.iter().map(|&v| self.ix(v)).collect::<Result<_>>()?;
        let dims = self.nodes[idx[0]].value.dims();
        let (n, c, h, w) = dims;
        for &i in &idx {
            if self.nodes[i].value.dims() != dims {
                return Err(Error::Shape("merge_weighted: input dims differ".into()));
            }
        }
        for p in planes {
            if p.len() != h * w {
                return Err(Error::Shape("merge_weighted: plane dims differ".into()));
            }
        }
        let mut denom = vec![0.0f32; h * w];
        for p in planes {
            for (d, v) in denom.iter_mut().zip(p) {
                *d += v;
            }
        }
        let mut out = Tensor4::zeros(dims);
        for ni in 0..n {
            for ci in 0..c {
                let plane_out = ((ni * c) + ci) * h * w;
                for pos in 0..h * w {
                    let o = if denom[pos] > 0.0 {
                        let mut acc = 0.0f32;
                        for (t, p) in idx.iter().zip(planes) {
                            if p[pos] > 0.0 {
                                acc += p[pos] * self.nodes[*t].value.data()[plane_out + pos];
                            }
                        }
                        acc / denom[pos]
                    } else {
                        self.nodes[*idx.last().unwrap()].value.data()[plane_out + pos]
                    };
                    out.data_mut()[plane_out + pos] = o;
                }
            }
        }
        let rg = idx.iter().any(|&i| self.rg(i));
        self.push(
            out,
            rg,
            Some(Op::MergeWeighted { xs: idx, planes: planes.to_vec(), denom }),
            "merge_weighted",
        )
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulates d(loss)/d(ancestor) into every requires_grad ancestor.
    /// The loss must be a (1,1,1,1) scalar; the tape is consumed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let li = self.ix(loss)?;
        if self.nodes[li].value.dims() != (1, 1, 1, 1) {
            return Err(Error::Shape(format!(
                "backward expects a scalar loss, got {:?}",
                self.nodes[li].value.dims()
            )));
        }
        self.consumed = true;
        self.grads[li] = Some(vec![1.0]);
        for i in (0..self.nodes.len()).rev() {
            if self.nodes[i].op.is_none() || self.grads[i].is_none() {
                continue;
            }
            let dy_raw = if self.nodes[i].requires_grad {
                self.grads[i].take().unwrap()
            } else {
                continue;
            };
            let dy = Tensor4::from_raw(self.nodes[i].value.dims(), dy_raw);
            backprop_one(&self.nodes, &mut self.grads, i, &dy)?;
            if i == li {
                // keep the seed grad visible for callers
                self.grads[i] = Some(dy.into_data());
            }
        }
        Ok(())
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], nodes: &[Node], idx: usize, add: &Tensor4) {
    if !nodes[idx].requires_grad {
        return;
    }
    debug_assert_eq!(nodes[idx].value.dims(), add.dims());
    let g = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.numel()]);
    for (a, b) in g.iter_mut().zip(add.data()) {
        *a += b;
    }
}

fn acc_slice(grads: &mut [Option<Vec<f32>>], nodes: &[Node], idx: usize, add: &[f32]) {
    if !nodes[idx].requires_grad {
        return;
    }
    debug_assert_eq!(nodes[idx].value.numel(), add.len());
    let g = grads[idx].get_or_insert_with(|| vec![0.0; nodes[idx].value.numel()]);
    for (a, b) in g.iter_mut().zip(add) {
        *a += b;
    }
}

fn backprop_one(nodes: &[Node], grads: &mut [Option<Vec<f32>>], i: usize, dy: &Tensor4) -> Result<()> {
    let op = nodes[i].op.as_ref().unwrap();
    match op {
        Op::Conv2d { x, k, b, stride, pad } => {
            if nodes[*x].requires_grad {
                let dx = ops::conv2d_back_input(dy, &nodes[*k].value, *stride, *pad, nodes[*x].value.dims())?;
                acc(grads, nodes, *x, &dx);
            }
            if nodes[*k].requires_grad {
                let dk = ops::conv2d_back_kernel(&nodes[*x].value, dy, *stride, *pad, nodes[*k].value.dims());
                acc(grads, nodes, *k, &dk);
            }
            if nodes[*b].requires_grad {
                let db = ops::conv2d_back_bias(dy);
                acc_slice(grads, nodes, *b, &db);
            }
        }
        Op::Deconv2d { x, k, stride, pad } => {
            if nodes[*x].requires_grad {
                let dx = ops::deconv2d_back_input(dy, &nodes[*k].value, *stride, *pad, nodes[*x].value.dims())?;
                acc(grads, nodes, *x, &dx);
            }
            if nodes[*k].requires_grad {
                let dk = ops::deconv2d_back_kernel(&nodes[*x].value, dy, *stride, *pad, nodes[*k].value.dims());
                acc(grads, nodes, *k, &dk);
            }
        }
        Op::PartialConv { x, k, b, stride, pad, mask, aux } => {
            let (dx, dk, db) = ops::partial_conv_back(&nodes[*x].value, mask, &nodes[*k].value, *stride, *pad, aux, dy)?;
            if nodes[*x].requires_grad {
                acc(grads, nodes, *x, &dx);
            }
            if nodes[*k].requires_grad {
                acc(grads, nodes, *k, &dk);
            }
            if nodes[*b].requires_grad {
                acc_slice(grads, nodes, *b, &db);
            }
        }
        Op::Blur3 { x } => {
            acc(grads, nodes, *x, &ops::blur3_reflect_adjoint(dy));
        }
        Op::Upsample { x, factor } => {
            acc(grads, nodes, *x, &ops::upsample_nearest_back(dy, *factor, nodes[*x].value.dims()));
        }
        Op::Downsample { x, factor } => {
            acc(grads, nodes, *x, &ops::downsample_nearest_back(dy, *factor, nodes[*x].value.dims()));
        }
        Op::Relu { x } => {
            let dx = nodes[*x].value.zip(dy, |v, d| if v > 0.0 { d } else { 0.0 })?;
            acc(grads, nodes, *x, &dx);
        }
        Op::LeakyRelu { x, slope } => {
            let s = *slope;
            let dx = nodes[*x].value.zip(dy, |v, d| if v >= 0.0 { d } else { s * d })?;
            acc(grads, nodes, *x, &dx);
        }
        Op::Sigmoid { x } => {
            let dx = nodes[i].value.zip(dy, |y, d| d * y * (1.0 - y))?;
            acc(grads, nodes, *x, &dx);
        }
        Op::Tanh { x } => {
            let dx = nodes[i].value.zip(dy, |y, d| d * (1.0 - y * y))?;
            acc(grads, nodes, *x, &dx);
        }
        Op::Abs { x } => {
            let dx = nodes[*x].value.zip(dy, |v, d| {
                if v > 0.0 {
                    d
                } else if v < 0.0 {
                    -d
                } else {
                    0.0
                }
            })?;
            acc(grads, nodes, *x, &dx);
        }
        Op::Add { a, b } => {
            acc(grads, nodes, *a, dy);
            acc(grads, nodes, *b, dy);
        }
        Op::Sub { a, b } => {
            acc(grads, nodes, *a, dy);
            let neg = dy.map(|v| -v);
            acc(grads, nodes, *b, &neg);
        }
        Op::Mul { a, b } => {
            if nodes[*a].requires_grad {
                let da = nodes[*b].value.zip(dy, |v, d| v * d)?;
                acc(grads, nodes, *a, &da);
            }
            if nodes[*b].requires_grad {
                let db = nodes[*a].value.zip(dy, |v, d| v * d)?;
                acc(grads, nodes, *b, &db);
            }
        }
        Op::Scale { x, alpha } => {
            let a = *alpha;
            acc(grads, nodes, *x, &dy.map(|v| a * v));
        }
        Op::MaskMul { x, plane } => {
            let (n, c, h, w) = dy.dims();
            let mut dx = dy.clone();
            for ni in 0..n {
                for ci in 0..c {
                    let hw = h * w;
                    let s = ((ni * c) + ci) * hw;
                    for (v, m) in dx.data_mut()[s..s + hw].iter_mut().zip(plane) {
                        *v *= m;
                    }
                }
            }
            acc(grads, nodes, *x, &dx);
        }
        Op::BatchNorm { x, gamma, beta, saved } => {
            let (dx, dgamma, dbeta) = ops::batchnorm_back(&nodes[*x].value, nodes[*gamma].value.data(), saved, dy);
            if nodes[*x].requires_grad {
                acc(grads, nodes, *x, &dx);
            }
            if nodes[*gamma].requires_grad {
                acc_slice(grads, nodes, *gamma, &dgamma);
            }
            if nodes[*beta].requires_grad {
                acc_slice(grads, nodes, *beta, &dbeta);
            }
        }
        Op::MaxPool2 { x, arg } => {
            acc(grads, nodes, *x, &ops::maxpool2_back(dy, arg, nodes[*x].value.dims()));
        }
        Op::Concat { xs } => {
            let (n, _, h, w) = dy.dims();
            let mut co = 0;
            for &xi in xs {
                let c = nodes[xi].value.c();
                if nodes[xi].requires_grad {
                    let mut dx = Tensor4::zeros(nodes[xi].value.dims());
                    for ni in 0..n {
                        for ci in 0..c {
                            dx.plane_mut(ni, ci).copy_from_slice(dy.plane(ni, co + ci));
                        }
                    }
                    acc(grads, nodes, xi, &dx);
                }
                co += c;
                let _ = (h, w);
            }
        }
        Op::SliceCh { x, from } => {
            let (n, c_out, _, _) = dy.dims();
            let mut dx = Tensor4::zeros(nodes[*x].value.dims());
            for ni in 0..n {
                for ci in 0..c_out {
                    dx.plane_mut(ni, from + ci).copy_from_slice(dy.plane(ni, ci));
                }
            }
            acc(grads, nodes, *x, &dx);
        }
        Op::Sum { x } => {
            let g = dy.data()[0];
            let dx = Tensor4::filled(nodes[*x].value.dims(), g);
            acc(grads, nodes, *x, &dx);
        }
        Op::LocNormalize { x, norms } => {
            let dx = attention::loc_normalize_bwd(&nodes[i].value, norms, dy);
            acc(grads, nodes, *x, &dx);
        }
        Op::PairwiseDot { x } => {
            let dx = attention::pairwise_dot_bwd(&nodes[*x].value, dy);
            acc(grads, nodes, *x, &dx);
        }
        Op::SoftmaxSlices { x } => {
            let dx = attention::softmax_slices_bwd(&nodes[i].value, dy);
            acc(grads, nodes, *x, &dx);
        }
        Op::PatchBlend { f, s } => {
            let (df, ds) = attention::patch_blend_bwd(&nodes[*f].value, &nodes[*s].value, dy);
            if nodes[*f].requires_grad {
                acc(grads, nodes, *f, &df);
            }
            if nodes[*s].requires_grad {
                acc(grads, nodes, *s, &ds);
            }
        }
        Op::Gram { x } => {
            let dx = ops::gram_back(&nodes[*x].value, dy);
            acc(grads, nodes, *x, &dx);
        }
        Op::TvRegion { x, region } => {
            let g = dy.data()[0];
            let t = &nodes[*x].value;
            let (n, c, h, w) = t.dims();
            let nelem = (c * h * w) as f32;
            let scale = g / (n as f32 * nelem);
            let mut dx = Tensor4::zeros(t.dims());
            for ni in 0..n {
                for ci in 0..c {
                    let hw = h * w;
                    let base = ((ni * c) + ci) * hw;
                    for ii in 0..h {
                        for jj in 0..w {
                            if region[ii * w + jj] == 0.0 {
                                continue;
                            }
                            if jj + 1 < w && region[ii * w + jj + 1] > 0.0 {
                                let d = t.data()[base + ii * w + jj + 1] - t.data()[base + ii * w + jj];
                                let sg = if d > 0.0 { scale } else if d < 0.0 { -scale } else { 0.0 };
                                dx.data_mut()[base + ii * w + jj + 1] += sg;
                                dx.data_mut()[base + ii * w + jj] -= sg;
                            }
                            if ii + 1 < h && region[(ii + 1) * w + jj] > 0.0 {
                                let d = t.data()[base + (ii + 1) * w + jj] - t.data()[base + ii * w + jj];
                                let sg = if d > 0.0 { scale } else if d < 0.0 { -scale } else { 0.0 };
                                dx.data_mut()[base + (ii + 1) * w + jj] += sg;
                                dx.data_mut()[base + ii * w + jj] -= sg;
                            }
                        }
                    }
                }
            }
            acc(grads, nodes, *x, &dx);
        }
        Op::MergeWeighted { xs, planes, denom } => {
            let (n, c, h, w) = dy.dims();
            let hw = h * w;
            let last = *xs.last().unwrap();
            for (t, p) in xs.iter().zip(planes) {
                if !nodes[*t].requires_grad {
                    continue;
                }
                let mut dx = Tensor4::zeros(nodes[*t].value.dims());
                for ni in 0..n {
                    for ci in 0..c {
                        let base = ((ni * c) + ci) * hw;
                        for pos in 0..hw {
                            if denom[pos] > 0.0 {
                                if p[pos] > 0.0 {
                                    dx.data_mut()[base + pos] = dy.data()[base + pos] * p[pos] / denom[pos];
                                }
                            } else if *t == last {
                                dx.data_mut()[base + pos] = dy.data()[base + pos];
                            }
                        }
                    }
                }
                acc(grads, nodes, *t, &dx);
            }
        }
    }
    Ok(())
}

// ---- finite-difference gradient checking -------------------------------------

/// Compares the tape's analytic gradients against central finite differences
/// (step 1e-3). `build` produces the quantity under test; a non-scalar output
/// is summed (on the tape for the analytic pass, in f64 for the numeric
/// evaluations, so unperturbed elements cancel exactly). Returns the max over
/// checked coordinates of |analytic - numeric| / max(1e-6, |analytic| + |numeric|).
pub fn gradcheck<F>(
    build: F,
    shapes: &[(usize, usize, usize, usize)],
    seed: u64,
    max_coords_per_input: usize,
) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    gradcheck_range(build, shapes, seed, max_coords_per_input, -0.9, 0.9)
}

/// `gradcheck` with an explicit input value range.
pub fn gradcheck_range<F>(
    build: F,
    shapes: &[(usize, usize, usize, usize)],
    seed: u64,
    max_coords_per_input: usize,
    lo: f32,
    hi: f32,
) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor4> = shapes
        .iter()
        .map(|&(n, c, h, w)| {
            let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.random_range(lo..hi)).collect();
            Tensor4::from_raw((n, c, h, w), data)
        })
        .collect();

    // analytic gradients
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &vars)?;
    let loss = if tape.value(out).dims() == (1, 1, 1, 1) {
        out
    } else {
        tape.sum(out)?
    };
    tape.backward(loss)?;
    let analytic: Vec<Tensor4> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor4::zeros(tape.value(v).dims())))
        .collect();

    let eval = |inputs: &[Tensor4]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .map(|x| t.leaf(x.clone(), false))
            .collect::<Result<_>>()?;
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).sum())
    };

    let mut worst = 0.0f32;
    let mut work = inputs.clone();
    for (ti, t) in inputs.iter().enumerate() {
        let numel = t.numel();
        let count = numel.min(max_coords_per_input);
        for k in 0..count {
            // deterministic spread over the coordinates
            let idx = if count == numel { k } else { (k * numel) / count };
            let orig = t.data()[idx];
            work[ti].data_mut()[idx] = orig + H as f32;
            let fp = eval(&work)?;
            work[ti].data_mut()[idx] = orig - H as f32;
            let fm = eval(&work)?;
            work[ti].data_mut()[idx] = orig;
            let numeric = ((fp - fm) / (2.0 * H)) as f32;
            let a = analytic[ti].data()[idx];
            let err = (a - numeric).abs() / (1e-6f32).max(a.abs() + numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

/// Directional finite-difference check (step 1e-3): perturbs all inputs at
/// once along a direction sign-matched to the analytic gradient, so the
/// directional derivative carries the gradient's full l1 mass and stays
/// well-conditioned in f32 even where individual coordinates cancel.
/// Coordinates with zero analytic gradient get a random sign, so a missing
/// accumulation still shows up as a mismatch.
pub fn gradcheck_directional<F>(
    build: F,
    shapes: &[(usize, usize, usize, usize)],
    seed: u64,
) -> Result<f32>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    const H: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let inputs: Vec<Tensor4> = shapes
        .iter()
        .map(|&(n, c, h, w)| {
            let data: Vec<f32> = (0..n * c * h * w).map(|_| rng.random_range(-0.9..0.9)).collect();
            Tensor4::from_raw((n, c, h, w), data)
        })
        .collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let out = build(&mut tape, &vars)?;
    let loss = if tape.value(out).dims() == (1, 1, 1, 1) {
        out
    } else {
        tape.sum(out)?
    };
    tape.backward(loss)?;

    let mut analytic_dir = 0.0f64;
    let mut dirs: Vec<Vec<f32>> = Vec::with_capacity(inputs.len());
    for (&v, t) in vars.iter().zip(&inputs) {
        let g = tape.grad(v).unwrap_or_else(|| Tensor4::zeros(t.dims()));
        let mut d = Vec::with_capacity(t.numel());
        for &gi in g.data() {
            let mag: f32 = rng.random_range(0.5..1.0);
            let s = if gi > 0.0 {
                1.0
            } else if gi < 0.0 {
                -1.0
            } else if rng.random_range(0..2) == 0 {
                1.0
            } else {
                -1.0
            };
            d.push(s * mag);
            analytic_dir += gi as f64 * (s * mag) as f64;
        }
        dirs.push(d);
    }

    let eval = |inputs: &[Tensor4]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs
            .iter()
            .map(|x| t.leaf(x.clone(), false))
            .collect::<Result<_>>()?;
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).sum())
    };

    let shift = |sign: f64| -> Vec<Tensor4> {
        inputs
            .iter()
            .zip(&dirs)
            .map(|(t, d)| {
                let data: Vec<f32> = t
                    .data()
                    .iter()
                    .zip(d)
                    .map(|(&x, &v)| x + (sign * H) as f32 * v)
                    .collect();
                Tensor4::from_raw(t.dims(), data)
            })
            .collect()
    };

    let fp = eval(&shift(1.0))?;
    let fm = eval(&shift(-1.0))?;
    let numeric = ((fp - fm) / (2.0 * H)) as f32;
    let a = analytic_dir as f32;
    Ok((a - numeric).abs() / (1e-6f32).max(a.abs() + numeric.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::rng_tensor;

    #[test]
    fn sum_grad_is_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rng_tensor(&mut rng, (2, 3, 4, 4));
        let mut tape = Tape::new();
        let v = tape.leaf(x, true).unwrap();
        let l = tape.sum(v).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap();
        assert!(g.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn square_sum_grad_is_two_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rng_tensor(&mut rng, (1, 2, 3, 3));
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true).unwrap();
        let sq = tape.mul(v, v).unwrap();
        let l = tape.sum(sq).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap();
        let diff = g.zip(&x, |a, b| (a - 2.0 * b).abs()).unwrap().max_abs();
        assert!(diff < 1e-6);
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor4::scalar(2.0), true).unwrap();
        let l = tape.scale(v, 3.0).unwrap();
        tape.backward(l).unwrap();
        assert!(matches!(tape.backward(l), Err(Error::TapeConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor4::zeros((1, 1, 2, 2)), true).unwrap();
        assert!(tape.backward(v).is_err());
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let va = a.leaf(Tensor4::scalar(1.0), false).unwrap();
        assert!(matches!(b.relu(va), Err(Error::ForeignVar)));
    }

    #[test]
    fn fanout_accumulates() {
        // l = sum(x + x) -> grad 2 everywhere
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor4::filled((1, 1, 2, 2), 3.0), true).unwrap();
        let s = tape.add(v, v).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        assert!(tape.grad(v).unwrap().data().iter().all(|&g| g == 2.0));
    }

    #[test]
    fn pointwise_semantics() {
        let mut tape = Tape::new();
        let v = tape
            .leaf(Tensor4::new((1, 1, 1, 3), vec![-1.0, 0.0, 2.5]).unwrap(), false)
            .unwrap();
        let r = tape.relu(v).unwrap();
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.5]);
        let lr = tape.leaky_relu(v, 0.2).unwrap();
        assert_eq!(tape.value(lr).data(), &[-0.2, 0.0, 2.5]);
        let d = tape.sub(v, v).unwrap();
        assert!(tape.value(d).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn nan_is_reported_not_propagated() {
        let mut tape = Tape::new();
        // sigmoid overflows to a finite value, but a crafted scale can hit inf
        let v = tape.leaf(Tensor4::scalar(1e30), false).unwrap();
        let big = tape.scale(v, 1e30).unwrap_err();
        assert!(matches!(big, Error::NonFinite(_)));
    }

    #[test]
    fn gradcheck_pointwise_mul() {
        let err = gradcheck(
            |t, vs| t.mul(vs[0], vs[1]),
            &[(1, 2, 3, 3), (1, 2, 3, 3)],
            7,
            64,
        )
        .unwrap();
        assert!(err < 1e-4, "mul gradcheck err {err}");
    }

    #[test]
    fn gradcheck_sigmoid_single() {
        let err = gradcheck_range(|t, vs| t.sigmoid(vs[0]), &[(1, 2, 4, 4)], 11, 64, -0.5, 0.5).unwrap();
        assert!(err < 1e-4, "sigmoid gradcheck err {err}");
        let err = gradcheck_range(|t, vs| t.tanh(vs[0]), &[(1, 2, 4, 4)], 12, 64, -0.5, 0.5).unwrap();
        assert!(err < 1e-4, "tanh gradcheck err {err}");
    }

    #[test]
    fn gradcheck_sigmoid_chain_directional() {
        for seed in [11, 12, 13] {
            let err = gradcheck_directional(
                |t, vs| {
                    let s = t.sigmoid(vs[0])?;
                    let u = t.tanh(s)?;
                    t.mul(u, u)
                },
                &[(1, 2, 4, 4)],
                seed,
            )
            .unwrap();
            assert!(err < 1e-4, "sigmoid chain gradcheck err {err} (seed {seed})");
        }
    }

    #[test]
    fn gradcheck_conv2d() {
        // per-coordinate check with a sign-definite kernel (keeps input
        // gradients away from zero where f32 finite differences lose signal)
        let err = gradcheck(
            |t, vs| {
                let k = t.abs(vs[1])?;
                t.conv2d(vs[0], k, vs[2], 1, 1)
            },
            &[(2, 3, 5, 5), (4, 3, 3, 3), (1, 4, 1, 1)],
            13,
            48,
        )
        .unwrap();
        assert!(err < 1e-3, "conv2d gradcheck err {err}");
        // directional check with fully random kernels, all geometries
        for (s, p) in [(1usize, 1usize), (2, 0), (2, 3), (1, 3)] {
            for seed in [13, 14] {
                let err = gradcheck_directional(
                    move |t, vs| {
                        let k = t.scale(vs[1], 0.1)?;
                        t.conv2d(vs[0], k, vs[2], s, p)
                    },
                    &[(1, 2, 8, 8), (4, 2, 7, 7), (1, 4, 1, 1)],
                    seed,
                )
                .unwrap();
                assert!(err < 1e-3, "conv2d s{s} p{p} directional err {err} (seed {seed})");
            }
        }
    }

    #[test]
    fn gradcheck_deconv_and_pconv_directional() {
        use crate::pconv::MaskPlane;
        for seed in [29, 30] {
            let err = gradcheck_directional(
                move |t, vs| {
                    let k = t.scale(vs[1], 0.1)?;
                    t.deconv2d(vs[0], k, 2, 0)
                },
                &[(1, 4, 4, 4), (4, 2, 3, 3)],
                seed,
            )
            .unwrap();
            assert!(err < 1e-3, "deconv2d directional err {err} (seed {seed})");
        }
        let mut mask = MaskPlane::ones(8, 8);
        for i in 2..6 {
            for j in 3..7 {
                mask.set(i, j, false);
            }
        }
        for seed in [31, 32] {
            let m = mask.clone();
            let err = gradcheck_directional(
                move |t, vs| {
                    let k = t.scale(vs[1], 0.1)?;
                    t.partial_conv(vs[0], &m, k, vs[2], 1, 1)
                },
                &[(1, 2, 8, 8), (3, 2, 3, 3), (1, 3, 1, 1)],
                seed,
            )
            .unwrap();
            assert!(err < 1e-3, "partial_conv directional err {err} (seed {seed})");
        }
    }

    #[test]
    fn gradcheck_attention_chain() {
        for seed in [17, 18, 19] {
            let err = gradcheck_directional(
                |t, vs| {
                    let a = t.attention(vs[0])?;
                    t.mul(a, vs[1])
                },
                &[(1, 4, 4, 4), (1, 4, 4, 4)],
                seed,
            )
            .unwrap();
            assert!(err < 1e-3, "attention gradcheck err {err} (seed {seed})");
        }
    }

    #[test]
    fn gradcheck_batchnorm() {
        for seed in [19, 20, 21] {
            let err = gradcheck_directional(
                |t, vs| {
                    let y = t.batch_norm(vs[0], vs[1], vs[2])?;
                    t.mul(y, vs[3])
                },
                &[(2, 3, 4, 4), (1, 3, 1, 1), (1, 3, 1, 1), (2, 3, 4, 4)],
                seed,
            )
            .unwrap();
            assert!(err < 1e-3, "batchnorm gradcheck err {err} (seed {seed})");
        }
    }

    #[test]
    fn gradcheck_softmax_directional() {
        for seed in [23, 24, 25] {
            let err = gradcheck_directional(
                |t, vs| {
                    let y = t.softmax_slices(vs[0])?;
                    t.mul(y, vs[1])
                },
                &[(1, 9, 3, 3), (1, 9, 3, 3)],
                seed,
            )
            .unwrap();
            assert!(err < 1e-3, "softmax gradcheck err {err} (seed {seed})");
        }
    }
}
