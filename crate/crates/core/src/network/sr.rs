//! The super-resolution generator: per-frame feature extraction over the LR
//! window, a degradation encoder fed with `P y`, a residual trunk that
//! upscales part-way through, and the affine data-consistency projection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{DegradationOperator, GaussianKernel, KernelPca};
use crate::error::{Error, Result};
use crate::layers::{
    conv2d, conv2d_backward, conv2d_param_grad, pixel_shuffle, pixel_unshuffle, Activation, ConvParams,
};
use crate::optim::{prefixed, prefixed_mut, Parameters};
use crate::pinv::{HyperNetwork, PseudoInverse};
use crate::tensor::Tensor;

const RELU: Activation = Activation::Relu;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrArch {
    pub factor: usize,
    /// Temporal radius `l`; the window holds `2l + 1` frames.
    pub radius: usize,
    pub channels: usize,
    pub n_blocks: usize,
    pub width: usize,
    pub encoder_width: usize,
    /// Wrap the trunk output in the data-consistency projection.
    pub affine: bool,
}

impl SrArch {
    pub fn paper(factor: usize) -> Self {
        SrArch {
            factor,
            radius: 2,
            channels: 1,
            n_blocks: 15,
            width: 64,
            encoder_width: 32,
            affine: true,
        }
    }

    pub fn desk(factor: usize) -> Self {
        SrArch {
            n_blocks: 3,
            width: 16,
            encoder_width: 8,
            ..Self::paper(factor)
        }
    }

    pub fn frames(&self) -> usize {
        2 * self.radius + 1
    }

    /// 1-based index of the residual block preceded by the upscaling layer.
    pub fn shuffle_before(&self) -> usize {
        (2 * self.n_blocks).div_ceil(3).max(1)
    }

    /// Residual blocks run at LR resolution.
    pub fn lr_blocks(&self) -> usize {
        (self.shuffle_before() - 1).min(self.n_blocks)
    }

    fn validate(&self) -> Result<()> {
        if self.factor == 0 || self.channels == 0 || self.width == 0 || self.encoder_width == 0 {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

/// Generator parameters θ (trunk) and ψ (encoder).
#[derive(Clone, Debug, PartialEq)]
pub struct SrModel {
    pub arch: SrArch,
    pub frame_convs: Vec<ConvParams>,
    pub fuse: [ConvParams; 2],
    pub encoder: [ConvParams; 3],
    pub merge: ConvParams,
    pub blocks: Vec<ResBlock>,
    pub upsample: ConvParams,
    pub last: ConvParams,
}

impl SrModel {
    pub fn zeros(arch: SrArch) -> Result<Self> {
        arch.validate()?;
        let (c, w, e, f) = (arch.channels, arch.width, arch.encoder_width, arch.factor);
        Ok(SrModel {
            arch,
            frame_convs: (0..arch.frames()).map(|_| ConvParams::same(w, c, 3, true)).collect(),
            fuse: [
                ConvParams::same(w, w * arch.frames(), 3, true),
                ConvParams::same(w, w, 3, true),
            ],
            encoder: [
                ConvParams::zeros(e, c, 3, f, 1, true),
                ConvParams::same(e, e, 3, true),
                ConvParams::same(e, e, 3, true),
            ],
            merge: ConvParams::same(w, w + e, 1, true),
            blocks: (0..arch.n_blocks)
                .map(|_| ResBlock {
                    conv1: ConvParams::same(w, w, 3, true),
                    conv2: ConvParams::same(w, w, 3, true),
                })
                .collect(),
            upsample: ConvParams::same(w * f * f, w, 3, true),
            last: ConvParams::same(c, w, 3, true),
        })
    }

    /// He-normal initialisation; the second conv of each residual block and
    /// the output conv start small so the initial trunk is close to linear.
    pub fn init(arch: SrArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Self::zeros(arch)?;
        let he = |p: &mut ConvParams, gain: f64, rng: &mut ChaCha8Rng| *p = p.clone().init_he(gain, rng);
        for p in &mut m.frame_convs {
            he(p, 1.0, &mut rng);
        }
        for p in m.fuse.iter_mut().chain(m.encoder.iter_mut()) {
            he(p, 1.0, &mut rng);
        }
        he(&mut m.merge, 0.7, &mut rng);
        for b in &mut m.blocks {
            he(&mut b.conv1, 1.0, &mut rng);
            he(&mut b.conv2, 0.1, &mut rng);
        }
        he(&mut m.upsample, 1.0, &mut rng);
        he(&mut m.last, 0.1, &mut rng);
        Ok(m)
    }

    pub fn zeros_like(&self) -> SrModel {
        SrModel {
            arch: self.arch,
            frame_convs: self.frame_convs.iter().map(ConvParams::zeros_like).collect(),
            fuse: [self.fuse[0].zeros_like(), self.fuse[1].zeros_like()],
            encoder: [
                self.encoder[0].zeros_like(),
                self.encoder[1].zeros_like(),
                self.encoder[2].zeros_like(),
            ],
            merge: self.merge.zeros_like(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResBlock {
                    conv1: b.conv1.zeros_like(),
                    conv2: b.conv2.zeros_like(),
                })
                .collect(),
            upsample: self.upsample.zeros_like(),
            last: self.last.zeros_like(),
        }
    }

    fn check_window(&self, window: &[Tensor]) -> Result<(usize, usize)> {
        if window.len() != self.arch.frames() {
            return Err(Error::shape(
                "sr_forward",
                format!("{} frames, model expects {}", window.len(), self.arch.frames()),
            ));
        }
        let (c, h, w) = window[0].chw()?;
        if c != self.arch.channels {
            return Err(Error::shape(
                "sr_forward",
                format!("{c} channels, model expects {}", self.arch.channels),
            ));
        }
        for f in window {
            if f.shape() != window[0].shape() {
                return Err(Error::shape(
                    "sr_forward",
                    format!("frame {:?} differs from {:?}", f.shape(), window[0].shape()),
                ));
            }
        }
        Ok((h, w))
    }

    pub fn center<'a>(&self, window: &'a [Tensor]) -> &'a Tensor {
        &window[self.arch.radius]
    }

    /// Degradation encoder applied to `P y_center`, giving `[E, h, w]`.
    pub fn encoder_forward(&self, pinv_y: &Tensor) -> Result<Tensor> {
        let mut h = pinv_y.clone();
        for p in &self.encoder {
            h = RELU.forward(&conv2d(&h, p)?);
        }
        Ok(h)
    }

    /// Trunk output `f_θ` (before the affine projection).
    pub fn f_theta_forward(&self, window: &[Tensor], enc: &Tensor) -> Result<Tensor> {
        self.trunk(window, enc, None)
    }

    fn trunk(&self, window: &[Tensor], enc: &Tensor, mut cache: Option<&mut Cache>) -> Result<Tensor> {
        let (h, w) = self.check_window(window)?;
        let (ec, eh, ew) = enc.chw()?;
        if (ec, eh, ew) != (self.arch.encoder_width, h, w) {
            return Err(Error::shape(
                "f_theta_forward",
                format!(
                    "encoder features {:?}, expected [{}, {h}, {w}]",
                    enc.shape(),
                    self.arch.encoder_width
                ),
            ));
        }
        let mut feats = Vec::with_capacity(window.len());
        for (frame, p) in window.iter().zip(&self.frame_convs) {
            let pre = conv2d(frame, p)?;
            feats.push(RELU.forward(&pre));
            if let Some(c) = cache.as_deref_mut() {
                c.frame_pre.push(pre);
            }
        }
        let refs: Vec<&Tensor> = feats.iter().collect();
        let cat = Tensor::concat_channels(&refs)?;
        let pre1 = conv2d(&cat, &self.fuse[0])?;
        let a1 = RELU.forward(&pre1);
        let pre2 = conv2d(&a1, &self.fuse[1])?;
        let a2 = RELU.forward(&pre2);
        let merge_in = Tensor::concat_channels(&[&a2, enc])?;
        let mut x = conv2d(&merge_in, &self.merge)?;
        if let Some(c) = cache.as_deref_mut() {
            c.cat = cat;
            c.fuse_pre = [pre1, pre2];
            c.fuse_out = a1;
            c.merge_in = merge_in;
        }
        let n_lr = self.arch.lr_blocks();
        for (i, b) in self.blocks.iter().enumerate() {
            if i == n_lr {
                let pre = conv2d(&x, &self.upsample)?;
                let shuffled = pixel_shuffle(&pre, self.arch.factor)?;
                let out = RELU.forward(&shuffled);
                if let Some(c) = cache.as_deref_mut() {
                    c.up_in = std::mem::replace(&mut x, out);
                    c.up_shuffled = shuffled;
                } else {
                    x = out;
                }
            }
            x = self.block_forward(b, x, cache.as_deref_mut())?;
        }
        if n_lr == self.blocks.len() {
            let pre = conv2d(&x, &self.upsample)?;
            let shuffled = pixel_shuffle(&pre, self.arch.factor)?;
            let out = RELU.forward(&shuffled);
            if let Some(c) = cache.as_deref_mut() {
                c.up_in = std::mem::replace(&mut x, out);
                c.up_shuffled = shuffled;
            } else {
                x = out;
            }
        }
        let out = conv2d(&x, &self.last)?;
        if let Some(c) = cache {
            c.last_in = x;
        }
        Ok(out)
    }

    fn block_forward(&self, b: &ResBlock, x: Tensor, cache: Option<&mut Cache>) -> Result<Tensor> {
        let pre1 = conv2d(&x, &b.conv1)?;
        let a1 = RELU.forward(&pre1);
        let pre2 = conv2d(&a1, &b.conv2)?;
        let mut out = RELU.forward(&pre2);
        out.add_assign(&x)?;
        if let Some(c) = cache {
            c.blocks.push(BlockCache {
                input: x,
                pre1,
                a1,
                pre2,
            });
        }
        Ok(out)
    }

    /// Full generator with a given operator and pseudo-inverse.
    pub fn forward(&self, window: &[Tensor], op: &DegradationOperator, pinv: &dyn PseudoInverse) -> Result<Tensor> {
        Ok(self.forward_cached(window, op, pinv)?.0)
    }

    pub fn forward_cached(
        &self,
        window: &[Tensor],
        op: &DegradationOperator,
        pinv: &dyn PseudoInverse,
    ) -> Result<(Tensor, Cache)> {
        self.check_factor(op, pinv)?;
        self.check_window(window)?;
        let y = self.center(window);
        let pinv_y = pinv.apply(y)?;
        let mut cache = Cache::default();
        let mut h = pinv_y.clone();
        for p in &self.encoder {
            let pre = conv2d(&h, p)?;
            cache.enc_in.push(h);
            h = RELU.forward(&pre);
            cache.enc_pre.push(pre);
        }
        let f_out = self.trunk(window, &h, Some(&mut cache))?;
        let out = if self.arch.affine {
            affine_project(&f_out, y, op, pinv)?
        } else {
            f_out
        };
        Ok((out, cache))
    }

    fn check_factor(&self, op: &DegradationOperator, pinv: &dyn PseudoInverse) -> Result<()> {
        if op.factor() != self.arch.factor || pinv.factor() != self.arch.factor {
            return Err(Error::invalid(format!(
                "factor mismatch: model {}, operator {}, pseudo-inverse {}",
                self.arch.factor,
                op.factor(),
                pinv.factor()
            )));
        }
        Ok(())
    }

    /// Parameter gradients of `⟨grad_out, forward(window)⟩`.
    pub fn backward(
        &self,
        cache: &Cache,
        window: &[Tensor],
        grad_out: &Tensor,
        op: &DegradationOperator,
        pinv: &dyn PseudoInverse,
    ) -> Result<SrModel> {
        let mut g = self.zeros_like();
        // Through the projection f + P(y − A f): ∂/∂f = I − Aᵀ Pᵀ.
        let mut d = if self.arch.affine {
            let mut d = grad_out.clone();
            d.axpy(-1.0, &op.adjoint(&pinv.adjoint(grad_out)?)?)?;
            d
        } else {
            grad_out.clone()
        };

        let lg = conv2d_backward(&d, &cache.last_in, &self.last)?;
        set(&mut g.last, lg.weight, lg.bias);
        d = lg.input;

        let n_lr = self.arch.lr_blocks();
        let up_grad = |d: &Tensor, g: &mut SrModel| -> Result<Tensor> {
            let ds = RELU.backward(d, &cache.up_shuffled)?;
            let dpre = pixel_unshuffle(&ds, self.arch.factor)?;
            let cg = conv2d_backward(&dpre, &cache.up_in, &self.upsample)?;
            set(&mut g.upsample, cg.weight, cg.bias);
            Ok(cg.input)
        };
        if n_lr == self.blocks.len() {
            d = up_grad(&d, &mut g)?;
        }
        for i in (0..self.blocks.len()).rev() {
            let b = &self.blocks[i];
            let c = &cache.blocks[i];
            let d2 = RELU.backward(&d, &c.pre2)?;
            let g2 = conv2d_backward(&d2, &c.a1, &b.conv2)?;
            let d1 = RELU.backward(&g2.input, &c.pre1)?;
            let g1 = conv2d_backward(&d1, &c.input, &b.conv1)?;
            set(&mut g.blocks[i].conv2, g2.weight, g2.bias);
            set(&mut g.blocks[i].conv1, g1.weight, g1.bias);
            d.add_assign(&g1.input)?;
            if i == n_lr {
                d = up_grad(&d, &mut g)?;
            }
        }

        let mg = conv2d_backward(&d, &cache.merge_in, &self.merge)?;
        set(&mut g.merge, mg.weight, mg.bias);
        let parts = mg.input.split_channels(&[self.arch.width, self.arch.encoder_width])?;

        // Encoder branch (its input P y does not depend on the parameters).
        let mut de = parts[1].clone();
        for k in (0..3).rev() {
            let dpre = RELU.backward(&de, &cache.enc_pre[k])?;
            if k == 0 {
                let (w, b) = conv2d_param_grad(&dpre, &cache.enc_in[0], &self.encoder[0])?;
                set(&mut g.encoder[0], w, b);
            } else {
                let cg = conv2d_backward(&dpre, &cache.enc_in[k], &self.encoder[k])?;
                set(&mut g.encoder[k], cg.weight, cg.bias);
                de = cg.input;
            }
        }

        // Fusion and per-frame branch.
        let d2 = RELU.backward(&parts[0], &cache.fuse_pre[1])?;
        let f2 = conv2d_backward(&d2, &cache.fuse_out, &self.fuse[1])?;
        set(&mut g.fuse[1], f2.weight, f2.bias);
        let d1 = RELU.backward(&f2.input, &cache.fuse_pre[0])?;
        let f1 = conv2d_backward(&d1, &cache.cat, &self.fuse[0])?;
        set(&mut g.fuse[0], f1.weight, f1.bias);
        let counts = vec![self.arch.width; self.arch.frames()];
        let per_frame = f1.input.split_channels(&counts)?;
        for (i, dg) in per_frame.iter().enumerate() {
            let dpre = RELU.backward(dg, &cache.frame_pre[i])?;
            let (w, b) = conv2d_param_grad(&dpre, &window[i], &self.frame_convs[i])?;
            set(&mut g.frame_convs[i], w, b);
        }
        Ok(g)
    }
}

fn set(p: &mut ConvParams, weight: Tensor, bias: Option<Tensor>) {
    p.weight = weight;
    p.bias = bias;
}

#[derive(Clone, Debug, Default)]
pub struct BlockCache {
    input: Tensor,
    pre1: Tensor,
    a1: Tensor,
    pre2: Tensor,
}

/// Intermediate activations kept by [`SrModel::forward_cached`].
#[derive(Clone, Debug, Default)]
pub struct Cache {
    frame_pre: Vec<Tensor>,
    cat: Tensor,
    fuse_pre: [Tensor; 2],
    fuse_out: Tensor,
    enc_in: Vec<Tensor>,
    enc_pre: Vec<Tensor>,
    merge_in: Tensor,
    blocks: Vec<BlockCache>,
    up_in: Tensor,
    up_shuffled: Tensor,
    last_in: Tensor,
}

impl Parameters for SrModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, p) in self.frame_convs.iter().enumerate() {
            v.extend(prefixed(&format!("frame{i}"), p.params()));
        }
        for (i, p) in self.fuse.iter().enumerate() {
            v.extend(prefixed(&format!("fuse{i}"), p.params()));
        }
        for (i, p) in self.encoder.iter().enumerate() {
            v.extend(prefixed(&format!("encoder{i}"), p.params()));
        }
        v.extend(prefixed("merge", self.merge.params()));
        for (i, b) in self.blocks.iter().enumerate() {
            v.extend(prefixed(&format!("block{i}.conv1"), b.conv1.params()));
            v.extend(prefixed(&format!("block{i}.conv2"), b.conv2.params()));
        }
        v.extend(prefixed("upsample", self.upsample.params()));
        v.extend(prefixed("last", self.last.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = Vec::new();
        for (i, p) in self.frame_convs.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("frame{i}"), p.params_mut()));
        }
        for (i, p) in self.fuse.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("fuse{i}"), p.params_mut()));
        }
        for (i, p) in self.encoder.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("encoder{i}"), p.params_mut()));
        }
        v.extend(prefixed_mut("merge", self.merge.params_mut()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.extend(prefixed_mut(&format!("block{i}.conv1"), b.conv1.params_mut()));
            v.extend(prefixed_mut(&format!("block{i}.conv2"), b.conv2.params_mut()));
        }
        v.extend(prefixed_mut("upsample", self.upsample.params_mut()));
        v.extend(prefixed_mut("last", self.last.params_mut()));
        v
    }
}

/// `f + P(y − A f)`, equal to `(I − P A) f + P y`.
pub fn affine_project(
    f_out: &Tensor,
    y_center: &Tensor,
    op: &DegradationOperator,
    pinv: &dyn PseudoInverse,
) -> Result<Tensor> {
    let residual = y_center.sub(&op.apply(f_out)?)?;
    f_out.add(&pinv.apply(&residual)?)
}

/// End-to-end inference: predict ω from the kernel, then run the generator.
pub fn sr_forward(
    window: &[Tensor],
    kernel: &GaussianKernel,
    model: &SrModel,
    hypernet: &HyperNetwork,
    pca: &KernelPca,
) -> Result<Tensor> {
    if hypernet.target.factor != model.arch.factor {
        return Err(Error::invalid(format!(
            "hyper-network predicts factor {} but the model is factor {}",
            hypernet.target.factor, model.arch.factor
        )));
    }
    if let Ok(sigmas) = crate::degradation::bank_sigmas(model.arch.factor) {
        let (lo, hi) = (sigmas[0], sigmas[sigmas.len() - 1]);
        if kernel.sigma() < lo - 1e-9 || kernel.sigma() > hi + 1e-9 {
            log::warn!(
                "σ = {} lies outside the kernel bank range [{lo}, {hi}]; the predicted pseudo-inverse is an extrapolation",
                kernel.sigma()
            );
        }
    }
    let on_support = kernel.with_size(pca.kernel_size)?;
    let pinv = hypernet.predict(&pca.project(&on_support)?)?;
    let op = DegradationOperator::new(model.arch.factor, kernel.clone())?;
    model.forward(window, &op, &pinv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degradation::{materialize_a, pinv_oracle};
    use crate::gradcheck::{grad_check, FnObjective, GradCheckOptions};
    use crate::pinv::LearnedPseudoInverse;
    use rand::Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn window(arch: &SrArch, h: usize, w: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..arch.frames())
            .map(|_| random(vec![arch.channels, h, w], &mut rng))
            .collect()
    }

    fn tiny(factor: usize) -> SrArch {
        SrArch {
            factor,
            radius: 1,
            channels: 1,
            n_blocks: 3,
            width: 3,
            encoder_width: 2,
            affine: true,
        }
    }

    #[test]
    fn shuffle_placement() {
        assert_eq!(SrArch::paper(2).shuffle_before(), 10);
        assert_eq!(SrArch::paper(2).lr_blocks(), 9);
        assert_eq!(SrArch::desk(2).shuffle_before(), 2);
        assert_eq!(SrArch::desk(2).lr_blocks(), 1);
    }

    #[test]
    fn concat_width_at_paper_defaults() {
        let m = SrModel::zeros(SrArch::paper(2)).unwrap();
        assert_eq!(m.fuse[0].dims().1, 320);
    }

    #[test]
    fn output_dims_scale_with_factor() {
        for f in [2, 3, 4] {
            let arch = SrArch::desk(f);
            let m = SrModel::init(arch, 1).unwrap();
            let op = DegradationOperator::from_sigma(f, 1.0).unwrap();
            let pinv = LearnedPseudoInverse::replicate(1, f, 2 * f + 1).unwrap();
            let out = m.forward(&window(&arch, 4, 5, 2), &op, &pinv).unwrap();
            assert_eq!(out.shape(), &[1, 4 * f, 5 * f]);
        }
    }

    #[test]
    fn zero_weights_give_zero_trunk() {
        let arch = SrArch::desk(2);
        let m = SrModel::zeros(arch).unwrap();
        let enc = m.encoder_forward(&Tensor::full(vec![1, 8, 8], 0.5)).unwrap();
        assert_eq!(enc.shape(), &[8, 4, 4]);
        assert_eq!(enc.max_abs(), 0.0);
        let out = m.f_theta_forward(&window(&arch, 4, 4, 1), &enc).unwrap();
        assert_eq!(out.shape(), &[1, 8, 8]);
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn zero_residual_block_is_identity() {
        let arch = SrArch::desk(2);
        let m = SrModel::zeros(arch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(vec![16, 4, 4], &mut rng);
        let out = m.block_forward(&m.blocks[0], x.clone(), None).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn zero_output_projects_to_pinv_of_y() {
        let arch = SrArch::desk(2);
        let m = SrModel::zeros(arch).unwrap();
        let op = DegradationOperator::from_sigma(2, 1.0).unwrap();
        let mut pinv = LearnedPseudoInverse::zeros(1, 2, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        pinv.omega.weight = random(vec![4, 1, 5, 5], &mut rng);
        let w = window(&arch, 4, 4, 5);
        let out = m.forward(&w, &op, &pinv).unwrap();
        assert_eq!(out, pinv.apply(&w[2]).unwrap());
    }

    #[test]
    fn true_image_is_a_fixed_point() {
        let op = DegradationOperator::from_sigma(2, 1.0).unwrap();
        let p = pinv_oracle(&materialize_a(&op, 8, 8).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(vec![1, 8, 8], &mut rng);
        let y = op.apply(&x).unwrap();
        let g = affine_project(&x, &y, &op, &p).unwrap();
        assert!(g.sub(&x).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn projection_is_data_consistent_with_oracle() {
        let op = DegradationOperator::from_sigma(2, 1.0).unwrap();
        let p = pinv_oracle(&materialize_a(&op, 16, 16).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let y = op.apply(&random(vec![1, 16, 16], &mut rng)).unwrap();
        for _ in 0..5 {
            let f = random(vec![1, 16, 16], &mut rng);
            let g = affine_project(&f, &y, &op, &p).unwrap();
            let r = op.apply(&g).unwrap().sub(&y).unwrap().max_abs() / y.max_abs();
            assert!(r < 1e-6, "{r}");
        }
    }

    #[test]
    fn frame_order_matters() {
        let arch = SrArch::desk(2);
        let m = SrModel::init(arch, 8).unwrap();
        let op = DegradationOperator::from_sigma(2, 1.0).unwrap();
        let pinv = LearnedPseudoInverse::replicate(1, 2, 5).unwrap();
        let w = window(&arch, 4, 4, 9);
        let mut rev = w.clone();
        rev.reverse();
        let a = m.forward(&w, &op, &pinv).unwrap();
        let b = m.forward(&rev, &op, &pinv).unwrap();
        assert!(a.sub(&b).unwrap().max_abs() > 1e-6);
        rev.reverse();
        assert_eq!(m.forward(&rev, &op, &pinv).unwrap(), a);
    }

    #[test]
    fn rejects_wrong_window() {
        let arch = SrArch::desk(2);
        let m = SrModel::init(arch, 1).unwrap();
        let op = DegradationOperator::from_sigma(2, 1.0).unwrap();
        let pinv = LearnedPseudoInverse::replicate(1, 2, 5).unwrap();
        let mut w = window(&arch, 4, 4, 1);
        w.pop();
        assert!(m.forward(&w, &op, &pinv).is_err());
        let op3 = DegradationOperator::from_sigma(3, 1.0).unwrap();
        assert!(m.forward(&window(&arch, 4, 4, 1), &op3, &pinv).is_err());
    }

    fn check_gradients(arch: SrArch, seed: u64) {
        let mut model = SrModel::init(arch, seed).unwrap();
        let f = arch.factor;
        let mut brng = ChaCha8Rng::seed_from_u64(seed + 3);
        for (name, t) in model.params_mut() {
            if name.ends_with("bias") {
                *t = random(t.shape().to_vec(), &mut brng).scale(0.1);
            }
        }
        let op = DegradationOperator::from_sigma(f, 0.9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let mut pinv = LearnedPseudoInverse::zeros(arch.channels, f, 2 * f + 1).unwrap();
        pinv.omega.weight = random(pinv.omega.weight.shape().to_vec(), &mut rng).scale(0.1);
        let w = window(&arch, 3, 4, seed + 2);
        let target = random(vec![arch.channels, 3 * f, 4 * f], &mut rng);
        let template = model.clone();
        let value = |t: &[Tensor]| {
            let mut m = template.clone();
            m.load_tensors(t)?;
            let out = m.forward(&w, &op, &pinv)?;
            Ok(out.sub(&target)?.sum_sq())
        };
        let grad = |t: &[Tensor]| {
            let mut m = template.clone();
            m.load_tensors(t)?;
            let (out, cache) = m.forward_cached(&w, &op, &pinv)?;
            let d = out.sub(&target)?;
            let g = m.backward(&cache, &w, &d.scale(2.0), &op, &pinv)?;
            Ok((d.sum_sq(), g.to_tensors()))
        };
        let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let obj = FnObjective::new(value, grad).with_names(&names);
        let opts = GradCheckOptions {
            probes: 12,
            tolerance: 1e-4,
            ..Default::default()
        };
        let report = grad_check(&obj, &model.to_tensors(), &opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(tiny(2), 10);
    }

    #[test]
    fn gradients_without_projection() {
        check_gradients(
            SrArch {
                affine: false,
                ..tiny(3)
            },
            20,
        );
    }

    #[test]
    fn gradients_without_residual_blocks() {
        check_gradients(SrArch { n_blocks: 0, ..tiny(2) }, 30);
    }
}
