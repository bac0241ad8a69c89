//! Training objectives: pixel losses, a frozen convolutional feature loss,
//! the adversarial pair and their weighted combinations. Every loss has a
//! `_grad` companion returning the gradient with respect to the generated
//! image (or the discriminator outputs).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::resample::reflect;
use crate::error::{Error, Result};
use crate::layers::{avg_pool2, avg_pool2_backward, conv2d, conv2d_input_grad, Activation, ConvParams};
use crate::network::{DiscCache, Discriminator};
use crate::tensor::Tensor;

pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;
pub const DEFAULT_FEATURE_WIDTHS: [usize; 2] = [16, 32];

/// Largest Sobel gradient magnitude on an image with values in `[0, 1]`.
pub const SOBEL_MAX: f64 = 4.0 * std::f64::consts::SQRT_2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Mse,
    Combined,
    CombinedSmooth,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Weight of the feature term.
    pub alpha: f64,
    /// Weight of the adversarial term.
    pub beta: f64,
    pub charbonnier_eps: f64,
    pub mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::smooth_perceptual()
    }
}

impl LossConfig {
    pub fn mse() -> Self {
        LossConfig {
            mode: LossMode::Mse,
            ..Self::smooth_perceptual()
        }
    }

    /// Feature-dominated objective without edge weighting.
    pub fn feature_gan() -> Self {
        LossConfig {
            alpha: 0.998,
            beta: 0.001,
            charbonnier_eps: DEFAULT_CHARBONNIER_EPS,
            mode: LossMode::Combined,
        }
    }

    /// Pixel-dominated objective with the Sobel-weighted pixel term.
    pub fn smooth_perceptual() -> Self {
        LossConfig {
            alpha: 0.049,
            beta: 0.001,
            charbonnier_eps: DEFAULT_CHARBONNIER_EPS,
            mode: LossMode::CombinedSmooth,
        }
    }

    pub fn pixel_weight(&self) -> f64 {
        1.0 - self.alpha - self.beta
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.charbonnier_eps > 0.0) {
            return Err(Error::Config(format!(
                "charbonnier_eps must be positive, got {}",
                self.charbonnier_eps
            )));
        }
        if self.mode != LossMode::Mse && !(self.alpha > 0.0 && self.beta > 0.0 && self.alpha + self.beta < 1.0) {
            return Err(Error::Config(format!(
                "loss weights need alpha, beta > 0 and alpha + beta < 1 (alpha = {}, beta = {})",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("charbonnier eps must be positive, got {eps}")));
    }
    Ok(())
}

/// Mean squared difference.
pub fn mse_loss(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    same_shape("mse_loss", x, x_hat)?;
    Ok(x_hat.sub(x)?.sum_sq() / x.len() as f64)
}

/// MSE and its gradient with respect to `x_hat`.
pub fn mse_loss_grad(x: &Tensor, x_hat: &Tensor) -> Result<(f64, Tensor)> {
    same_shape("mse_loss", x, x_hat)?;
    let n = x.len() as f64;
    let d = x_hat.sub(x)?;
    Ok((d.sum_sq() / n, d.scale(2.0 / n)))
}

/// `Σ √((u − v)² + ε²)`.
pub fn charbonnier(u: &Tensor, v: &Tensor, eps: f64) -> Result<f64> {
    Ok(weighted_charbonnier_grad(u, v, None, eps)?.0)
}

/// Charbonnier loss and its gradient with respect to `u`.
pub fn charbonnier_grad(u: &Tensor, v: &Tensor, eps: f64) -> Result<(f64, Tensor)> {
    weighted_charbonnier_grad(u, v, None, eps)
}

/// `Σ m_i √((u_i − v_i)² + ε²)` with a per-pixel weight map broadcast over channels.
pub fn weighted_charbonnier(u: &Tensor, v: &Tensor, weight: &Tensor, eps: f64) -> Result<f64> {
    Ok(weighted_charbonnier_grad(u, v, Some(weight), eps)?.0)
}

pub fn weighted_charbonnier_grad(u: &Tensor, v: &Tensor, weight: Option<&Tensor>, eps: f64) -> Result<(f64, Tensor)> {
    same_shape("charbonnier", u, v)?;
    check_eps(eps)?;
    let plane = match weight {
        Some(m) => {
            let (_, h, w) = u.chw()?;
            if m.shape() != [1, h, w] {
                return Err(Error::shape(
                    "weighted_charbonnier",
                    format!("weight {:?} for image {:?}", m.shape(), u.shape()),
                ));
            }
            h * w
        }
        None => 1,
    };
    // Accumulated as ε·Σm + Σ m·(r − ε), with r − ε = d² / (r + ε), so equal
    // inputs give exactly N·ε.
    let e2 = eps * eps;
    let mut mass = 0.0;
    let mut excess = 0.0;
    let mut grad = u.zeros_like();
    for (i, ((a, b), g)) in u.data().iter().zip(v.data()).zip(grad.data_mut()).enumerate() {
        let m = weight.map_or(1.0, |m| m.data()[i % plane]);
        let d = a - b;
        let r = (d * d + e2).sqrt();
        mass += m;
        excess += m * d * d / (r + eps);
        *g = m * d / r;
    }
    Ok((eps * mass + excess, grad))
}

/// `M(x) = 1 − min(1, |∇x| / (4√2))` on the luminance of `x`, with 3×3 Sobel
/// kernels and reflect padding. Returns `[1, H, W]`.
pub fn sobel_weight(x: &Tensor) -> Result<Tensor> {
    let lum = x.luminance()?;
    let (_, h, w) = lum.chw()?;
    let px = |y: isize, x: isize| lum.data()[reflect(y, h) * w + reflect(x, w)];
    Ok(Tensor::from_fn(vec![1, h, w], |i| {
        let (y, x) = ((i / w) as isize, (i % w) as isize);
        let gx = (px(y - 1, x + 1) + 2.0 * px(y, x + 1) + px(y + 1, x + 1))
            - (px(y - 1, x - 1) + 2.0 * px(y, x - 1) + px(y + 1, x - 1));
        let gy = (px(y + 1, x - 1) + 2.0 * px(y + 1, x) + px(y + 1, x + 1))
            - (px(y - 1, x - 1) + 2.0 * px(y - 1, x) + px(y - 1, x + 1));
        1.0 - ((gx * gx + gy * gy).sqrt() / SOBEL_MAX).min(1.0)
    }))
}

/// Frozen convolutional feature extractor: stages of
/// `[conv3×3, ReLU, conv3×3, ReLU, avg-pool 2×]`, tapped after each stage.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureExtractor {
    stages: Vec<[ConvParams; 2]>,
}

#[derive(Clone, Debug, Default)]
struct FeatureCache {
    // Per stage: input, first pre-activation, first activation, second pre-activation.
    stages: Vec<[Tensor; 4]>,
}

const RELU: Activation = Activation::Relu;

impl FeatureExtractor {
    /// He-initialized from `seed`, zero biases.
    pub fn new(channels: usize, widths: &[usize], seed: u64) -> Result<Self> {
        if channels == 0 || widths.is_empty() || widths.contains(&0) {
            return Err(Error::invalid("feature extractor needs positive widths"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut c_in = channels;
        let mut stages = Vec::with_capacity(widths.len());
        for &w in widths {
            let a = ConvParams::same(w, c_in, 3, true).init_he(1.0, &mut rng);
            let b = ConvParams::same(w, w, 3, true).init_he(1.0, &mut rng);
            stages.push([a, b]);
            c_in = w;
        }
        Ok(FeatureExtractor { stages })
    }

    pub fn with_defaults(channels: usize, seed: u64) -> Result<Self> {
        Self::new(channels, &DEFAULT_FEATURE_WIDTHS, seed)
    }

    /// Wrap externally supplied weights.
    pub fn from_stages(stages: Vec<[ConvParams; 2]>) -> Result<Self> {
        if stages.is_empty() {
            return Err(Error::invalid("feature extractor needs at least one stage"));
        }
        for s in &stages {
            for c in s {
                let (_, _, k, _) = c.dims();
                if k % 2 == 0 || c.stride != 1 || c.pad != k / 2 {
                    return Err(Error::invalid(
                        "feature convolutions must be odd-sized and size-preserving",
                    ));
                }
            }
        }
        Ok(FeatureExtractor { stages })
    }

    pub fn stages(&self) -> &[[ConvParams; 2]] {
        &self.stages
    }

    /// Feature maps at every tap.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.forward_cached(x)?.0)
    }

    fn forward_cached(&self, x: &Tensor) -> Result<(Vec<Tensor>, FeatureCache)> {
        let mut taps = Vec::with_capacity(self.stages.len());
        let mut cache = FeatureCache::default();
        let mut h = x.clone();
        for [a, b] in &self.stages {
            let pre1 = conv2d(&h, a)?;
            let a1 = RELU.forward(&pre1);
            let pre2 = conv2d(&a1, b)?;
            let pooled = avg_pool2(&RELU.forward(&pre2))?;
            cache.stages.push([h, pre1, a1, pre2]);
            taps.push(pooled.clone());
            h = pooled;
        }
        Ok((taps, cache))
    }

    /// Input gradient given the gradient at every tap.
    fn backward(&self, cache: &FeatureCache, tap_grads: &[Tensor]) -> Result<Tensor> {
        let mut d: Option<Tensor> = None;
        for i in (0..self.stages.len()).rev() {
            let mut g = tap_grads[i].clone();
            if let Some(prev) = d.take() {
                g.add_assign(&prev)?;
            }
            let [input, pre1, a1, pre2] = &cache.stages[i];
            let [a, b] = &self.stages[i];
            let g = avg_pool2_backward(&g, pre2.shape())?;
            let g = RELU.backward(&g, pre2)?;
            let (_, h, w) = a1.chw()?;
            let g = conv2d_input_grad(&g, (h, w), b)?;
            let g = RELU.backward(&g, pre1)?;
            let (_, h, w) = input.chw()?;
            d = Some(conv2d_input_grad(&g, (h, w), a)?);
        }
        Ok(d.expect("at least one stage"))
    }
}

/// Charbonnier distance between the feature maps of `x` and `x_hat`, summed over taps.
pub fn feature_loss(x: &Tensor, x_hat: &Tensor, fe: &FeatureExtractor, eps: f64) -> Result<f64> {
    same_shape("feature_loss", x, x_hat)?;
    let fx = fe.features(x)?;
    let fy = fe.features(x_hat)?;
    let mut total = 0.0;
    for (a, b) in fx.iter().zip(&fy) {
        total += charbonnier(b, a, eps)?;
    }
    Ok(total)
}

/// Feature loss and its gradient with respect to `x_hat`.
pub fn feature_loss_grad(x: &Tensor, x_hat: &Tensor, fe: &FeatureExtractor, eps: f64) -> Result<(f64, Tensor)> {
    same_shape("feature_loss", x, x_hat)?;
    let fx = fe.features(x)?;
    let (fy, cache) = fe.forward_cached(x_hat)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(fy.len());
    for (a, b) in fx.iter().zip(&fy) {
        let (l, g) = charbonnier_grad(b, a, eps)?;
        total += l;
        grads.push(g);
    }
    Ok((total, fe.backward(&cache, &grads)?))
}

fn check_probs(op: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(Error::invalid(format!("{op}: empty batch")));
    }
    if let Some(v) = p.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(Error::invalid(format!("{op}: discriminator output {v} outside (0, 1)")));
    }
    Ok(())
}

/// Discriminator objective `−log d(x) − log(1 − d(x̂))`, averaged over the batch.
pub fn gan_d_loss(d_real: &[f64], d_fake: &[f64]) -> Result<f64> {
    Ok(gan_d_loss_grad(d_real, d_fake)?.0)
}

/// Loss and its derivatives with respect to each `d_real` and `d_fake` entry.
pub fn gan_d_loss_grad(d_real: &[f64], d_fake: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_probs("gan_d_loss", d_real)?;
    check_probs("gan_d_loss", d_fake)?;
    let (nr, nf) = (d_real.len() as f64, d_fake.len() as f64);
    let loss =
        -d_real.iter().map(|p| p.ln()).sum::<f64>() / nr - d_fake.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / nf;
    let gr = d_real.iter().map(|p| -1.0 / (p * nr)).collect();
    let gf = d_fake.iter().map(|p| 1.0 / ((1.0 - p) * nf)).collect();
    Ok((loss, gr, gf))
}

/// Generator objective `−log(d / (1 − d))`, averaged over the batch.
pub fn gan_g_loss(d_fake: &[f64]) -> Result<f64> {
    Ok(gan_g_loss_grad(d_fake)?.0)
}

pub fn gan_g_loss_grad(d_fake: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_probs("gan_g_loss", d_fake)?;
    let n = d_fake.len() as f64;
    let loss = -d_fake.iter().map(|p| (p / (1.0 - p)).ln()).sum::<f64>() / n;
    let g = d_fake.iter().map(|p| -1.0 / (p * (1.0 - p) * n)).collect();
    Ok((loss, g))
}

/// The three weighted parts of the generator objective, unweighted.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeneratorTerms {
    pub pixel: f64,
    pub feature: f64,
    pub adversarial: f64,
    pub total: f64,
    /// Discriminator output on the generated image.
    pub d_fake: f64,
}

/// Generator objective for one sample and its gradient with respect to `x_hat`.
///
/// In `Mse` mode only the pixel term is used and it is the mean squared error.
/// Otherwise `α·feature + β·adversarial + (1−α−β)·pixel`, with the pixel term
/// weighted by [`sobel_weight`] of `x` in `CombinedSmooth` mode.
pub fn generator_loss_grad(
    x: &Tensor,
    x_hat: &Tensor,
    disc: &Discriminator,
    fe: &FeatureExtractor,
    cfg: &LossConfig,
) -> Result<(GeneratorTerms, Tensor)> {
    cfg.validate()?;
    if cfg.mode == LossMode::Mse {
        let (l, g) = mse_loss_grad(x, x_hat)?;
        return Ok((
            GeneratorTerms {
                pixel: l,
                total: l,
                ..Default::default()
            },
            g,
        ));
    }
    let mask = match cfg.mode {
        LossMode::CombinedSmooth => Some(sobel_weight(x)?),
        _ => None,
    };
    let (pixel, mut grad) = weighted_charbonnier_grad(x_hat, x, mask.as_ref(), cfg.charbonnier_eps)?;
    grad = grad.scale(cfg.pixel_weight());
    let (feature, fg) = feature_loss_grad(x, x_hat, fe, cfg.charbonnier_eps)?;
    grad.axpy(cfg.alpha, &fg)?;
    let cache: DiscCache = disc.forward_cached(x_hat)?;
    let d_fake = cache.prob();
    let (adversarial, dg) = gan_g_loss_grad(&[d_fake])?;
    let (_, dx) = disc.backward(&cache, dg[0])?;
    grad.axpy(cfg.beta, &dx)?;
    let total = cfg.alpha * feature + cfg.beta * adversarial + cfg.pixel_weight() * pixel;
    Ok((
        GeneratorTerms {
            pixel,
            feature,
            adversarial,
            total,
            d_fake,
        },
        grad,
    ))
}

pub fn generator_loss(
    x: &Tensor,
    x_hat: &Tensor,
    disc: &Discriminator,
    fe: &FeatureExtractor,
    cfg: &LossConfig,
) -> Result<GeneratorTerms> {
    Ok(generator_loss_grad(x, x_hat, disc, fe, cfg)?.0)
}

/// `α·feature + β·adversarial + (1−α−β)·charbonnier` on a generated image.
pub fn total_loss(
    x: &Tensor,
    x_hat: &Tensor,
    disc: &Discriminator,
    fe: &FeatureExtractor,
    cfg: &LossConfig,
) -> Result<f64> {
    let cfg = LossConfig {
        mode: LossMode::Combined,
        ..cfg.clone()
    };
    Ok(generator_loss(x, x_hat, disc, fe, &cfg)?.total)
}

/// As [`total_loss`] with the pixel term weighted by `M(x)`.
pub fn total_smooth_loss(
    x: &Tensor,
    x_hat: &Tensor,
    disc: &Discriminator,
    fe: &FeatureExtractor,
    cfg: &LossConfig,
) -> Result<f64> {
    let cfg = LossConfig {
        mode: LossMode::CombinedSmooth,
        ..cfg.clone()
    };
    Ok(generator_loss(x, x_hat, disc, fe, &cfg)?.total)
}
