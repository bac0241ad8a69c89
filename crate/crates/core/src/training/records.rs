//! Training samples: HR patches with their degraded LR windows.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradation::{bank_kernel, DegradationOperator, GaussianKernel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::training::TrainConfig;

/// One training example: the HR center patch and the LR window around it,
/// all frames degraded by the same operator.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// `[C, P, P]`
    pub hr: Tensor,
    /// `2l + 1` frames of `[C, P/f, P/f]`, oldest first.
    pub lr: Vec<Tensor>,
    pub sigma: f64,
    /// Index of `sigma` in the configured σ choices.
    pub kernel_id: usize,
}

impl SampleRecord {
    pub fn center(&self) -> &Tensor {
        &self.lr[self.lr.len() / 2]
    }
}

/// Degrade every HR frame with one shared operator.
pub fn synth_lr_sequence(hr_frames: &[Tensor], kernel: &GaussianKernel, factor: usize) -> Result<Vec<Tensor>> {
    let op = DegradationOperator::new(factor, kernel.clone())?;
    hr_frames.iter().map(|x| op.apply(x)).collect()
}

/// Population variance over all entries.
pub fn patch_variance(x: &Tensor) -> f64 {
    let mean = x.mean();
    x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64
}

/// Random HR crops of one video, filtered by the variance of the center
/// patch, each paired with an LR window degraded by a σ drawn uniformly from
/// the configured choices. `cfg.patch_attempts` crops are drawn.
pub fn sample_patches(video: &[Tensor], cfg: &TrainConfig) -> Result<Vec<SampleRecord>> {
    sample_patches_seeded(video, cfg, cfg.seed)
}

pub(crate) fn sample_patches_seeded(video: &[Tensor], cfg: &TrainConfig, seed: u64) -> Result<Vec<SampleRecord>> {
    let frames = 2 * cfg.radius + 1;
    if video.len() < frames {
        return Err(Error::invalid(format!(
            "video has {} frames, a window needs {frames}",
            video.len()
        )));
    }
    let (_, h, w) = video[0].chw()?;
    let p = cfg.patch_size;
    if h < p || w < p {
        return Err(Error::invalid(format!(
            "{h}x{w} frames are smaller than {p}x{p} patches"
        )));
    }
    let sigmas = cfg.sigma_choices()?;
    let kernels = sigmas
        .iter()
        .map(|&s| bank_kernel(cfg.factor, s))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..cfg.patch_attempts {
        let t = rng.random_range(cfg.radius..video.len() - cfg.radius);
        let top = rng.random_range(0..=h - p);
        let left = rng.random_range(0..=w - p);
        let center = video[t].crop(top, left, p, p)?;
        if patch_variance(&center) < cfg.variance_threshold {
            continue;
        }
        let kernel_id = rng.random_range(0..sigmas.len());
        let crops = (t - cfg.radius..=t + cfg.radius)
            .map(|i| video[i].crop(top, left, p, p))
            .collect::<Result<Vec<_>>>()?;
        let lr = synth_lr_sequence(&crops, &kernels[kernel_id], cfg.factor)?;
        out.push(SampleRecord {
            hr: center,
            lr,
            sigma: sigmas[kernel_id],
            kernel_id,
        });
    }
    Ok(out)
}

/// Records sampled from several videos, each with its own derived seed, in a
/// seeded shuffled order.
pub fn build_records(videos: &[Vec<Tensor>], cfg: &TrainConfig) -> Result<Vec<SampleRecord>> {
    let mut out = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        let seed = cfg
            .seed
            .wrapping_add((i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        out.extend(sample_patches_seeded(v, cfg, seed)?);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    Ok(out)
}
