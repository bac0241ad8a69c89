//! Procedural video: drifting blobs, gratings and soft-edged rectangles over
//! a smooth background, values in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            height: 64,
            width: 64,
            frames: 9,
            objects: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
enum Shape {
    Blob {
        radius: f64,
    },
    Rect {
        half_h: f64,
        half_w: f64,
        softness: f64,
    },
    Grating {
        freq: f64,
        angle: f64,
        phase_rate: f64,
        radius: f64,
    },
}

#[derive(Clone, Debug)]
struct Object {
    shape: Shape,
    y: f64,
    x: f64,
    vy: f64,
    vx: f64,
    amplitude: f64,
}

impl Object {
    fn value(&self, t: f64, py: f64, px: f64) -> f64 {
        let dy = py - (self.y + self.vy * t);
        let dx = px - (self.x + self.vx * t);
        let v = match self.shape {
            Shape::Blob { radius } => (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp(),
            Shape::Rect {
                half_h,
                half_w,
                softness,
            } => {
                let sy = 1.0 / (1.0 + ((dy.abs() - half_h) / softness).exp());
                let sx = 1.0 / (1.0 + ((dx.abs() - half_w) / softness).exp());
                sy * sx
            }
            Shape::Grating {
                freq,
                angle,
                phase_rate,
                radius,
            } => {
                let u = dx * angle.cos() + dy * angle.sin();
                let envelope = (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp();
                0.5 * (1.0 + (freq * u + phase_rate * t).sin()) * envelope
            }
        };
        self.amplitude * v
    }
}

/// A sequence of `[1, H, W]` frames.
pub fn synth_video(cfg: &SynthConfig) -> Result<Vec<Tensor>> {
    if cfg.height == 0 || cfg.width == 0 || cfg.frames == 0 {
        return Err(Error::invalid("synthetic video needs non-zero dimensions"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let scale = h.min(w);
    let base = rng.random_range(0.2..0.5);
    let gy = rng.random_range(-0.2..0.2) / h;
    let gx = rng.random_range(-0.2..0.2) / w;
    let objects: Vec<Object> = (0..cfg.objects)
        .map(|_| {
            let shape = match rng.random_range(0..3) {
                0 => Shape::Blob {
                    radius: rng.random_range(0.03..0.15) * scale,
                },
                1 => Shape::Rect {
                    half_h: rng.random_range(0.05..0.2) * scale,
                    half_w: rng.random_range(0.05..0.2) * scale,
                    softness: rng.random_range(0.3..1.5),
                },
                _ => Shape::Grating {
                    freq: rng.random_range(0.3..1.2),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                    phase_rate: rng.random_range(-0.5..0.5),
                    radius: rng.random_range(0.1..0.3) * scale,
                },
            };
            Object {
                shape,
                y: rng.random_range(0.0..h),
                x: rng.random_range(0.0..w),
                vy: rng.random_range(-1.5..1.5),
                vx: rng.random_range(-1.5..1.5),
                amplitude: rng.random_range(-0.5..0.6),
            }
        })
        .collect();

    Ok((0..cfg.frames)
        .map(|t| {
            let t = t as f64;
            Tensor::from_fn(vec![1, cfg.height, cfg.width], |i| {
                let py = (i / cfg.width) as f64;
                let px = (i % cfg.width) as f64;
                let mut v = base + gy * py + gx * px;
                for o in &objects {
                    v += o.value(t, py, px);
                }
                v.clamp(0.0, 1.0)
            })
        })
        .collect())
}

/// Independent random crops of size `size × size` from the frames of
/// several synthetic videos, for training and testing the pseudo-inverse.
pub fn synth_patches(count: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = (2 * size).max(32);
    let mut out = Vec::with_capacity(count);
    let mut video_seed = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    while out.len() < count {
        video_seed = video_seed.wrapping_add(1);
        let video = synth_video(&SynthConfig {
            height: frame,
            width: frame,
            frames: 4,
            objects: 10,
            seed: video_seed,
        })?;
        for f in &video {
            if out.len() == count {
                break;
            }
            let top = rng.random_range(0..=frame - size);
            let left = rng.random_range(0..=frame - size);
            out.push(f.crop(top, left, size, size)?);
        }
    }
    Ok(out)
}
