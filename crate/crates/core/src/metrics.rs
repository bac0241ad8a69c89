//! PSNR and SSIM on 8-bit luminance, and evaluation sweeps over blur levels.

use std::fmt::Write as _;

use crate::degradation::{bank_kernel, bicubic_upsample, DegradationOperator};
use crate::error::{Error, Result};
use crate::network::SrModel;
use crate::tensor::Tensor;
use crate::training::{synth_lr_sequence, PinvSource};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Round to the nearest 8-bit level after clamping to `[0, 1]`, back on the unit scale.
pub fn quantize_8bit(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Luminance, quantized to 8 bits, with `crop` pixels removed from every border.
pub fn prepare(x: &Tensor, crop: usize) -> Result<Tensor> {
    let y = x.luminance()?.map(quantize_8bit);
    let (_, h, w) = y.chw()?;
    if 2 * crop >= h || 2 * crop >= w {
        return Err(Error::shape(
            "metrics",
            format!("crop {crop} leaves nothing of {h}x{w}"),
        ));
    }
    y.crop(crop, crop, h - 2 * crop, w - 2 * crop)
}

fn check_pair(x: &Tensor, x_hat: &Tensor) -> Result<()> {
    if x.shape() != x_hat.shape() {
        return Err(Error::shape(
            "metrics",
            format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        ));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB for unit peak; `+∞` for identical inputs.
pub fn psnr(x: &Tensor, x_hat: &Tensor, crop: usize) -> Result<f64> {
    check_pair(x, x_hat)?;
    let a = prepare(x, crop)?;
    let b = prepare(x_hat, crop)?;
    let mse = a.sub(&b)?.sum_sq() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Mean SSIM over all fully contained windows of two `[1, H, W]` planes
/// with dynamic range 1.
pub fn ssim_plane(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_pair(a, b)?;
    let (c, h, w) = a.chw()?;
    if c != 1 {
        return Err(Error::shape("ssim", format!("{c} channels, expected 1")));
    }
    let n = SSIM_WINDOW;
    if h < n || w < n {
        return Err(Error::shape("ssim", format!("{n}x{n} window exceeds {h}x{w} image")));
    }
    let g = gaussian_window();
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (x, y) = (a.data(), b.data());
    let mut total = 0.0;
    let (oh, ow) = (h - n + 1, w - n + 1);
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..n {
                for v in 0..n {
                    let wt = g[u] * g[v];
                    let k = (i + u) * w + j + v;
                    mx += wt * x[k];
                    my += wt * y[k];
                    sxx += wt * x[k] * x[k];
                    syy += wt * y[k] * y[k];
                    sxy += wt * x[k] * y[k];
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// SSIM on prepared (quantized, cropped) luminance.
pub fn ssim(x: &Tensor, x_hat: &Tensor, crop: usize) -> Result<f64> {
    check_pair(x, x_hat)?;
    ssim_plane(&prepare(x, crop)?, &prepare(x_hat, crop)?)
}

/// One evaluation case: the LR window, the operator that produced it and the HR truth.
pub struct EvalCase<'a> {
    pub window: &'a [Tensor],
    pub op: &'a DegradationOperator,
    pub truth: &'a Tensor,
}

/// Anything that turns an LR window into an HR estimate.
pub trait Upscaler {
    fn name(&self) -> &str;
    fn upscale(&self, case: &EvalCase<'_>) -> Result<Tensor>;
}

/// Bicubic interpolation of the center frame.
pub struct Bicubic;

impl Upscaler for Bicubic {
    fn name(&self) -> &str {
        "bicubic"
    }

    fn upscale(&self, case: &EvalCase<'_>) -> Result<Tensor> {
        bicubic_upsample(&case.window[case.window.len() / 2], case.op.factor())
    }
}

/// Returns the truth; an upper reference row.
pub struct GroundTruth;

impl Upscaler for GroundTruth {
    fn name(&self) -> &str {
        "ground-truth"
    }

    fn upscale(&self, case: &EvalCase<'_>) -> Result<Tensor> {
        Ok(case.truth.clone())
    }
}

/// A generator with its pseudo-inverse source. With `assumed_sigma` set the
/// model always uses that operator, whatever produced the input.
pub struct ModelUpscaler {
    pub name: String,
    pub model: SrModel,
    pub pinvs: PinvSource,
    pub assumed_sigma: Option<f64>,
}

impl Upscaler for ModelUpscaler {
    fn name(&self) -> &str {
        &self.name
    }

    fn upscale(&self, case: &EvalCase<'_>) -> Result<Tensor> {
        let f = self.model.arch.factor;
        let entry = self.pinvs.resolve(f, self.assumed_sigma.unwrap_or(case.op.sigma()))?;
        self.model.forward(case.window, &entry.op, &entry.pinv)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub sigma: f64,
    pub factor: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub crop: usize,
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

impl EvalReport {
    pub fn row(&self, model: &str, sigma: f64) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.model == model && (r.sigma - sigma).abs() < 1e-9)
    }

    /// Aligned table: one line per model, one `PSNR/SSIM` column per σ.
    pub fn to_text(&self) -> String {
        let mut sigmas: Vec<f64> = Vec::new();
        let mut models: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !sigmas.iter().any(|s| (s - r.sigma).abs() < 1e-9) {
                sigmas.push(r.sigma);
            }
            if !models.contains(&r.model.as_str()) {
                models.push(&r.model);
            }
        }
        let name_w = models.iter().map(|m| m.len()).max().unwrap_or(5).max(5);
        let col_w = 16;
        let mut out = String::new();
        let factor = self.rows.first().map_or(0, |r| r.factor);
        let samples = self.rows.first().map_or(0, |r| r.samples);
        let _ = writeln!(
            out,
            "PSNR (dB) / SSIM, factor {factor}, border crop {}, {samples} samples per cell",
            self.crop
        );
        let _ = write!(out, "{:<name_w$}", "model");
        for s in &sigmas {
            let _ = write!(out, " {:>col_w$}", format!("sigma={s:.1}"));
        }
        out.push('\n');
        for m in &models {
            let _ = write!(out, "{m:<name_w$}");
            for s in &sigmas {
                let cell = self
                    .row(m, *s)
                    .map_or("-".to_string(), |r| format!("{}/{:.4}", fmt_db(r.psnr), r.ssim));
                let _ = write!(out, " {cell:>col_w$}");
            }
            out.push('\n');
        }
        out
    }

    /// Comma-separated rows with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,sigma,factor,psnr,ssim,samples,crop\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{},{}",
                r.model,
                r.sigma,
                r.factor,
                fmt_db(r.psnr),
                r.ssim,
                r.samples,
                self.crop
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub factor: usize,
    pub radius: usize,
    pub sigmas: Vec<f64>,
    /// Border crop; the factor when `None`.
    pub crop: Option<usize>,
    /// Compute SSIM as well (needs at least 11×11 after cropping).
    pub with_ssim: bool,
}

/// Degrade every full window of every test video with each σ, upscale with
/// every model and average PSNR / SSIM per (model, σ).
pub fn evaluate(upscalers: &[&dyn Upscaler], videos: &[Vec<Tensor>], settings: &EvalSettings) -> Result<EvalReport> {
    let f = settings.factor;
    let crop = settings.crop.unwrap_or(f);
    let frames = 2 * settings.radius + 1;
    let mut rows = Vec::new();
    for &sigma in &settings.sigmas {
        let kernel = bank_kernel(f, sigma)?;
        let op = DegradationOperator::new(f, kernel.clone())?;
        let mut cases = Vec::new();
        for v in videos {
            for t in settings.radius..v.len().saturating_sub(settings.radius) {
                let hr = &v[t - settings.radius..=t + settings.radius];
                cases.push((v[t].clone(), synth_lr_sequence(hr, &kernel, f)?));
            }
        }
        if cases.is_empty() {
            return Err(Error::invalid(format!("no test video has {frames} frames")));
        }
        for u in upscalers {
            let (mut p_sum, mut s_sum) = (0.0, 0.0);
            for (truth, window) in &cases {
                let case = EvalCase { window, op: &op, truth };
                let out = u.upscale(&case)?;
                p_sum += psnr(truth, &out, crop)?;
                if settings.with_ssim {
                    s_sum += ssim(truth, &out, crop)?;
                }
            }
            let n = cases.len() as f64;
            rows.push(EvalRow {
                model: u.name().to_string(),
                sigma,
                factor: f,
                psnr: p_sum / n,
                ssim: if settings.with_ssim { s_sum / n } else { f64::NAN },
                samples: cases.len(),
            });
        }
    }
    Ok(EvalReport { rows, crop })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let x = random(vec![1, 16, 16], 1);
        assert_eq!(psnr(&x, &x, 2).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_offset() {
        let x = Tensor::from_fn(vec![1, 12, 12], |i| ((i * 37) % 200) as f64 / 255.0);
        let y = x.map(|v| v + 16.0 / 255.0);
        let expect = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
        assert!((psnr(&x, &y, 2).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 24.0483).abs() < 1e-3);
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let x = random(vec![1, 10, 9], 2);
        let y = random(vec![1, 10, 9], 3);
        let q = |v: f64| (v * 255.0).round();
        let mut se = 0.0;
        for r in 1..9 {
            for c in 1..8 {
                let d = q(x.data()[r * 9 + c]) - q(y.data()[r * 9 + c]);
                se += d * d;
            }
        }
        let expect = 10.0 * (255.0f64 * 255.0 / (se / 56.0)).log10();
        assert!((psnr(&x, &y, 1).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn psnr_uses_luminance() {
        let x = random(vec![3, 8, 8], 4);
        let y = random(vec![3, 8, 8], 5);
        let lx = x.luminance().unwrap();
        let ly = y.luminance().unwrap();
        assert_eq!(psnr(&x, &y, 0).unwrap(), psnr(&lx, &ly, 0).unwrap());
    }

    #[test]
    fn ssim_identity_and_symmetry() {
        let x = random(vec![1, 20, 20], 6);
        let y = random(vec![1, 20, 20], 7);
        assert!((ssim(&x, &x, 2).unwrap() - 1.0).abs() < 1e-9);
        assert!((ssim(&x, &y, 2).unwrap() - ssim(&y, &x, 2).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_checkerboard_is_not_positive() {
        let x = Tensor::from_fn(vec![1, 16, 16], |i| ((i / 16 + i % 16) % 2) as f64);
        let y = x.map(|v| 1.0 - v);
        assert!(ssim(&x, &y, 0).unwrap() <= 0.0);
    }

    #[test]
    fn ssim_constant_images_reduce_to_luminance_term() {
        let (m1, m2) = (100.0 / 255.0, 120.0 / 255.0);
        let x = Tensor::full(vec![1, 12, 12], m1);
        let y = Tensor::full(vec![1, 12, 12], m2);
        let c1 = SSIM_K1 * SSIM_K1;
        let expect = (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
        assert!((ssim(&x, &y, 0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let x = random(vec![1, 12, 12], 8);
        assert!(ssim(&x, &x, 1).is_err());
    }

    #[test]
    fn report_layout() {
        let report = EvalReport {
            rows: vec![
                EvalRow {
                    model: "bicubic".into(),
                    sigma: 0.5,
                    factor: 2,
                    psnr: 30.0,
                    ssim: 0.9,
                    samples: 3,
                },
                EvalRow {
                    model: "ground-truth".into(),
                    sigma: 0.5,
                    factor: 2,
                    psnr: f64::INFINITY,
                    ssim: 1.0,
                    samples: 3,
                },
            ],
            crop: 2,
        };
        let text = report.to_text();
        assert!(text.contains("30.0000/0.9000"));
        assert!(text.contains("inf/1.0000"));
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("ground-truth,0.5,2,inf,1.000000,3,2"));
    }

    #[test]
    fn evaluate_reference_rows() {
        use crate::degradation::DegradationOperator as Op;
        use crate::pinv::LearnedPseudoInverse;
        use crate::training::{synth_video, DegradationTable, SynthConfig};
        let video = synth_video(&SynthConfig {
            height: 16,
            width: 16,
            frames: 6,
            ..Default::default()
        })
        .unwrap();
        let arch = crate::network::SrArch::desk(2);
        let sigmas = vec![0.6, 1.2];
        let pinvs = sigmas
            .iter()
            .map(|&s| (s, LearnedPseudoInverse::zeros(1, 2, 5).unwrap()))
            .collect();
        let model = ModelUpscaler {
            name: "model".into(),
            model: SrModel::init(arch.clone(), 1).unwrap(),
            pinvs: PinvSource::Table(DegradationTable::from_pinvs(2, pinvs).unwrap()),
            assumed_sigma: None,
        };
        let settings = EvalSettings {
            factor: 2,
            radius: 2,
            sigmas: sigmas.clone(),
            crop: None,
            with_ssim: true,
        };
        let ups: [&dyn Upscaler; 3] = [&Bicubic, &GroundTruth, &model];
        let report = evaluate(&ups, &[video.clone()], &settings).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert_eq!(report.crop, 2);
        for &s in &sigmas {
            let gt = report.row("ground-truth", s).unwrap();
            assert_eq!(gt.psnr, f64::INFINITY);
            assert!((gt.ssim - 1.0).abs() < 1e-9);
            assert_eq!(gt.samples, 2);
            let bic = report.row("bicubic", s).unwrap();
            assert!(bic.psnr.is_finite() && (-1.0..=1.0).contains(&bic.ssim));
            assert!(report.row("model", s).unwrap().psnr.is_finite());
        }
        assert!(report.row("bicubic", 0.6).unwrap().psnr > report.row("bicubic", 1.2).unwrap().psnr);
        assert_eq!(report, evaluate(&ups, &[video.clone()], &settings).unwrap());

        // A bicubic row computed by hand for the first window.
        let op = Op::new(2, bank_kernel(2, 0.6).unwrap()).unwrap();
        let (mut sum, mut n) = (0.0, 0.0);
        for t in 2..4 {
            let up = bicubic_upsample(&op.apply(&video[t]).unwrap(), 2).unwrap();
            sum += psnr(&video[t], &up, 2).unwrap();
            n += 1.0;
        }
        assert!((report.row("bicubic", 0.6).unwrap().psnr - sum / n).abs() < 1e-12);
    }

    mod props {
        use super::{psnr, random, ssim, ChaCha8Rng, SeedableRng, Tensor};
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn psnr_strictly_decreases_with_noise(seed in 0u64..1000, t1 in 0.0f64..0.1, gap in 0.01f64..0.1) {
                // Mid-range image and ±1 noise keep clamping out of play, and a
                // gap above 2/255 moves every pixel by at least one 8-bit level.
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::from_fn(vec![1, 12, 12], |_| rng.random_range(0.3..0.5));
                let signs = Tensor::from_fn(vec![1, 12, 12], |_| if rng.random_bool(0.5) { 1.0 } else { -1.0 });
                let t2 = t1 + gap;
                let y1 = x.zip_map(&signs, "noise", |a, s| a + t1 * s).unwrap();
                let y2 = x.zip_map(&signs, "noise", |a, s| a + t2 * s).unwrap();
                prop_assert!(psnr(&x, &y1, 1).unwrap() > psnr(&x, &y2, 1).unwrap());
            }

            #[test]
            fn ssim_is_symmetric_and_bounded(seed in 0u64..1000, mix in 0.0f64..1.0) {
                let x = random(vec![1, 14, 14], seed);
                let n = random(vec![1, 14, 14], seed + 1);
                let y = x.zip_map(&n, "mix", |a, b| (1.0 - mix) * a + mix * b).unwrap();
                let a = ssim(&x, &y, 1).unwrap();
                let b = ssim(&y, &x, 1).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&a));
            }
        }
    }
}
