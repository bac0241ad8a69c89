//! Command implementations behind the `mdvsr` binary.
//!
//! Every command reads an effective [`RunConfig`], writes its artifacts into
//! one output directory together with the echoed configuration and a
//! `run.log`, and reports failures through [`Error`] categories. Commands
//! chain through that directory: `synth` writes `data/` and `test/`,
//! `learn-pinv` and later stages read and update `checkpoint/`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::checks::{gradient_suite, invariant_suite, run_gradient_suite};
use crate::degradation::{bank_kernel, bank_sigmas, kernel_bank, pca_fit, DegradationOperator, DEFAULT_PCA_DIM};
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckOptions;
use crate::io::{
    load_checkpoint, load_dataset, load_image, save_checkpoint, save_dataset, save_image, write_atomic, Checkpoint,
    Dataset, RunConfig,
};
use crate::losses::FeatureExtractor;
use crate::metrics::{evaluate, Bicubic, EvalReport, EvalSettings, ModelUpscaler, Upscaler};
use crate::network::{Discriminator, SrModel};
use crate::pinv::{pinv_residuals, train_hypernet, train_pinv, PinvShape};
use crate::tensor::Tensor;
use crate::training::{build_records, synth_patches, synth_video, train_gan, train_mse, DegradationTable, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    Synth,
    LearnPinv,
    TrainHypernet,
    Train,
    FinetuneGan,
    /// Upscale one window of `2l + 1` frames, oldest first.
    Sr {
        inputs: Vec<PathBuf>,
    },
    Eval,
    Gradcheck {
        corrupt: bool,
    },
    Selftest,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::LearnPinv => "learn-pinv",
            Command::TrainHypernet => "train-hypernet",
            Command::Train => "train",
            Command::FinetuneGan => "finetune-gan",
            Command::Sr { .. } => "sr",
            Command::Eval => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Selftest => "selftest",
        }
    }
}

/// A fully resolved command invocation.
#[derive(Clone, Debug)]
pub struct Invocation {
    pub command: Command,
    /// Effective configuration (see [`RunConfig::effective`]).
    pub config: RunConfig,
    /// Text of the configuration file, echoed verbatim when present.
    pub config_text: Option<String>,
    pub out: PathBuf,
    /// Blur σ for `sr`, or the only σ for `learn-pinv` and `eval`.
    pub sigma: Option<f64>,
}

pub const DATA_DIR: &str = "data";
pub const TEST_DIR: &str = "test";
pub const CHECKPOINT_DIR: &str = "checkpoint";

const TAG_TRAIN_VIDEO: u64 = 0x7472_6169_6e00;
const TAG_TEST_VIDEO: u64 = 0x7465_7374_0000;
const TAG_PINV_PATCHES: u64 = 0x7069_6e76_0000;
const TAG_MODEL: u64 = 0x6d6f_6465_6c00;
const TAG_DISC: u64 = 0x6469_7363_0000;
const TAG_FEATURES: u64 = 0x6665_6174_0000;

fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    seed ^ tag ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

struct RunLog {
    file: std::fs::File,
    start: Instant,
}

impl RunLog {
    fn open(out: &Path, inv: &Invocation) -> Result<Self> {
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("run.log"))?;
        let mut log = RunLog {
            file,
            start: Instant::now(),
        };
        log.line(&format!(
            "{} {} command={} seed={} factor={} desk={}",
            env!("CARGO_PKG_NAME"),
            env!("CARGO_PKG_VERSION"),
            inv.command.name(),
            inv.config.seed,
            inv.config.factor,
            inv.config.desk
        ))?;
        Ok(log)
    }

    fn line(&mut self, msg: &str) -> Result<()> {
        log::info!("{msg}");
        writeln!(self.file, "[{:>9.3}s] {msg}", self.start.elapsed().as_secs_f64())?;
        Ok(())
    }
}

/// What a successful command produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub summary: String,
    pub outputs: Vec<PathBuf>,
}

pub fn run(inv: &Invocation) -> Result<Outcome> {
    let out = &inv.out;
    std::fs::create_dir_all(out)?;
    inv.config.echo(out, inv.config_text.as_deref())?;
    let mut log = RunLog::open(out, inv)?;
    let t0 = Instant::now();
    let result = match &inv.command {
        Command::Synth => synth(inv, &mut log),
        Command::LearnPinv => learn_pinv(inv, &mut log),
        Command::TrainHypernet => fit_hypernet(inv, &mut log),
        Command::Train => train(inv, &mut log),
        Command::FinetuneGan => finetune_gan(inv, &mut log),
        Command::Sr { inputs } => super_resolve(inv, inputs, &mut log),
        Command::Eval => eval(inv, &mut log).map(|(o, _)| o),
        Command::Gradcheck { corrupt } => gradcheck(inv, *corrupt, &mut log),
        Command::Selftest => selftest(inv, &mut log),
    };
    let secs = t0.elapsed().as_secs_f64();
    match &result {
        Ok(o) => log.line(&format!("done in {secs:.3}s: {}", o.summary))?,
        Err(e) => log.line(&format!("failed after {secs:.3}s: {e}"))?,
    }
    result
}

fn data_dir(inv: &Invocation) -> PathBuf {
    inv.config.paths.data.clone().unwrap_or_else(|| inv.out.join(DATA_DIR))
}

fn checkpoint_dir(inv: &Invocation) -> PathBuf {
    inv.config
        .paths
        .checkpoint
        .clone()
        .unwrap_or_else(|| inv.out.join(CHECKPOINT_DIR))
}

fn load_or_new_checkpoint(inv: &Invocation) -> Result<Checkpoint> {
    let dir = checkpoint_dir(inv);
    if dir.join(crate::io::CHECKPOINT_MANIFEST).exists() {
        let ck = load_checkpoint(&dir)?;
        if ck.factor != inv.config.factor {
            return Err(Error::Config(format!(
                "checkpoint is for factor {}, configuration says {}",
                ck.factor, inv.config.factor
            )));
        }
        Ok(ck)
    } else {
        Ok(Checkpoint::new(inv.config.factor, inv.config.seed))
    }
}

fn require_checkpoint(inv: &Invocation) -> Result<Checkpoint> {
    let dir = checkpoint_dir(inv);
    if !dir.join(crate::io::CHECKPOINT_MANIFEST).exists() {
        return Err(Error::MissingInput(format!("no checkpoint at {}", dir.display())));
    }
    load_or_new_checkpoint(inv)
}

fn write_checkpoint(inv: &Invocation, ck: &Checkpoint, log: &mut RunLog) -> Result<PathBuf> {
    let dir = inv.out.join(CHECKPOINT_DIR);
    save_checkpoint(&dir, ck)?;
    log.line(&format!("checkpoint written to {}", dir.display()))?;
    Ok(dir)
}

fn synth_section(inv: &Invocation) -> crate::io::config::SynthSection {
    inv.config.synth.clone().unwrap_or_default()
}

fn video_config(inv: &Invocation, tag: u64, i: usize) -> SynthConfig {
    let s = synth_section(inv);
    SynthConfig {
        height: s.height,
        width: s.width,
        frames: s.frames,
        objects: s.objects,
        seed: derive_seed(inv.config.seed, tag, i as u64),
    }
}

/// Synthetic test videos, regenerated from the configuration.
pub fn synth_test_videos(inv: &Invocation) -> Result<Vec<Vec<Tensor>>> {
    (0..synth_section(inv).test_videos)
        .map(|i| synth_video(&video_config(inv, TAG_TEST_VIDEO, i)))
        .collect()
}

fn synth(inv: &Invocation, log: &mut RunLog) -> Result<Outcome> {
    let s = synth_section(inv);
    let train_cfg = inv.config.train.clone().unwrap_or_default();
    let videos = (0..s.train_videos)
        .map(|i| synth_video(&video_config(inv, TAG_TRAIN_VIDEO, i)))
        .collect::<Result<Vec<_>>>()?;
    let records = build_records(&videos, &train_cfg)?;
    if records.is_empty() {
        return Err(Error::Config(format!(
            "no patch passed the variance threshold {}",
            train_cfg.variance_threshold
        )));
    }
    let n = records.len();
    let data = inv.out.join(DATA_DIR);
    save_dataset(
        &data,
        &Dataset {
            factor: inv.config.factor,
            radius: train_cfg.radius,
            seed: inv.config.seed,
            records,
        },
    )?;
    log.line(&format!("{n} training records from {} videos", s.train_videos))?;
    let test = inv.out.join(TEST_DIR);
    for (i, video) in synth_test_videos(inv)?.iter().enumerate() {
        let dir = test.join(format!("video{i:02}"));
        std::fs::create_dir_all(&dir)?;
        for (t, frame) in video.iter().enumerate() {
            save_image(dir.join(format!("frame{t:03}.pgm")), frame)?;
        }
    }
    log.line(&format!("{} test videos of {} frames", s.test_videos, s.frames))?;
    Ok(Outcome {
        summary: format!("{n} records, {} test videos", s.test_videos),
        outputs: vec![data, test],
    })
}

fn learn_pinv(inv: &Invocation, log: &mut RunLog) -> Result<Outcome> {
    let f = inv.config.factor;
    let section = inv.config.pinv.clone().unwrap_or_default();
    let sigmas = match inv.sigma {
        Some(s) => vec![s],
        None => inv.config.pinv_sigmas()?,
    };
    let images = synth_patches(
        section.patches,
        section.patch_size,
        derive_seed(inv.config.seed, TAG_PINV_PATCHES, 0),
    )?;
    let held_out = synth_patches(
        section.patches.div_ceil(2),
        section.patch_size,
        derive_seed(inv.config.seed, TAG_PINV_PATCHES, 1),
    )?;
    let mut ck = load_or_new_checkpoint(inv)?;
    let mut table = String::from("sigma,train_loss,residual_range,residual_projection\n");
    for &s in &sigmas {
        let op = DegradationOperator::new(f, bank_kernel(f, s)?)?;
        let res = train_pinv(&op, &images, &section.train)?;
        if !res.final_loss.is_finite() {
            return Err(Error::Divergence {
                step: section.train.steps,
                loss: res.final_loss,
            });
        }
        let ys = held_out.iter().map(|x| op.apply(x)).collect::<Result<Vec<_>>>()?;
        let r = pinv_residuals(&res.pinv, &op, &ys)?;
        let _ = writeln!(table, "{s},{:.6e},{:.6e},{:.6e}", res.final_loss, r.range, r.projection);
        log.line(&format!(
            "sigma {s}: loss {:.4e}, held-out residuals {:.4} / {:.4}",
            res.final_loss, r.range, r.projection
        ))?;
        ck.pinvs.retain(|(t, _)| (t - s).abs() > 1e-9);
        ck.pinvs.push((s, res.pinv));
    }
    ck.pinvs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let report = inv.out.join("pinv.csv");
    write_atomic(&report, table.as_bytes())?;
    let dir = write_checkpoint(inv, &ck, log)?;
    Ok(Outcome {
        summary: format!("{} pseudo-inverses", sigmas.len()),
        outputs: vec![dir, report],
    })
}

fn fit_hypernet(inv: &Invocation, log: &mut RunLog) -> Result<Outcome> {
    let f = inv.config.factor;
    let mut ck = require_checkpoint(inv)?;
    let bank = bank_sigmas(f)?;
    let pairs: Vec<_> = ck
        .pinvs
        .iter()
        .filter(|(s, _)| bank.iter().any(|b| (b - s).abs() < 1e-9))
        .cloned()
        .collect();
    if pairs.is_empty() {
        return Err(Error::MissingInput(
            "checkpoint holds no in-bank pseudo-inverses".into(),
        ));
    }
    let pca = pca_fit(&kernel_bank(f)?, DEFAULT_PCA_DIM)?;
    let targets = pairs
        .iter()
        .map(|(s, p)| Ok((pca.project(&bank_kernel(f, *s)?)?, p.omega.weight.clone())))
        .collect::<Result<Vec<_>>>()?;
    let cfg = inv.config.hypernet.clone().unwrap_or_default();
    let res = train_hypernet(&targets, PinvShape::of(&pairs[0].1), &cfg)?;
    if !res.final_mse.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: res.final_mse,
        });
    }
    log.line(&format!(
        "hyper-network on {} kernels: mse {:.4e}",
        pairs.len(),
        res.final_mse
    ))?;
    ck.hypernet = Some(res.net);
    ck.pca = Some(pca);
    let dir = write_checkpoint(inv, &ck, log)?;
    Ok(Outcome {
        summary: format!("hyper-network fitted to {} pseudo-inverses", pairs.len()),
        outputs: vec![dir],
    })
}

fn load_training_set(inv: &Invocation) -> Result<Dataset> {
    let ds = load_dataset(data_dir(inv))?;
    if ds.factor != inv.config.factor {
        return Err(Error::Config(format!(
            "dataset is for factor {}, configuration says {}",
            ds.factor, inv.config.factor
        )));
    }
    Ok(ds)
}

fn table_for(ck: &Checkpoint, ds: &Dataset) -> Result<DegradationTable> {
    let mut sigmas: Vec<f64> = Vec::new();
    for r in &ds.records {
        if !sigmas.iter().any(|s| (s - r.sigma).abs() < 1e-9) {
            sigmas.push(r.sigma);
        }
    }
    DegradationTable::from_source(ck.factor, &sigmas, &ck.pinv_source()?)
}

fn train(inv: &Invocation, log: &mut RunLog) -> Result<Outcome> {
    let ds = load_training_set(inv)?;
    let mut ck = require_checkpoint(inv)?;
    let table = table_for(&ck, &ds)?;
    let cfg = inv.config.train.clone().unwrap_or_default();
    let model = match ck.generator.take() {
        Some(m) => m,
        None => SrModel::init(
            inv.config
                .model
                .ok_or_else(|| Error::Config("no model section".into()))?,
            derive_seed(inv.config.seed, TAG_MODEL, 0),
        )?,
    };
    log.line(&format!(
        "training on {} records for {} epochs",
        ds.records.len(),
        cfg.epochs
    ))?;
    let outcome = train_mse(model, &ds.records, &table, &cfg)?;
    let mut curve = String::from("step,loss\n");
    for (i, l) in outcome.curve.iter().enumerate() {
        let _ = writeln!(curve, "{i},{l:.9e}");
    }
    let curve_path = inv.out.join("train_curve.csv");
    write_atomic(&curve_path, curve.as_bytes())?;
    if let (Some(a), Some(b)) = (outcome.curve.first(), outcome.curve.last()) {
        log.line(&format!("loss {a:.4e} -> {b:.4e} over {} steps", outcome.curve.len()))?;
    }
    ck.generator = Some(outcome.model);
    let dir = write_checkpoint(inv, &ck, log)?;
    Ok(Outcome {
        summary: format!("{} steps", outcome.curve.len()),
        outputs: vec![dir, curve_path],
    })
}

fn finetune_gan(inv: &Invocation, log: &mut RunLog) -> Result<Outcome> {
    let ds = load_training_set(inv)?;
    let mut ck = require_checkpoint(inv)?;
    let model = ck.generator.take().ok_or_else(|| {
        Error::MissingInput("adversarial fine-tuning needs a trained generator in the checkpoint".into())
    })?;
    let table = table_for(&ck, &ds)?;
    let cfg = inv.config.train.clone().unwrap_or_default();
    let disc = match ck.discriminator.take() {
        Some(d) => d,
        None => Discriminator::init(
            inv.config
                .discriminator
                .as_ref()
                .ok_or_else(|| Error::Config("no discriminator section".into()))?,
            derive_seed(inv.config.seed, TAG_DISC, 0),
        )?,
    };
    let fe = FeatureExtractor::with_defaults(model.arch.channels, derive_seed(inv.config.seed, TAG_FEATURES, 0))?;
    let outcome = train_gan(model, disc, &ds.records, &table, &fe, &cfg)?;
    let mut steps = String::from("step,d_loss,g_total,pixel,feature,adversarial,d_real,d_fake,d_min,d_max\n");
    for (i, s) in outcome.steps.iter().enumerate() {
        let _ = writeln!(
            steps,
            "{i},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
            s.d_loss, s.g_total, s.pixel, s.feature, s.adversarial, s.d_real, s.d_fake, s.d_min, s.d_max
        );
    }
    let steps_path = inv.out.join("gan_steps.csv");
    write_atomic(&steps_path, steps.as_bytes())?;
    log.line(&format!("{} alternating steps", outcome.steps.len()))?;
    ck.generator = Some(outcome.model);
    ck.discriminator = Some(outcome.disc);
    let dir = write_checkpoint(inv, &ck, log)?;
    Ok(Outcome {
        summary: format!("{} adversarial steps", outcome.steps.len()),
        outputs: vec![dir, steps_path],
    })
}

fn super_resolve(inv: &Invocation, inputs: &[PathBuf], log: &mut RunLog) -> Result<Outcome> {
    let sigma = inv
        .sigma
        .ok_or_else(|| Error::Config("sr needs --sigma (0 for pure bicubic degradation)".into()))?;
    let ck = require_checkpoint(inv)?;
    let model = ck.require_generator()?;
    let frames = model.arch.frames();
    if inputs.len() != frames {
        return Err(Error::Config(format!(
            "sr needs exactly {frames} input frames, got {}",
            inputs.len()
        )));
    }
    let gray = model.arch.channels == 1;
    let window = inputs.iter().map(|p| load_image(p, gray)).collect::<Result<Vec<_>>>()?;
    let entry = ck.pinv_source()?.resolve(ck.factor, sigma)?;
    let hr = model.forward(&window, &entry.op, &entry.pinv)?;
    let ext = inputs[frames / 2]
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .filter(|e| e == "png")
        .unwrap_or_else(|| if gray { "pgm".into() } else { "ppm".into() });
    let path = inv.out.join(format!("sr.{ext}"));
    save_image(&path, &hr)?;
    let (_, h, w) = hr.chw()?;
    log.line(&format!("wrote {}x{} image to {}", w, h, path.display()))?;
    Ok(Outcome {
        summary: format!("{w}x{h} output"),
        outputs: vec![path],
    })
}

/// Frames of every video sub-directory of `dir`, in name order.
pub fn load_video_dirs(dir: &Path, luminance: bool) -> Result<Vec<Vec<Tensor>>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| crate::io::missing_or_io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut videos = Vec::with_capacity(dirs.len());
    for d in dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&d)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| crate::io::image::ImageFormat::from_path(p).is_ok())
            .collect();
        files.sort();
        videos.push(
            files
                .iter()
                .map(|p| load_image(p, luminance))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if videos.is_empty() {
        return Err(Error::MissingInput(format!(
            "no video directories in {}",
            dir.display()
        )));
    }
    Ok(videos)
}

/// Runs the evaluation sweep and writes `report.txt` / `report.csv`.
fn eval(inv: &Invocation, log: &mut RunLog) -> Result<(Outcome, EvalReport)> {
    let ck = require_checkpoint(inv)?;
    let model = ck.require_generator()?.clone();
    let gray = model.arch.channels == 1;
    let videos = match &inv.config.paths.test {
        Some(dir) => load_video_dirs(dir, gray)?,
        None if inv.out.join(TEST_DIR).is_dir() => load_video_dirs(&inv.out.join(TEST_DIR), gray)?,
        None => synth_test_videos(inv)?,
    };
    let section = inv.config.eval.clone().unwrap_or_default();
    let sigmas = match inv.sigma {
        Some(s) => vec![s],
        None => inv.config.eval_sigmas()?,
    };
    let settings = EvalSettings {
        factor: inv.config.factor,
        radius: model.arch.radius,
        sigmas,
        crop: section.crop,
        with_ssim: section.ssim,
    };
    let upscaler = ModelUpscaler {
        name: if model.arch.affine {
            "model".into()
        } else {
            "model (no projection)".into()
        },
        model,
        pinvs: ck.pinv_source()?,
        assumed_sigma: None,
    };
    let ups: [&dyn Upscaler; 2] = [&Bicubic, &upscaler];
    let report = evaluate(&ups, &videos, &settings)?;
    let (txt, csv) = (inv.out.join("report.txt"), inv.out.join("report.csv"));
    write_atomic(&txt, report.to_text().as_bytes())?;
    write_atomic(&csv, report.to_csv().as_bytes())?;
    log.line(&report.to_text())?;
    Ok((
        Outcome {
            summary: format!("{} rows over {} videos", report.rows.len(), videos.len()),
            outputs: vec![txt, csv],
        },
        report,
    ))
}

fn gradcheck(inv: &Invocation, corrupt: bool, log: &mut RunLog) -> Result<Outcome> {
    let cases = gradient_suite(inv.config.seed)?;
    let opts = GradCheckOptions::default();
    let results = run_gradient_suite(&cases, &opts, corrupt.then_some(1.01))?;
    let mut text = String::new();
    let mut failed = Vec::new();
    for (name, kind, r) in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        let _ = writeln!(text, "{status} {name} ({kind:?}): max rel err {:.3e}", r.max_rel_err());
        if !r.passed() {
            failed.push(name.clone());
        }
    }
    let path = inv.out.join("gradcheck.txt");
    write_atomic(&path, text.as_bytes())?;
    log.line(&text)?;
    if !failed.is_empty() {
        return Err(Error::CheckFailed(format!(
            "{} of {} gradient checks failed: {}",
            failed.len(),
            results.len(),
            failed.join(", ")
        )));
    }
    Ok(Outcome {
        summary: format!("{} gradient checks passed", results.len()),
        outputs: vec![path],
    })
}

fn selftest(inv: &Invocation, log: &mut RunLog) -> Result<Outcome> {
    let mut text = String::new();
    let mut failed = Vec::new();
    for r in invariant_suite(inv.config.seed)? {
        let _ = writeln!(
            text,
            "{} {} {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed {
            failed.push(r.name);
        }
    }
    let opts = GradCheckOptions {
        probes: 20,
        ..Default::default()
    };
    let cases = gradient_suite(inv.config.seed)?;
    for (name, _, r) in run_gradient_suite(&cases, &opts, None)? {
        let ok = r.passed();
        let _ = writeln!(
            text,
            "{} gradient {name} {:.3e}",
            if ok { "PASS" } else { "FAIL" },
            r.max_rel_err()
        );
        if !ok {
            failed.push(format!("gradient {name}"));
        }
    }
    let path = inv.out.join("selftest.txt");
    write_atomic(&path, text.as_bytes())?;
    log.line(&text)?;
    if !failed.is_empty() {
        return Err(Error::CheckFailed(failed.join(", ")));
    }
    Ok(Outcome {
        summary: "all invariants hold".into(),
        outputs: vec![path],
    })
}
