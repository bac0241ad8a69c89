//! Run configuration: one TOML file covering data synthesis, pseudo-inverse
//! and hyper-network fitting, generator training and evaluation.
//!
//! Sections left out take the paper-scale or desk-scale preset for the
//! configured factor; the top-level `seed` and `factor` override the ones
//! inside sections.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradation::bank_sigmas;
use crate::error::{Error, Result};
use crate::io::{missing_or_io, write_atomic};
use crate::network::{DiscArch, SrArch};
use crate::pinv::{HypernetTrainConfig, PinvTrainConfig};
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Training record set written by `synth`.
    pub data: Option<PathBuf>,
    /// Directory of test videos (one sub-directory of frames per video).
    pub test: Option<PathBuf>,
    /// Checkpoint to start from.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub train_videos: usize,
    pub test_videos: usize,
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: usize,
}

impl SynthSection {
    pub fn paper() -> Self {
        SynthSection {
            train_videos: 32,
            test_videos: 4,
            height: 128,
            width: 128,
            frames: 9,
            objects: 12,
        }
    }

    pub fn desk() -> Self {
        SynthSection {
            train_videos: 4,
            test_videos: 2,
            height: 32,
            width: 32,
            frames: 7,
            objects: 6,
        }
    }
}

impl Default for SynthSection {
    fn default() -> Self {
        Self::paper()
    }
}

/// Pseudo-inverse fitting: `patches` synthetic HR images of `patch_size`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PinvSection {
    pub patches: usize,
    pub patch_size: usize,
    /// σ values to fit; the factor's bank when absent. `0` is pure bicubic.
    pub sigmas: Option<Vec<f64>>,
    pub train: PinvTrainConfig,
}

impl PinvSection {
    pub fn paper() -> Self {
        PinvSection {
            patches: 64,
            patch_size: 48,
            sigmas: None,
            train: PinvTrainConfig::default(),
        }
    }

    pub fn desk(factor: usize) -> Self {
        PinvSection {
            patches: 16,
            patch_size: if factor == 3 { 18 } else { 16 },
            sigmas: None,
            train: PinvTrainConfig {
                steps: 400,
                ..PinvTrainConfig::default()
            },
        }
    }
}

impl Default for PinvSection {
    fn default() -> Self {
        Self::paper()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Test σ values; the factor's bank when absent.
    pub sigmas: Option<Vec<f64>>,
    /// Border crop; the factor when absent.
    pub crop: Option<usize>,
    pub ssim: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            sigmas: None,
            crop: None,
            ssim: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub factor: usize,
    /// Desk-scale presets for every section left out.
    pub desk: bool,
    pub paths: PathsSection,
    pub synth: Option<SynthSection>,
    pub pinv: Option<PinvSection>,
    pub hypernet: Option<HypernetTrainConfig>,
    pub model: Option<SrArch>,
    pub discriminator: Option<DiscArch>,
    pub train: Option<TrainConfig>,
    pub eval: Option<EvalSection>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            factor: 2,
            desk: false,
            paths: PathsSection::default(),
            synth: None,
            pinv: None,
            hypernet: None,
            model: None,
            discriminator: None,
            train: None,
            eval: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, String)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| missing_or_io(path, e))?;
        Ok((Self::from_toml(&text)?, text))
    }

    /// Every section filled in, with the top-level seed and factor pushed down.
    pub fn effective(&self) -> Result<RunConfig> {
        let f = self.factor;
        let d = self.desk;
        let mut c = self.clone();
        c.synth
            .get_or_insert_with(|| if d { SynthSection::desk() } else { SynthSection::paper() });
        let pinv = c
            .pinv
            .get_or_insert_with(|| if d { PinvSection::desk(f) } else { PinvSection::paper() });
        pinv.train.seed = self.seed;
        let hyper = c.hypernet.get_or_insert_with(|| {
            if d {
                HypernetTrainConfig {
                    steps: 1500,
                    ..HypernetTrainConfig::desk()
                }
            } else {
                HypernetTrainConfig::default()
            }
        });
        hyper.seed = self.seed;
        let model = c
            .model
            .get_or_insert_with(|| if d { SrArch::desk(f) } else { SrArch::paper(f) });
        model.factor = f;
        let channels = model.channels;
        let radius = model.radius;
        c.discriminator.get_or_insert_with(|| {
            if d {
                DiscArch::desk(channels)
            } else {
                DiscArch::paper(channels)
            }
        });
        let train = c
            .train
            .get_or_insert_with(|| if d { TrainConfig::desk(f) } else { TrainConfig::paper(f) });
        train.factor = f;
        train.seed = self.seed;
        train.radius = radius;
        train.desk = d;
        c.eval.get_or_insert_with(EvalSection::default);
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !matches!(self.factor, 2..=4) {
            return bad(format!("factor must be 2, 3 or 4 (got {})", self.factor));
        }
        if let Some(t) = &self.train {
            t.validate()?;
        }
        if let (Some(m), Some(dc)) = (&self.model, &self.discriminator) {
            if m.channels != dc.channels {
                return bad("model and discriminator channel counts differ".into());
            }
        }
        if let Some(s) = &self.synth {
            let frames = 2 * self.model.map_or(2, |m| m.radius) + 1;
            if s.frames < frames {
                return bad(format!(
                    "synth.frames {} is shorter than a {frames}-frame window",
                    s.frames
                ));
            }
        }
        if let Some(p) = &self.pinv {
            if p.patches == 0 || p.patch_size % self.factor != 0 {
                return bad("pinv needs patches and a patch_size divisible by the factor".into());
            }
        }
        Ok(())
    }

    pub fn pinv_sigmas(&self) -> Result<Vec<f64>> {
        match self.pinv.as_ref().and_then(|p| p.sigmas.clone()) {
            Some(s) => Ok(s),
            None => bank_sigmas(self.factor),
        }
    }

    pub fn eval_sigmas(&self) -> Result<Vec<f64>> {
        match self.eval.as_ref().and_then(|e| e.sigmas.clone()) {
            Some(s) => Ok(s),
            None => bank_sigmas(self.factor),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Write the effective configuration and, when given, the input text verbatim.
    pub fn echo(&self, dir: &Path, input: Option<&str>) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        if let Some(text) = input {
            write_atomic(&dir.join("config.input.toml"), text.as_bytes())?;
        }
        write_atomic(&dir.join("config.toml"), self.to_toml()?.as_bytes())
    }
}
