//! Checkpoint directories: `manifest.json` plus one `ASRT1` file per tensor.
//!
//! Tensor files are written first and the manifest last, each atomically, so
//! a reader never sees a manifest that points at missing data. Nothing
//! time-dependent is recorded; equal models give byte-identical directories.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::degradation::KernelPca;
use crate::error::{Error, Result};
use crate::io::raw::{load_tensor, save_tensor};
use crate::io::{missing_or_io, write_atomic};
use crate::network::{DiscArch, Discriminator, SrArch, SrModel};
use crate::optim::Parameters;
use crate::pinv::{HyperNetwork, LearnedPseudoInverse, PinvShape};
use crate::tensor::{DType, Tensor};
use crate::training::{DegradationTable, PinvSource};

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
const FORMAT: &str = "mdvsr-checkpoint-1";

/// Everything a run may produce for one scale factor.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub factor: usize,
    pub seed: u64,
    pub generator: Option<SrModel>,
    pub discriminator: Option<Discriminator>,
    /// Per-σ pseudo-inverses, in ascending σ.
    pub pinvs: Vec<(f64, LearnedPseudoInverse)>,
    pub hypernet: Option<HyperNetwork>,
    pub pca: Option<KernelPca>,
}

impl Checkpoint {
    pub fn new(factor: usize, seed: u64) -> Self {
        Checkpoint {
            factor,
            seed,
            generator: None,
            discriminator: None,
            pinvs: Vec::new(),
            hypernet: None,
            pca: None,
        }
    }

    /// Per-σ table when present, otherwise the hyper-network with its PCA.
    pub fn pinv_source(&self) -> Result<PinvSource> {
        if !self.pinvs.is_empty() {
            return Ok(PinvSource::Table(DegradationTable::from_pinvs(
                self.factor,
                self.pinvs.clone(),
            )?));
        }
        match (&self.hypernet, &self.pca) {
            (Some(net), Some(pca)) => Ok(PinvSource::Hypernet {
                net: net.clone(),
                pca: pca.clone(),
            }),
            _ => Err(Error::MissingInput(
                "checkpoint holds neither pseudo-inverses nor a hyper-network with PCA".into(),
            )),
        }
    }

    pub fn require_generator(&self) -> Result<&SrModel> {
        self.generator
            .as_ref()
            .ok_or_else(|| Error::MissingInput("checkpoint has no generator".into()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PinvMeta {
    sigma: f64,
    kernel_size: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HypernetMeta {
    input_dim: usize,
    hidden: Vec<usize>,
    input_scale: f64,
    output_scale: f64,
    target: PinvShape,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PcaMeta {
    kernel_size: usize,
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    factor: usize,
    seed: u64,
    generator: Option<SrArch>,
    discriminator: Option<DiscArch>,
    pinvs: Vec<PinvMeta>,
    hypernet: Option<HypernetMeta>,
    pca: Option<PcaMeta>,
    tensors: Vec<TensorMeta>,
}

fn file_name(tensor: &str) -> String {
    format!("{tensor}.asrt")
}

fn collect<'a>(prefix: &str, p: &'a impl Parameters, out: &mut Vec<(String, &'a Tensor)>) {
    out.extend(p.params().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
}

pub fn save_checkpoint(dir: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    if let Some(g) = &ck.generator {
        collect("generator", g, &mut tensors);
    }
    if let Some(d) = &ck.discriminator {
        collect("discriminator", d, &mut tensors);
    }
    for (i, (_, p)) in ck.pinvs.iter().enumerate() {
        tensors.push((format!("pinv{i}.weight"), &p.omega.weight));
    }
    if let Some(h) = &ck.hypernet {
        collect("hypernet", h, &mut tensors);
    }
    let eig;
    if let Some(pca) = &ck.pca {
        eig = Tensor::new(vec![pca.eigenvalues.len()], pca.eigenvalues.clone())?;
        tensors.push(("pca.mean".into(), &pca.mean));
        tensors.push(("pca.basis".into(), &pca.basis));
        tensors.push(("pca.eigenvalues".into(), &eig));
    }
    for (name, t) in &tensors {
        save_tensor(dir.join(file_name(name)), t)?;
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        factor: ck.factor,
        seed: ck.seed,
        generator: ck.generator.as_ref().map(|g| g.arch),
        discriminator: ck.discriminator.as_ref().map(Discriminator::arch),
        pinvs: ck
            .pinvs
            .iter()
            .map(|(s, p)| PinvMeta {
                sigma: *s,
                kernel_size: p.kernel_size(),
            })
            .collect(),
        hypernet: ck.hypernet.as_ref().map(|h| HypernetMeta {
            input_dim: h.input_dim(),
            hidden: h.hidden(),
            input_scale: h.input_scale,
            output_scale: h.output_scale,
            target: h.target,
        }),
        pca: ck.pca.as_ref().map(|p| PcaMeta {
            kernel_size: p.kernel_size,
            dim: p.dim(),
        }),
        tensors: tensors
            .iter()
            .map(|(n, t)| TensorMeta {
                name: n.clone(),
                shape: t.shape().to_vec(),
                dtype: t.dtype().code(),
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write_atomic(&dir.join(CHECKPOINT_MANIFEST), json.as_bytes())
}

struct Store {
    tensors: BTreeMap<String, Tensor>,
}

impl Store {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint manifest lacks tensor {name}")))
    }

    fn fill(&mut self, prefix: &str, p: &mut impl Parameters) -> Result<()> {
        for (n, dst) in p.params_mut() {
            let src = self.take(&format!("{prefix}.{n}"))?;
            if src.shape() != dst.shape() {
                return Err(Error::Format(format!(
                    "{prefix}.{n}: stored {:?}, architecture needs {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            *dst = src;
        }
        Ok(())
    }
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| missing_or_io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if m.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", m.format)));
    }
    let mut store = Store {
        tensors: BTreeMap::new(),
    };
    for meta in &m.tensors {
        let t = load_tensor(dir.join(file_name(&meta.name)))?;
        if t.shape() != meta.shape.as_slice() || Some(t.dtype()) != DType::from_code(meta.dtype) {
            return Err(Error::Format(format!(
                "{} does not match its manifest entry",
                meta.name
            )));
        }
        store.tensors.insert(meta.name.clone(), t);
    }
    let mut ck = Checkpoint::new(m.factor, m.seed);
    if let Some(arch) = m.generator {
        let mut g = SrModel::zeros(arch)?;
        store.fill("generator", &mut g)?;
        ck.generator = Some(g);
    }
    if let Some(arch) = &m.discriminator {
        let mut d = Discriminator::zeros(arch)?;
        store.fill("discriminator", &mut d)?;
        ck.discriminator = Some(d);
    }
    for (i, p) in m.pinvs.iter().enumerate() {
        let w = store.take(&format!("pinv{i}.weight"))?;
        let pinv = LearnedPseudoInverse::from_weight(w, m.factor)?;
        if pinv.kernel_size() != p.kernel_size {
            return Err(Error::Format(format!("pinv{i}: kernel size disagrees with manifest")));
        }
        ck.pinvs.push((p.sigma, pinv));
    }
    if let Some(h) = m.hypernet {
        let mut net = HyperNetwork::zeros(h.input_dim, &h.hidden, h.target);
        net.input_scale = h.input_scale;
        net.output_scale = h.output_scale;
        store.fill("hypernet", &mut net)?;
        ck.hypernet = Some(net);
    }
    if let Some(p) = m.pca {
        let pca = KernelPca {
            mean: store.take("pca.mean")?,
            basis: store.take("pca.basis")?,
            eigenvalues: store.take("pca.eigenvalues")?.into_data(),
            kernel_size: p.kernel_size,
        };
        if pca.dim() != p.dim || pca.mean.len() != p.kernel_size * p.kernel_size {
            return Err(Error::Format("PCA tensors disagree with manifest".into()));
        }
        ck.pca = Some(pca);
    }
    if let Some(extra) = store.tensors.keys().next() {
        return Err(Error::Format(format!("manifest lists unused tensor {extra}")));
    }
    Ok(ck)
}
