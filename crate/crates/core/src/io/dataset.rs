//! Training record sets on disk: stacked `hr.asrt` / `lr.asrt` plus a JSON
//! manifest carrying the scale factor, seed and per-record σ.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::raw::{load_tensor, save_tensor};
use crate::io::{missing_or_io, write_atomic};
use crate::tensor::Tensor;
use crate::training::SampleRecord;

pub const DATASET_MANIFEST: &str = "dataset.json";
const FORMAT: &str = "mdvsr-dataset-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub factor: usize,
    pub radius: usize,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordMeta {
    sigma: f64,
    kernel_id: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    factor: usize,
    radius: usize,
    seed: u64,
    records: Vec<RecordMeta>,
}

fn stack(parts: &[&Tensor], lead: &[usize]) -> Result<Tensor> {
    let inner = parts[0].shape().to_vec();
    let mut data = Vec::with_capacity(parts.len() * parts[0].len());
    for p in parts {
        if p.shape() != inner.as_slice() {
            return Err(Error::shape("save_dataset", format!("{:?} vs {:?}", p.shape(), inner)));
        }
        data.extend_from_slice(p.data());
    }
    let mut shape = lead.to_vec();
    shape.extend(inner);
    Tensor::new(shape, data)
}

fn unstack(t: &Tensor, lead: usize) -> Result<Vec<Tensor>> {
    let n: usize = t.shape()[..lead].iter().product();
    let inner = t.shape()[lead..].to_vec();
    let m: usize = inner.iter().product();
    (0..n)
        .map(|i| Tensor::new(inner.clone(), t.data()[i * m..(i + 1) * m].to_vec()))
        .collect()
}

pub fn save_dataset(dir: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    if ds.records.is_empty() {
        return Err(Error::invalid("refusing to write an empty dataset"));
    }
    std::fs::create_dir_all(dir)?;
    let frames = 2 * ds.radius + 1;
    let n = ds.records.len();
    let hr: Vec<&Tensor> = ds.records.iter().map(|r| &r.hr).collect();
    let mut lr = Vec::with_capacity(n * frames);
    for r in &ds.records {
        if r.lr.len() != frames {
            return Err(Error::shape(
                "save_dataset",
                format!("{} LR frames, radius needs {frames}", r.lr.len()),
            ));
        }
        lr.extend(r.lr.iter());
    }
    save_tensor(dir.join("hr.asrt"), &stack(&hr, &[n])?)?;
    save_tensor(dir.join("lr.asrt"), &stack(&lr, &[n, frames])?)?;
    let m = Manifest {
        format: FORMAT.into(),
        factor: ds.factor,
        radius: ds.radius,
        seed: ds.seed,
        records: ds
            .records
            .iter()
            .map(|r| RecordMeta {
                sigma: r.sigma,
                kernel_id: r.kernel_id,
            })
            .collect(),
    };
    let mut json = serde_json::to_string_pretty(&m).map_err(|e| Error::Format(e.to_string()))?;
    json.push('\n');
    write_atomic(&dir.join(DATASET_MANIFEST), json.as_bytes())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let mpath = dir.join(DATASET_MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| missing_or_io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if m.format != FORMAT {
        return Err(Error::Format(format!("unknown dataset format {:?}", m.format)));
    }
    let hr = load_tensor(dir.join("hr.asrt"))?;
    let lr = load_tensor(dir.join("lr.asrt"))?;
    let n = m.records.len();
    let frames = 2 * m.radius + 1;
    if hr.rank() != 4 || hr.shape()[0] != n || lr.rank() != 5 || lr.shape()[..2] != [n, frames] {
        return Err(Error::Format(format!(
            "dataset tensors {:?} / {:?} do not hold {n} records of {frames} frames",
            hr.shape(),
            lr.shape()
        )));
    }
    let hrs = unstack(&hr, 1)?;
    let mut lrs = unstack(&lr, 2)?.into_iter();
    let records = m
        .records
        .iter()
        .zip(hrs)
        .map(|(meta, hr)| SampleRecord {
            hr,
            lr: lrs.by_ref().take(frames).collect(),
            sigma: meta.sigma,
            kernel_id: meta.kernel_id,
        })
        .collect();
    Ok(Dataset {
        factor: m.factor,
        radius: m.radius,
        seed: m.seed,
        records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::{build_records, synth_video, SynthConfig, TrainConfig};

    #[test]
    fn round_trip() {
        let video = synth_video(&SynthConfig {
            height: 24,
            width: 24,
            frames: 6,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            patch_size: 8,
            patch_attempts: 6,
            variance_threshold: 0.0,
            ..TrainConfig::desk(2)
        };
        let ds = Dataset {
            factor: 2,
            radius: 2,
            seed: 9,
            records: build_records(&[video], &cfg).unwrap(),
        };
        assert_eq!(ds.records.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn missing_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingInput(_))));
        let empty = Dataset {
            factor: 2,
            radius: 2,
            seed: 0,
            records: vec![],
        };
        assert!(save_dataset(dir.path(), &empty).is_err());
    }
}
