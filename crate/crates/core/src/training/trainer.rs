//! MSE pre-training and adversarial fine-tuning of the generator.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::degradation::{bank_kernel, DegradationOperator, KernelPca};
use crate::error::{Error, Result};
use crate::losses::{gan_d_loss_grad, generator_loss_grad, mse_loss_grad, FeatureExtractor, LossMode};
use crate::network::{Discriminator, SrModel};
use crate::optim::{AdamConfig, AdamState, Parameters};
use crate::pinv::{HyperNetwork, LearnedPseudoInverse, PseudoInverse};
use crate::tensor::Tensor;
use crate::training::{lr_schedule, SampleRecord, Schedule, TrainConfig};

/// An operator and the pseudo-inverse used with it.
#[derive(Clone, Debug)]
pub struct TableEntry {
    pub op: DegradationOperator,
    pub pinv: LearnedPseudoInverse,
}

/// Operators and pseudo-inverses for the σ values a dataset uses.
#[derive(Clone, Debug, Default)]
pub struct DegradationTable {
    entries: Vec<TableEntry>,
}

const SIGMA_MATCH: f64 = 1e-9;

impl DegradationTable {
    /// One entry per `(σ, P)` pair, with the operator on the bank support.
    pub fn from_pinvs(factor: usize, pinvs: Vec<(f64, LearnedPseudoInverse)>) -> Result<Self> {
        let entries = pinvs
            .into_iter()
            .map(|(s, pinv)| {
                if pinv.factor() != factor {
                    return Err(Error::invalid(format!(
                        "pseudo-inverse for σ = {s} has factor {}, expected {factor}",
                        pinv.factor()
                    )));
                }
                Ok(TableEntry {
                    op: DegradationOperator::new(factor, bank_kernel(factor, s)?)?,
                    pinv,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DegradationTable { entries })
    }

    /// Pseudo-inverses predicted by the hyper-network from each kernel's PCA code.
    pub fn from_hypernet(factor: usize, sigmas: &[f64], net: &HyperNetwork, pca: &KernelPca) -> Result<Self> {
        let mut pinvs = Vec::with_capacity(sigmas.len());
        for &s in sigmas {
            let k = bank_kernel(factor, s)?.with_size(pca.kernel_size)?;
            pinvs.push((s, net.predict(&pca.project(&k)?)?));
        }
        Self::from_pinvs(factor, pinvs)
    }

    /// The entries `source` gives for each σ.
    pub fn from_source(factor: usize, sigmas: &[f64], source: &PinvSource) -> Result<Self> {
        let entries = sigmas
            .iter()
            .map(|&s| source.resolve(factor, s))
            .collect::<Result<Vec<_>>>()?;
        Ok(DegradationTable { entries })
    }

    pub fn entries(&self) -> &[TableEntry] {
        &self.entries
    }

    pub fn sigmas(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.op.sigma()).collect()
    }

    pub fn lookup(&self, sigma: f64) -> Result<&TableEntry> {
        self.entries
            .iter()
            .find(|e| (e.op.sigma() - sigma).abs() < SIGMA_MATCH)
            .ok_or_else(|| Error::MissingInput(format!("no pseudo-inverse for σ = {sigma}")))
    }
}

/// Where a model gets its pseudo-inverse for a given σ.
#[derive(Clone, Debug)]
pub enum PinvSource {
    /// Per-σ pseudo-inverses; only the listed σ values are available.
    Table(DegradationTable),
    /// Predicted from the kernel's PCA code, for any σ.
    Hypernet { net: HyperNetwork, pca: KernelPca },
}

impl PinvSource {
    pub fn resolve(&self, factor: usize, sigma: f64) -> Result<TableEntry> {
        match self {
            PinvSource::Table(t) => {
                let e = t.lookup(sigma)?;
                if e.op.factor() != factor {
                    return Err(Error::invalid(format!(
                        "table holds factor {}, requested {factor}",
                        e.op.factor()
                    )));
                }
                Ok(e.clone())
            }
            PinvSource::Hypernet { net, pca } => Ok(DegradationTable::from_hypernet(factor, &[sigma], net, pca)?
                .entries
                .remove(0)),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SrModel,
    /// Mean batch loss of every step.
    pub curve: Vec<f64>,
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn check_records(records: &[SampleRecord], model: &SrModel) -> Result<()> {
    if records.is_empty() {
        return Err(Error::invalid("training needs at least one record"));
    }
    if records[0].lr.len() != model.arch.frames() {
        return Err(Error::invalid(format!(
            "records hold {} frames, the model expects {}",
            records[0].lr.len(),
            model.arch.frames()
        )));
    }
    Ok(())
}

/// Adam on the per-pixel MSE of the generator output with the step schedule
/// of the MSE phase. The batch gradient is the mean over its records.
pub fn train_mse(
    mut model: SrModel,
    records: &[SampleRecord],
    table: &DegradationTable,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.epochs == 0 {
        return Ok(TrainOutcome {
            model,
            curve: Vec::new(),
        });
    }
    check_records(records, &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d73_6500);
    let mut adam = AdamState::new(&model, AdamConfig::default());
    let mut curve = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(Schedule::Mse, epoch, cfg.epochs, cfg.lr);
        for batch in batches(records.len(), cfg.batch_size, &mut rng) {
            let mut grads = model.zeros_like();
            let mut loss = 0.0;
            for &i in &batch {
                let r = &records[i];
                let e = table.lookup(r.sigma)?;
                let (out, cache) = model.forward_cached(&r.lr, &e.op, &e.pinv)?;
                let (l, g) = mse_loss_grad(&r.hr, &out)?;
                loss += l;
                grads.accumulate(&model.backward(&cache, &r.lr, &g, &e.op, &e.pinv)?)?;
            }
            let n = batch.len() as f64;
            loss /= n;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step: curve.len(),
                    loss,
                });
            }
            grads.scale_all(1.0 / n);
            adam.step(&mut model, &grads, lr, cfg.weight_decay)?;
            curve.push(loss);
        }
    }
    Ok(TrainOutcome { model, curve })
}

/// Diagnostics of one alternating step (batch means).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GanStep {
    pub d_loss: f64,
    pub g_total: f64,
    pub pixel: f64,
    pub feature: f64,
    pub adversarial: f64,
    pub d_real: f64,
    pub d_fake: f64,
    /// Extremes of every discriminator output seen during the step.
    pub d_min: f64,
    pub d_max: f64,
}

impl GanStep {
    fn is_finite(&self) -> bool {
        [self.d_loss, self.g_total, self.pixel, self.feature, self.adversarial]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Debug)]
pub struct GanOutcome {
    pub model: SrModel,
    pub disc: Discriminator,
    pub steps: Vec<GanStep>,
}

/// Alternating updates: one discriminator step on its cross-entropy
/// objective, then one generator step on the configured combined objective.
pub fn train_gan(
    mut model: SrModel,
    mut disc: Discriminator,
    records: &[SampleRecord],
    table: &DegradationTable,
    fe: &FeatureExtractor,
    cfg: &TrainConfig,
) -> Result<GanOutcome> {
    cfg.validate()?;
    if cfg.loss.mode == LossMode::Mse {
        return Err(Error::Config(
            "adversarial fine-tuning needs a combined loss mode".into(),
        ));
    }
    let gan = &cfg.gan;
    if gan.epochs == 0 {
        return Ok(GanOutcome {
            model,
            disc,
            steps: Vec::new(),
        });
    }
    check_records(records, &model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6761_6e00);
    let mut adam_g = AdamState::new(&model, AdamConfig::default());
    let mut adam_d = AdamState::new(&disc, AdamConfig::default());
    let mut steps = Vec::new();
    for epoch in 0..gan.epochs {
        let g_lr = lr_schedule(Schedule::Gan, epoch, gan.epochs, gan.g_lr);
        let d_lr = lr_schedule(Schedule::Gan, epoch, gan.epochs, gan.d_lr);
        for batch in batches(records.len(), cfg.batch_size, &mut rng) {
            let n = batch.len() as f64;
            let mut log = GanStep {
                d_min: f64::INFINITY,
                d_max: f64::NEG_INFINITY,
                ..Default::default()
            };
            let seen = |p: f64, log: &mut GanStep| {
                log.d_min = log.d_min.min(p);
                log.d_max = log.d_max.max(p);
            };

            // Discriminator step against the current generator.
            let mut real = Vec::with_capacity(batch.len());
            let mut fake = Vec::with_capacity(batch.len());
            for &i in &batch {
                let r = &records[i];
                let e = table.lookup(r.sigma)?;
                let x_hat = model.forward(&r.lr, &e.op, &e.pinv)?;
                real.push(disc.forward_cached(&r.hr)?);
                fake.push(disc.forward_cached(&x_hat)?);
            }
            let pr: Vec<f64> = real.iter().map(|c| c.prob()).collect();
            let pf: Vec<f64> = fake.iter().map(|c| c.prob()).collect();
            for &p in pr.iter().chain(&pf) {
                seen(p, &mut log);
            }
            let (d_loss, gr, gf) = gan_d_loss_grad(&pr, &pf)?;
            let mut d_grads = disc.zeros_like();
            for (c, g) in real.iter().zip(&gr).chain(fake.iter().zip(&gf)) {
                d_grads.accumulate(&disc.backward(c, *g)?.0)?;
            }
            log.d_loss = d_loss;
            log.d_real = pr.iter().sum::<f64>() / n;
            adam_d.step(&mut disc, &d_grads, d_lr, gan.d_weight_decay)?;

            // Generator step against the updated discriminator.
            let mut g_grads = model.zeros_like();
            for &i in &batch {
                let r = &records[i];
                let e = table.lookup(r.sigma)?;
                let (out, cache) = model.forward_cached(&r.lr, &e.op, &e.pinv)?;
                let (terms, g) = generator_loss_grad(&r.hr, &out, &disc, fe, &cfg.loss)?;
                seen(terms.d_fake, &mut log);
                log.g_total += terms.total / n;
                log.pixel += terms.pixel / n;
                log.feature += terms.feature / n;
                log.adversarial += terms.adversarial / n;
                log.d_fake += terms.d_fake / n;
                g_grads.accumulate(&model.backward(&cache, &r.lr, &g, &e.op, &e.pinv)?)?;
            }
            if !log.is_finite() {
                return Err(Error::Divergence {
                    step: steps.len(),
                    loss: if log.d_loss.is_finite() {
                        log.g_total
                    } else {
                        log.d_loss
                    },
                });
            }
            g_grads.scale_all(1.0 / n);
            adam_g.step(&mut model, &g_grads, g_lr, gan.g_weight_decay)?;
            steps.push(log);
        }
    }
    Ok(GanOutcome { model, disc, steps })
}

/// Generator output for a record.
pub fn reconstruct(model: &SrModel, record: &SampleRecord, table: &DegradationTable) -> Result<Tensor> {
    let e = table.lookup(record.sigma)?;
    model.forward(&record.lr, &e.op, &e.pinv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossConfig;
    use crate::network::{DiscArch, SrArch};
    use crate::training::{build_records, synth_video, SynthConfig};

    fn tiny_arch() -> SrArch {
        SrArch {
            n_blocks: 1,
            width: 4,
            encoder_width: 2,
            ..SrArch::desk(2)
        }
    }

    fn setup(sigmas: Vec<f64>) -> (Vec<SampleRecord>, DegradationTable, TrainConfig) {
        let cfg = TrainConfig {
            patch_size: 8,
            patch_attempts: 6,
            sigmas: Some(sigmas.clone()),
            epochs: 4,
            batch_size: 3,
            ..TrainConfig::desk(2)
        };
        let video = synth_video(&SynthConfig {
            height: 16,
            width: 16,
            frames: 6,
            ..Default::default()
        })
        .unwrap();
        let records = build_records(&[video], &cfg).unwrap();
        let table = DegradationTable::from_pinvs(
            2,
            sigmas
                .iter()
                .map(|&s| (s, LearnedPseudoInverse::replicate(1, 2, 5).unwrap()))
                .collect(),
        )
        .unwrap();
        (records, table, cfg)
    }

    #[test]
    fn zero_epochs_return_model_unchanged() {
        let (records, table, cfg) = setup(vec![1.0]);
        let model = SrModel::init(tiny_arch(), 1).unwrap();
        let out = train_mse(model.clone(), &records, &table, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert_eq!(out.model, model);
        assert!(out.curve.is_empty());
    }

    #[test]
    fn mse_training_is_reproducible_and_reduces_loss() {
        let (records, table, cfg) = setup(vec![0.5, 1.5]);
        assert!(records.len() >= 3);
        let cfg = TrainConfig { epochs: 10, ..cfg };
        let model = SrModel::init(tiny_arch(), 2).unwrap();
        let a = train_mse(model.clone(), &records, &table, &cfg).unwrap();
        let b = train_mse(model, &records, &table, &cfg).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.model, b.model);
        let k = records.len().div_ceil(cfg.batch_size);
        let first: f64 = a.curve[..k].iter().sum();
        let last: f64 = a.curve[a.curve.len() - k..].iter().sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn missing_sigma_is_reported() {
        let (records, _, cfg) = setup(vec![1.0]);
        let table =
            DegradationTable::from_pinvs(2, vec![(0.5, LearnedPseudoInverse::replicate(1, 2, 5).unwrap())]).unwrap();
        let model = SrModel::init(tiny_arch(), 1).unwrap();
        assert!(matches!(
            train_mse(model, &records, &table, &cfg),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn gan_steps_stay_finite_and_clamped() {
        let (records, table, cfg) = setup(vec![1.0]);
        let cfg = TrainConfig {
            loss: LossConfig::smooth_perceptual(),
            gan: crate::training::GanConfig {
                epochs: 2,
                ..Default::default()
            },
            ..cfg
        };
        let model = SrModel::init(tiny_arch(), 3).unwrap();
        let disc = Discriminator::init(
            &DiscArch {
                channels: 1,
                widths: vec![4, 4],
            },
            4,
        )
        .unwrap();
        let fe = FeatureExtractor::new(1, &[4, 4], 5).unwrap();
        let out = train_gan(model.clone(), disc.clone(), &records, &table, &fe, &cfg).unwrap();
        assert_eq!(out.steps.len(), 2 * records.len().div_ceil(cfg.batch_size));
        for s in &out.steps {
            assert!(s.d_min >= 1e-7 && s.d_max <= 1.0 - 1e-7);
        }
        let again = train_gan(model, disc, &records, &table, &fe, &cfg).unwrap();
        assert_eq!(out.steps, again.steps);
    }

    #[test]
    fn gan_rejects_mse_mode() {
        let (records, table, cfg) = setup(vec![1.0]);
        let cfg = TrainConfig {
            loss: LossConfig::mse(),
            ..cfg
        };
        let model = SrModel::init(tiny_arch(), 3).unwrap();
        let disc = Discriminator::init(&DiscArch::desk(1), 4).unwrap();
        let fe = FeatureExtractor::new(1, &[4, 4], 5).unwrap();
        assert!(train_gan(model, disc, &records, &table, &fe, &cfg).is_err());
    }
}
