//! Central finite-difference verification of hand-written backward passes.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar function of several tensor blocks with an analytic gradient.
pub trait Objective {
    fn value(&self, inputs: &[Tensor]) -> Result<f64>;

    /// Value and one gradient tensor per input block.
    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)>;

    fn block_name(&self, index: usize) -> String {
        format!("block{index}")
    }
}

/// Closure-backed [`Objective`].
pub struct FnObjective<V, G> {
    value: V,
    grad: G,
    names: Vec<String>,
}

impl<V, G> FnObjective<V, G>
where
    V: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    pub fn new(value: V, grad: G) -> Self {
        FnObjective {
            value,
            grad,
            names: Vec::new(),
        }
    }

    pub fn with_names(mut self, names: &[&str]) -> Self {
        self.names = names.iter().map(|s| s.to_string()).collect();
        self
    }
}

impl<V, G> Objective for FnObjective<V, G>
where
    V: Fn(&[Tensor]) -> Result<f64>,
    G: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)>,
{
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        (self.value)(inputs)
    }

    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        (self.grad)(inputs)
    }

    fn block_name(&self, index: usize) -> String {
        self.names
            .get(index)
            .cloned()
            .unwrap_or_else(|| format!("block{index}"))
    }
}

/// Negative control: perturbs the analytic gradient of the wrapped objective.
pub struct Corrupted<'a> {
    pub inner: &'a dyn Objective,
    pub factor: f64,
}

impl Objective for Corrupted<'_> {
    fn value(&self, inputs: &[Tensor]) -> Result<f64> {
        self.inner.value(inputs)
    }

    fn value_and_grad(&self, inputs: &[Tensor]) -> Result<(f64, Vec<Tensor>)> {
        let (v, grads) = self.inner.value_and_grad(inputs)?;
        Ok((v, grads.iter().map(|g| g.scale(self.factor)).collect()))
    }

    fn block_name(&self, index: usize) -> String {
        self.inner.block_name(index)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Coordinates probed per block (all of them when the block is smaller).
    pub probes: usize,
    pub tolerance: f64,
    pub seed: u64,
    /// Denominator floor, as a fraction of `max(1, |f(x)|)`, below which
    /// gradient entries are compared in absolute rather than relative terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            probes: 100,
            tolerance: 1e-5,
            seed: 0x5eed,
            floor: 1e-6,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Probes whose second difference showed a kink inside the stencil.
    pub skipped: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().fold(0.0, |m, b| m.max(b.max_rel_err))
    }

    pub fn passed(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.checked > 0 && b.max_rel_err <= self.tolerance)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.blocks {
            writeln!(
                f,
                "{:<24} max rel err {:.3e} ({} probes, {} skipped at kinks)",
                b.name, b.max_rel_err, b.checked, b.skipped
            )?;
        }
        write!(
            f,
            "{} at tolerance {:.1e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance
        )
    }
}

/// Step multipliers after the primary step: finer ones move a ReLU kink out
/// of the stencil, coarser ones lift tiny gradient entries above roundoff.
const STEP_SCALES: [f64; 5] = [0.5, 0.25, 0.125, 10.0, 100.0];

pub fn grad_check(objective: &dyn Objective, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (f0, analytic) = objective.value_and_grad(inputs)?;
    if !f0.is_finite() {
        return Err(Error::NonFinite("gradient check base value".into()));
    }
    if analytic.len() != inputs.len() {
        return Err(Error::shape(
            "grad_check",
            format!("{} gradient blocks for {} inputs", analytic.len(), inputs.len()),
        ));
    }
    let floor = opts.floor * f0.abs().max(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut blocks = Vec::with_capacity(inputs.len());

    for (b, grad) in analytic.iter().enumerate() {
        if grad.shape() != inputs[b].shape() {
            return Err(Error::shape(
                "grad_check",
                format!(
                    "gradient {:?} vs input {:?} for {}",
                    grad.shape(),
                    inputs[b].shape(),
                    objective.block_name(b)
                ),
            ));
        }
        let n = inputs[b].len();
        let indices: Vec<usize> = if n <= opts.probes {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, opts.probes).into_vec();
            v.sort_unstable();
            v
        };
        let mut report = BlockReport {
            name: objective.block_name(b),
            max_rel_err: 0.0,
            checked: 0,
            skipped: 0,
        };
        for i in indices {
            let x = inputs[b].data()[i];
            let a = grad.data()[i];
            let h0 = 1e-5 * x.abs().max(1.0);
            // The primary step is h0. When it disagrees, other steps are
            // tried: a ReLU kink inside the wide stencil lies outside one of
            // the narrower ones, a roundoff-limited estimate improves with a
            // wider one, while a wrong gradient disagrees with all of them.
            let mut best = f64::INFINITY;
            let mut kink = false;
            for scale in std::iter::once(1.0).chain(STEP_SCALES) {
                let h = h0 * scale;
                work[b].data_mut()[i] = x + h;
                let fp = objective.value(&work)?;
                work[b].data_mut()[i] = x - h;
                let fm = objective.value(&work)?;
                work[b].data_mut()[i] = x;
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::NonFinite(format!("probe {} of {}", i, report.name)));
                }
                let first = fp - fm;
                let second = fp - 2.0 * f0 + fm;
                let numeric = first / (2.0 * h);
                let denom = a.abs().max(numeric.abs()).max(floor);
                best = best.min((a - numeric).abs() / denom);
                // A slope jump of `second / h` inside the stencil shifts the
                // central difference by up to half of it.
                if scale <= 1.0 {
                    kink = second.abs() / h >= (a - numeric).abs() && second.abs() > 1e-9 * floor;
                }
                if best <= opts.tolerance {
                    break;
                }
            }
            if best > opts.tolerance && kink {
                report.skipped += 1;
                continue;
            }
            report.max_rel_err = report.max_rel_err.max(best);
            report.checked += 1;
        }
        blocks.push(report);
    }
    Ok(GradCheckReport {
        blocks,
        tolerance: opts.tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mse_identity() -> impl Objective {
        FnObjective::new(
            |t: &[Tensor]| Ok(t[0].sub(&t[1])?.sum_sq() / t[0].len() as f64),
            |t: &[Tensor]| {
                let d = t[0].sub(&t[1])?;
                let n = t[0].len() as f64;
                Ok((d.sum_sq() / n, vec![d.scale(2.0 / n), d.scale(-2.0 / n)]))
            },
        )
        .with_names(&["prediction", "target"])
    }

    #[test]
    fn mse_passes_tight_tolerance() {
        let x = Tensor::from_fn(vec![20], |i| (i as f64 * 0.37).sin());
        let y = Tensor::from_fn(vec![20], |i| (i as f64 * 0.11).cos());
        let opts = GradCheckOptions {
            tolerance: 1e-7,
            ..Default::default()
        };
        let report = grad_check(&mse_identity(), &[x, y], &opts).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn corrupted_backward_fails() {
        let x = Tensor::from_fn(vec![20], |i| (i as f64 * 0.37).sin());
        let y = Tensor::zeros(vec![20]);
        let inner = mse_identity();
        let bad = Corrupted {
            inner: &inner,
            factor: 1.01,
        };
        let report = grad_check(&bad, &[x, y], &GradCheckOptions::default()).unwrap();
        assert!(!report.passed());
    }

    #[test]
    fn kinks_are_skipped_not_failed() {
        // |x| evaluated exactly at its kink.
        let obj = FnObjective::new(
            |t: &[Tensor]| Ok(t[0].data().iter().map(|v| v.abs()).sum()),
            |t: &[Tensor]| Ok((t[0].data().iter().map(|v| v.abs()).sum(), vec![t[0].map(f64::signum)])),
        );
        let x = Tensor::new(vec![3], vec![0.0, 1.0, -2.0]).unwrap();
        let report = grad_check(&obj, &[x], &GradCheckOptions::default()).unwrap();
        assert_eq!(report.blocks[0].skipped, 1);
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn kink_near_probe_is_resolved_by_refinement() {
        // relu(x - c) with the kink 0.7 step sizes to the left of x = 1.
        let c = 1.0 - 0.7e-5;
        let relu = move |t: &[Tensor]| t[0].data().iter().map(|v| (v - c).max(0.0)).sum::<f64>();
        let obj = FnObjective::new(
            move |t: &[Tensor]| Ok(relu(t)),
            move |t: &[Tensor]| Ok((relu(t), vec![t[0].map(|v| if v > c { 1.0 } else { 0.0 })])),
        );
        let x = Tensor::new(vec![1], vec![1.0]).unwrap();
        let report = grad_check(&obj, &[x.clone()], &GradCheckOptions::default()).unwrap();
        assert_eq!(report.blocks[0].checked, 1);
        assert!(report.passed(), "{report}");

        let bad = Corrupted {
            inner: &obj,
            factor: 1.01,
        };
        assert!(!grad_check(&bad, &[x], &GradCheckOptions::default()).unwrap().passed());
    }

    #[test]
    fn kink_exactly_at_probe_is_skipped() {
        // Off-kink terms make the second difference small next to the first.
        let f = |t: &[Tensor]| t[0].data()[0].max(0.0) + 3.0 * t[0].data()[0];
        let obj = FnObjective::new(
            move |t: &[Tensor]| Ok(f(t)),
            move |t: &[Tensor]| Ok((f(t), vec![Tensor::new(vec![1], vec![3.0]).unwrap()])),
        );
        let x = Tensor::new(vec![1], vec![0.0]).unwrap();
        let report = grad_check(&obj, &[x], &GradCheckOptions::default()).unwrap();
        assert_eq!(report.blocks[0].skipped, 1);
    }
}
