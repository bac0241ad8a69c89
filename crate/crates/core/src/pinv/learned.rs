use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::degradation::{materialize_columns, DegradationOperator, DenseOperator};
use crate::error::{Error, Result};
use crate::layers::{conv2d, conv2d_input_grad, conv2d_param_grad, pixel_shuffle, pixel_unshuffle, ConvParams};
use crate::optim::{AdamConfig, AdamState, Parameters};
use crate::tensor::Tensor;
use crate::training::{lr_schedule, Schedule};

/// A linear map LR → HR used in place of `A⁺`.
pub trait PseudoInverse {
    fn factor(&self) -> usize;

    fn apply(&self, y: &Tensor) -> Result<Tensor>;

    /// Transpose of [`PseudoInverse::apply`], mapping HR → LR.
    fn adjoint(&self, x: &Tensor) -> Result<Tensor>;
}

/// `P_ω(y) = pixel_shuffle(conv(y, ω), f)` with no bias and no nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedPseudoInverse {
    pub omega: ConvParams,
    factor: usize,
}

pub fn default_kernel_size(factor: usize) -> usize {
    2 * factor + 1
}

impl LearnedPseudoInverse {
    pub fn zeros(channels: usize, factor: usize, kernel_size: usize) -> Result<Self> {
        if factor == 0 || kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "pseudo-inverse needs factor >= 1 and an odd kernel size (got {factor}, {kernel_size})"
            )));
        }
        Ok(LearnedPseudoInverse {
            omega: ConvParams::same(channels * factor * factor, channels, kernel_size, false),
            factor,
        })
    }

    /// Nearest-neighbour upsampling: every sub-pixel phase copies its LR pixel.
    pub fn replicate(channels: usize, factor: usize, kernel_size: usize) -> Result<Self> {
        let mut p = Self::zeros(channels, factor, kernel_size)?;
        let f2 = factor * factor;
        let k2 = kernel_size * kernel_size;
        let mid = k2 / 2;
        let w = p.omega.weight.data_mut();
        for c in 0..channels {
            for phase in 0..f2 {
                let co = c * f2 + phase;
                w[(co * channels + c) * k2 + mid] = 1.0;
            }
        }
        Ok(p)
    }

    pub fn from_weight(weight: Tensor, factor: usize) -> Result<Self> {
        let s = weight.shape().to_vec();
        if s.len() != 4 || s[2] != s[3] || s[2] % 2 == 0 || s[0] != s[1] * factor * factor {
            return Err(Error::shape(
                "LearnedPseudoInverse",
                format!("weight {s:?} is not [C·f², C, s, s] for f = {factor}"),
            ));
        }
        let k = s[2];
        Ok(LearnedPseudoInverse {
            omega: ConvParams::new(weight, None, 1, k / 2)?,
            factor,
        })
    }

    pub fn channels(&self) -> usize {
        self.omega.dims().1
    }

    pub fn kernel_size(&self) -> usize {
        self.omega.dims().2
    }

    /// Number of entries in ω: `s²·C·C·f²`.
    pub fn num_weights(&self) -> usize {
        self.omega.weight.len()
    }

    /// Gradient of `⟨g, P_ω(y)⟩` with respect to ω.
    pub fn weight_grad(&self, y: &Tensor, g: &Tensor) -> Result<Tensor> {
        let gu = pixel_unshuffle(g, self.factor)?;
        Ok(conv2d_param_grad(&gu, y, &self.omega)?.0)
    }

    /// Dense matrix of the single-channel map on `h × w` LR images.
    pub fn materialize(&self, h: usize, w: usize) -> Result<DenseOperator> {
        let f = self.factor;
        materialize_columns(|y| self.apply(y), (h, w), (h * f, w * f))
    }
}

impl PseudoInverse for LearnedPseudoInverse {
    fn factor(&self) -> usize {
        self.factor
    }

    fn apply(&self, y: &Tensor) -> Result<Tensor> {
        pixel_shuffle(&conv2d(y, &self.omega)?, self.factor)
    }

    fn adjoint(&self, x: &Tensor) -> Result<Tensor> {
        let g = pixel_unshuffle(x, self.factor)?;
        let (_, h, w) = g.chw()?;
        conv2d_input_grad(&g, (h, w), &self.omega)
    }
}

impl Parameters for LearnedPseudoInverse {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("omega".into(), &self.omega.weight)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("omega".into(), &mut self.omega.weight)]
    }
}

/// A dense matrix (e.g. the SVD oracle) acting channel by channel.
impl PseudoInverse for DenseOperator {
    fn factor(&self) -> usize {
        self.target.0 / self.source.0.max(1)
    }

    fn apply(&self, y: &Tensor) -> Result<Tensor> {
        DenseOperator::apply(self, y)
    }

    fn adjoint(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.chw()?;
        if (h, w) != self.target {
            return Err(Error::shape(
                "dense_adjoint",
                format!("operator maps to {:?}, image is {h}x{w}", self.target),
            ));
        }
        let (rows, cols) = (self.rows(), self.cols());
        let m = self.matrix.data();
        let mut out = vec![0.0; c * cols];
        for ch in 0..c {
            let v = x.channel(ch)?;
            let dst = &mut out[ch * cols..(ch + 1) * cols];
            for (r, &vr) in v.iter().enumerate().take(rows) {
                for (d, a) in dst.iter_mut().zip(&m[r * cols..(r + 1) * cols]) {
                    *d += a * vr;
                }
            }
        }
        Tensor::new(vec![c, self.source.0, self.source.1], out)
    }
}

pub fn pinv_apply(y: &Tensor, p: &LearnedPseudoInverse) -> Result<Tensor> {
    p.apply(y)
}

/// Per-image value of the two Moore–Penrose residual terms,
/// `‖y − A P y‖² + ‖P y − P A P y‖²`.
fn pinv_terms(p: &LearnedPseudoInverse, op: &DegradationOperator, y: &Tensor) -> Result<(f64, f64)> {
    let u = p.apply(y)?;
    let r1 = y.sub(&op.apply(&u)?)?;
    let r2 = u.sub(&p.apply(&op.apply(&u)?)?)?;
    Ok((r1.sum_sq(), r2.sum_sq()))
}

/// Batch-mean pseudo-inverse loss on LR observations `ys`.
pub fn pinv_loss_lr(p: &LearnedPseudoInverse, op: &DegradationOperator, ys: &[Tensor]) -> Result<f64> {
    if ys.is_empty() {
        return Err(Error::invalid("pseudo-inverse loss needs a non-empty batch"));
    }
    let mut total = 0.0;
    for y in ys {
        let (a, b) = pinv_terms(p, op, y)?;
        total += a + b;
    }
    Ok(total / ys.len() as f64)
}

/// Batch-mean pseudo-inverse loss on HR images, with `y = A x`.
pub fn pinv_loss(p: &LearnedPseudoInverse, xs: &[Tensor], op: &DegradationOperator) -> Result<f64> {
    let ys = xs.iter().map(|x| op.apply(x)).collect::<Result<Vec<_>>>()?;
    pinv_loss_lr(p, op, &ys)
}

/// Loss and its gradient with respect to ω.
pub fn pinv_loss_grad(p: &LearnedPseudoInverse, op: &DegradationOperator, ys: &[Tensor]) -> Result<(f64, Tensor)> {
    if ys.is_empty() {
        return Err(Error::invalid("pseudo-inverse loss needs a non-empty batch"));
    }
    let n = ys.len() as f64;
    let mut total = 0.0;
    let mut grad = p.omega.weight.zeros_like();
    for y in ys {
        // Forward: u = P y, v = A u, w = P v.
        let u = p.apply(y)?;
        let v = op.apply(&u)?;
        let w = p.apply(&v)?;
        let r1 = y.sub(&v)?;
        let r2 = u.sub(&w)?;
        total += r1.sum_sq() + r2.sum_sq();

        // dL/du collects the first term through A and the second term both
        // directly and through P A.
        let mut du = op.adjoint(&r1)?.scale(-2.0);
        du.axpy(2.0, &r2)?;
        du.axpy(-2.0, &op.adjoint(&p.adjoint(&r2)?)?)?;
        grad.add_assign(&p.weight_grad(y, &du)?)?;
        // ω also enters through w = P v.
        grad.axpy(-2.0, &p.weight_grad(&v, &r2)?)?;
    }
    Ok((total / n, grad.scale(1.0 / n)))
}

/// Relative sizes of the two residuals on held-out observations, pooled over
/// the set: `‖A P y − y‖ / ‖y‖` and `‖P y − P A P y‖ / ‖P y‖`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinvResiduals {
    pub range: f64,
    pub projection: f64,
}

pub fn pinv_residuals<P: PseudoInverse + ?Sized>(
    p: &P,
    op: &DegradationOperator,
    ys: &[Tensor],
) -> Result<PinvResiduals> {
    let (mut n1, mut d1, mut n2, mut d2) = (0.0, 0.0, 0.0, 0.0);
    for y in ys {
        let u = p.apply(y)?;
        let v = op.apply(&u)?;
        n1 += y.sub(&v)?.sum_sq();
        d1 += y.sum_sq();
        n2 += u.sub(&p.apply(&v)?)?.sum_sq();
        d2 += u.sum_sq();
    }
    Ok(PinvResiduals {
        range: (n1 / d1.max(f64::MIN_POSITIVE)).sqrt(),
        projection: (n2 / d2.max(f64::MIN_POSITIVE)).sqrt(),
    })
}

/// `‖A P − I‖_F / √(h·w)` for single-channel LR images of size `h × w`.
pub fn identity_residual<P: PseudoInverse + ?Sized>(
    p: &P,
    op: &DegradationOperator,
    h: usize,
    w: usize,
) -> Result<f64> {
    let ap = materialize_columns(|y| op.apply(&p.apply(y)?), (h, w), (h, w))?;
    let n = h * w;
    let m = ap.matrix.data();
    let mut acc = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = m[i * n + j] - if i == j { 1.0 } else { 0.0 };
            acc += d * d;
        }
    }
    Ok((acc / n as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PinvTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Images per step; 0 uses the full set every step.
    pub batch_size: usize,
    /// Odd convolution size; 0 selects `2f + 1`.
    pub kernel_size: usize,
    pub seed: u64,
}

impl Default for PinvTrainConfig {
    fn default() -> Self {
        PinvTrainConfig {
            steps: 3000,
            lr: 1e-2,
            batch_size: 0,
            kernel_size: 0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PinvTrainResult {
    pub pinv: LearnedPseudoInverse,
    /// Loss over the whole training set with the returned ω.
    pub final_loss: f64,
    /// Minibatch loss before each step.
    pub curve: Vec<f64>,
}

impl PinvTrainResult {
    pub fn best_so_far(&self) -> Vec<f64> {
        best_so_far(&self.curve)
    }
}

pub fn best_so_far(curve: &[f64]) -> Vec<f64> {
    curve
        .iter()
        .scan(f64::INFINITY, |best, &v| {
            *best = best.min(v);
            Some(*best)
        })
        .collect()
}

/// Minimise the pseudo-inverse loss with Adam from ω = 0.
pub fn train_pinv(op: &DegradationOperator, images: &[Tensor], cfg: &PinvTrainConfig) -> Result<PinvTrainResult> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("train_pinv needs at least one image"))?;
    let (c, _, _) = first.chw()?;
    let ys = images.iter().map(|x| op.apply(x)).collect::<Result<Vec<_>>>()?;
    let s = if cfg.kernel_size == 0 {
        default_kernel_size(op.factor())
    } else {
        cfg.kernel_size
    };
    let pinv = LearnedPseudoInverse::zeros(c, op.factor(), s)?;
    train_pinv_from(pinv, op, &ys, cfg)
}

/// Continue training `pinv` on precomputed LR observations.
pub fn train_pinv_from(
    mut pinv: LearnedPseudoInverse,
    op: &DegradationOperator,
    ys: &[Tensor],
    cfg: &PinvTrainConfig,
) -> Result<PinvTrainResult> {
    if ys.is_empty() {
        return Err(Error::invalid("train_pinv needs at least one image"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&pinv, AdamConfig::default());
    let mut order: Vec<usize> = (0..ys.len()).collect();
    let batch = if cfg.batch_size == 0 {
        ys.len()
    } else {
        cfg.batch_size.min(ys.len())
    };
    let mut cursor = ys.len();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picked: Vec<Tensor> = if batch == ys.len() {
            ys.to_vec()
        } else {
            if cursor + batch > ys.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            cursor += batch;
            order[cursor - batch..cursor].iter().map(|&i| ys[i].clone()).collect()
        };
        let (loss, grad) = pinv_loss_grad(&pinv, op, &picked)?;
        if !loss.is_finite() || !grad.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        curve.push(loss);
        let lr = lr_schedule(Schedule::Mse, step, cfg.steps, cfg.lr);
        let mut g = pinv.clone();
        g.omega.weight = grad;
        adam.step(&mut pinv, &g, lr, 0.0)?;
    }
    let final_loss = pinv_loss_lr(&pinv, op, ys)?;
    if !final_loss.is_finite() {
        return Err(Error::Divergence {
            step: cfg.steps,
            loss: final_loss,
        });
    }
    Ok(PinvTrainResult {
        pinv,
        final_loss,
        curve,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnObjective, GradCheckOptions};
    use rand::Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn delta_factor_one_is_identity() {
        let p = LearnedPseudoInverse::replicate(2, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random(vec![2, 5, 6], &mut rng);
        assert_eq!(p.apply(&y).unwrap(), y);
    }

    #[test]
    fn replicate_is_nearest_neighbour() {
        let p = LearnedPseudoInverse::replicate(1, 2, 5).unwrap();
        let y = Tensor::new(vec![1, 1, 2], vec![0.25, 0.75]).unwrap();
        let x = p.apply(&y).unwrap();
        assert_eq!(x.data(), &[0.25, 0.25, 0.75, 0.75, 0.25, 0.25, 0.75, 0.75]);
    }

    #[test]
    fn output_dimension() {
        let p = LearnedPseudoInverse::zeros(3, 2, 5).unwrap();
        assert_eq!(p.num_weights(), 5 * 5 * 3 * 3 * 4);
        assert_eq!(p.omega.weight.shape(), &[12, 3, 5, 5]);
    }

    #[test]
    fn linear_in_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = LearnedPseudoInverse::zeros(1, 2, 5).unwrap();
        p.omega.weight = random(vec![4, 1, 5, 5], &mut rng);
        let y1 = random(vec![1, 6, 6], &mut rng);
        let y2 = random(vec![1, 6, 6], &mut rng);
        let (a, b) = (0.7, -1.3);
        let mut mix = y1.scale(a);
        mix.axpy(b, &y2).unwrap();
        let lhs = p.apply(&mix).unwrap();
        let mut rhs = p.apply(&y1).unwrap().scale(a);
        rhs.axpy(b, &p.apply(&y2).unwrap()).unwrap();
        assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn adjoint_inner_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = LearnedPseudoInverse::zeros(2, 3, 7).unwrap();
        p.omega.weight = random(vec![18, 2, 7, 7], &mut rng);
        let y = random(vec![2, 4, 5], &mut rng);
        let g = random(vec![2, 12, 15], &mut rng);
        let lhs = p.apply(&y).unwrap().dot(&g).unwrap();
        let rhs = y.dot(&p.adjoint(&g).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn zero_omega_loss_is_observation_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let op = DegradationOperator::from_sigma(2, 1.0).unwrap();
        let p = LearnedPseudoInverse::zeros(1, 2, 5).unwrap();
        let xs: Vec<Tensor> = (0..3).map(|_| random(vec![1, 8, 8], &mut rng)).collect();
        let want = xs.iter().map(|x| op.apply(x).unwrap().sum_sq()).sum::<f64>() / 3.0;
        assert!((pinv_loss(&p, &xs, &op).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn exact_inverse_has_zero_loss() {
        // f = 1 with a delta kernel: A = I and the replicate map is exactly A⁺.
        let op = DegradationOperator::from_sigma(1, 0.0).unwrap();
        let p = LearnedPseudoInverse::replicate(1, 1, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xs = vec![random(vec![1, 6, 6], &mut rng)];
        assert_eq!(pinv_loss(&p, &xs, &op).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let op = DegradationOperator::from_sigma(2, 0.8).unwrap();
        let ys: Vec<Tensor> = (0..2)
            .map(|_| op.apply(&random(vec![1, 8, 8], &mut rng)).unwrap())
            .collect();
        let omega = random(vec![4, 1, 5, 5], &mut rng).scale(0.3);
        let value = |t: &[Tensor]| {
            let p = LearnedPseudoInverse::from_weight(t[0].clone(), 2)?;
            pinv_loss_lr(&p, &op, &ys)
        };
        let grad = |t: &[Tensor]| {
            let p = LearnedPseudoInverse::from_weight(t[0].clone(), 2)?;
            let (v, g) = pinv_loss_grad(&p, &op, &ys)?;
            Ok((v, vec![g]))
        };
        let obj = FnObjective::new(value, grad).with_names(&["omega"]);
        let report = grad_check(&obj, &[omega], &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn identity_case_converges() {
        let op = DegradationOperator::from_sigma(1, 0.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<Tensor> = (0..4).map(|_| random(vec![1, 8, 8], &mut rng)).collect();
        let cfg = PinvTrainConfig {
            steps: 400,
            lr: 2e-2,
            ..Default::default()
        };
        let res = train_pinv(&op, &xs, &cfg).unwrap();
        assert!(res.final_loss < 1e-6, "{}", res.final_loss);
        let best = res.best_so_far();
        assert!(best.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn deterministic_given_seed() {
        let op = DegradationOperator::from_sigma(2, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs: Vec<Tensor> = (0..6).map(|_| random(vec![1, 8, 8], &mut rng)).collect();
        let cfg = PinvTrainConfig {
            steps: 30,
            batch_size: 2,
            ..Default::default()
        };
        let a = train_pinv(&op, &xs, &cfg).unwrap();
        let b = train_pinv(&op, &xs, &cfg).unwrap();
        assert_eq!(a.pinv, b.pinv);
        assert_eq!(a.curve, b.curve);
    }

    #[test]
    fn dense_oracle_satisfies_trait() {
        let op = DegradationOperator::from_sigma(2, 1.0).unwrap();
        let a = crate::degradation::materialize_a(&op, 8, 8).unwrap();
        let p = crate::degradation::pinv_oracle(&a).unwrap();
        assert_eq!(PseudoInverse::factor(&p), 2);
        assert!(identity_residual(&p, &op, 4, 4).unwrap() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y = random(vec![1, 4, 4], &mut rng);
        let g = random(vec![1, 8, 8], &mut rng);
        let lhs = PseudoInverse::apply(&p, &y).unwrap().dot(&g).unwrap();
        let rhs = y.dot(&p.adjoint(&g).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
