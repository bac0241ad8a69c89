//! Fully connected network mapping PCA coefficients of a blur kernel to the
//! weights ω of the matching learned pseudo-inverse.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{linear, linear_backward, Activation, LinearParams};
use crate::optim::{prefixed, prefixed_mut, AdamConfig, AdamState, Parameters};
use crate::pinv::learned::LearnedPseudoInverse;
use crate::tensor::Tensor;
use crate::training::{lr_schedule, Schedule};

pub const PAPER_HIDDEN: [usize; 3] = [512, 1024, 512];
pub const DESK_HIDDEN: [usize; 3] = [64, 128, 64];

/// Shape of the pseudo-inverse the network predicts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PinvShape {
    pub channels: usize,
    pub factor: usize,
    pub kernel_size: usize,
}

impl PinvShape {
    pub fn of(p: &LearnedPseudoInverse) -> Self {
        PinvShape {
            channels: p.channels(),
            factor: crate::pinv::PseudoInverse::factor(p),
            kernel_size: p.kernel_size(),
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        let f2 = self.factor * self.factor;
        [self.channels * f2, self.channels, self.kernel_size, self.kernel_size]
    }

    pub fn num_weights(&self) -> usize {
        self.weight_shape().iter().product()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HyperNetwork {
    /// Hidden layers (ReLU) followed by a linear output layer.
    pub layers: Vec<LinearParams>,
    /// Fixed scalar applied to the PCA input.
    pub input_scale: f64,
    /// Fixed scalar applied to the network output.
    pub output_scale: f64,
    pub target: PinvShape,
}

struct Trace {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
}

impl HyperNetwork {
    pub fn zeros(input_dim: usize, hidden: &[usize], target: PinvShape) -> Self {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden);
        dims.push(target.num_weights());
        let layers = dims.windows(2).map(|w| LinearParams::zeros(w[1], w[0])).collect();
        HyperNetwork {
            layers,
            input_scale: 1.0,
            output_scale: 1.0,
            target,
        }
    }

    /// He-initialised hidden layers and a zero output layer.
    pub fn init(input_dim: usize, hidden: &[usize], target: PinvShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::zeros(input_dim, hidden, target);
        let last = net.layers.len() - 1;
        for l in &mut net.layers[..last] {
            *l = l.clone().init_he(1.0, &mut rng);
        }
        net
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn hidden(&self) -> Vec<usize> {
        self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.out_dim())
            .collect()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").out_dim()
    }

    fn forward_trace(&self, pca: &Tensor) -> Result<(Tensor, Trace)> {
        if pca.len() != self.input_dim() {
            return Err(Error::shape(
                "hypernet_predict",
                format!("{} PCA coefficients, network expects {}", pca.len(), self.input_dim()),
            ));
        }
        let mut h = pca.scale(self.input_scale).reshape(vec![pca.len()])?;
        let mut trace = Trace {
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            trace.inputs.push(h.clone());
            let z = linear(&h, l)?;
            h = if i < last {
                Activation::Relu.forward(&z)
            } else {
                z.clone()
            };
            trace.pre.push(z);
        }
        Ok((h.scale(self.output_scale), trace))
    }

    /// Flat ω for the given PCA coefficients.
    pub fn forward(&self, pca: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(pca)?.0)
    }

    pub fn predict(&self, pca: &Tensor) -> Result<LearnedPseudoInverse> {
        let w = self.forward(pca)?.reshape(self.target.weight_shape().to_vec())?;
        LearnedPseudoInverse::from_weight(w, self.target.factor)
    }

    /// Gradient of `⟨grad_out, forward(pca)⟩` with respect to the parameters.
    pub fn backward(&self, pca: &Tensor, grad_out: &Tensor) -> Result<HyperNetwork> {
        let (_, trace) = self.forward_trace(pca)?;
        let mut grads = self.zeros_like();
        let mut g = grad_out.scale(self.output_scale);
        let last = self.layers.len() - 1;
        for i in (0..self.layers.len()).rev() {
            if i < last {
                g = Activation::Relu.backward(&g, &trace.pre[i])?;
            }
            let lg = linear_backward(&g, &trace.inputs[i], &self.layers[i])?;
            grads.layers[i].weight = lg.weight;
            grads.layers[i].bias = lg.bias;
            g = lg.input;
        }
        Ok(grads)
    }

    pub fn zeros_like(&self) -> HyperNetwork {
        HyperNetwork {
            layers: self
                .layers
                .iter()
                .map(|l| LinearParams::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            ..self.clone()
        }
    }
}

impl Parameters for HyperNetwork {
    fn params(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| prefixed(&format!("fc{i}"), l.params()))
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers
            .iter_mut()
            .enumerate()
            .flat_map(|(i, l)| prefixed_mut(&format!("fc{i}"), l.params_mut()))
            .collect()
    }
}

pub fn hypernet_predict(pca_k: &Tensor, h: &HyperNetwork) -> Result<Tensor> {
    h.forward(pca_k)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypernetTrainConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for HypernetTrainConfig {
    fn default() -> Self {
        HypernetTrainConfig {
            hidden: PAPER_HIDDEN.to_vec(),
            steps: 4000,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl HypernetTrainConfig {
    pub fn desk() -> Self {
        HypernetTrainConfig {
            hidden: DESK_HIDDEN.to_vec(),
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct HypernetTrainResult {
    pub net: HyperNetwork,
    /// Full-batch mean squared error before each step.
    pub curve: Vec<f64>,
    pub final_mse: f64,
}

/// Mean over targets of the per-entry squared error.
pub fn hypernet_mse(net: &HyperNetwork, targets: &[(Tensor, Tensor)]) -> Result<f64> {
    let mut acc = 0.0;
    let mut count = 0usize;
    for (pca, omega) in targets {
        acc += net
            .forward(pca)?
            .sub(&omega.clone().reshape(vec![omega.len()])?)?
            .sum_sq();
        count += omega.len();
    }
    Ok(acc / count.max(1) as f64)
}

/// Regress ω from PCA coefficients by full-batch Adam on the squared error.
///
/// The input scale normalises the largest coefficient magnitude to 1, the
/// output scale matches the spread of the targets, and the output bias starts
/// at the mean target so training only has to learn the variation.
pub fn train_hypernet(
    targets: &[(Tensor, Tensor)],
    shape: PinvShape,
    cfg: &HypernetTrainConfig,
) -> Result<HypernetTrainResult> {
    let (first_pca, _) = targets
        .first()
        .ok_or_else(|| Error::invalid("train_hypernet needs at least one target"))?;
    let d = first_pca.len();
    let n_out = shape.num_weights();
    for (pca, omega) in targets {
        if pca.len() != d || omega.len() != n_out {
            return Err(Error::shape(
                "train_hypernet",
                format!(
                    "target with {} coefficients / {} weights, expected {d} / {n_out}",
                    pca.len(),
                    omega.len()
                ),
            ));
        }
    }
    let mut net = HyperNetwork::init(d, &cfg.hidden, shape, cfg.seed);
    let max_in = targets.iter().map(|(p, _)| p.max_abs()).fold(0.0, f64::max);
    net.input_scale = if max_in > 0.0 { 1.0 / max_in } else { 1.0 };

    let m = targets.len() as f64;
    let mut mean = vec![0.0; n_out];
    for (_, omega) in targets {
        for (a, v) in mean.iter_mut().zip(omega.data()) {
            *a += v / m;
        }
    }
    let spread = targets
        .iter()
        .flat_map(|(_, o)| o.data().iter().zip(&mean).map(|(v, mu)| (v - mu).abs()))
        .fold(0.0, f64::max);
    net.output_scale = if spread > 0.0 {
        spread
    } else {
        mean.iter().fold(0.0, |a: f64, v| a.max(v.abs())).max(1.0)
    };
    let last = net.layers.len() - 1;
    net.layers[last].bias = Tensor::new(vec![n_out], mean.iter().map(|v| v / net.output_scale).collect())?;

    let mut adam = AdamState::new(&net, AdamConfig::default());
    let norm = 2.0 / (m * n_out as f64);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut grads = net.zeros_like();
        let mut loss = 0.0;
        for (pca, omega) in targets {
            let pred = net.forward(pca)?;
            let diff = pred.sub(&omega.clone().reshape(vec![n_out])?)?;
            loss += diff.sum_sq();
            grads.accumulate(&net.backward(pca, &diff.scale(norm))?)?;
        }
        loss /= m * n_out as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        curve.push(loss);
        let lr = lr_schedule(Schedule::Mse, step, cfg.steps, cfg.lr);
        adam.step(&mut net, &grads, lr, cfg.weight_decay)?;
    }
    let final_mse = hypernet_mse(&net, targets)?;
    Ok(HypernetTrainResult { net, curve, final_mse })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnObjective, GradCheckOptions};
    use rand::Rng;

    fn shape() -> PinvShape {
        PinvShape {
            channels: 1,
            factor: 2,
            kernel_size: 3,
        }
    }

    #[test]
    fn zero_weights_give_zero_omega() {
        let net = HyperNetwork::zeros(15, &DESK_HIDDEN, shape());
        let out = hypernet_predict(&Tensor::full(vec![15], 0.3), &net).unwrap();
        assert_eq!(out.len(), 3 * 3 * 4);
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn output_dimension_matches_pinv() {
        let s = PinvShape {
            channels: 3,
            factor: 4,
            kernel_size: 9,
        };
        let net = HyperNetwork::zeros(15, &[8], s);
        assert_eq!(net.output_dim(), 9 * 9 * 3 * 3 * 16);
        let p = net.predict(&Tensor::zeros(vec![15])).unwrap();
        assert_eq!(PinvShape::of(&p), s);
    }

    #[test]
    fn rejects_wrong_input_dim() {
        let net = HyperNetwork::zeros(15, &[4], shape());
        assert!(net.forward(&Tensor::zeros(vec![14])).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut net = HyperNetwork::init(4, &[6, 5], shape(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for v in net.layers[2].weight.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
        net.input_scale = 0.7;
        net.output_scale = 1.3;
        let x = Tensor::from_fn(vec![4], |_| rng.random_range(-1.0..1.0));
        let g = Tensor::from_fn(vec![36], |_| rng.random_range(-1.0..1.0));
        let template = net.clone();
        let value = |t: &[Tensor]| {
            let mut n = template.clone();
            n.load_tensors(t)?;
            n.forward(&x)?.dot(&g)
        };
        let grad = |t: &[Tensor]| {
            let mut n = template.clone();
            n.load_tensors(t)?;
            Ok((n.forward(&x)?.dot(&g)?, n.backward(&x, &g)?.to_tensors()))
        };
        let names: Vec<String> = net.params().into_iter().map(|(n, _)| n).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        let obj = FnObjective::new(value, grad).with_names(&names);
        let report = grad_check(&obj, &net.to_tensors(), &GradCheckOptions::default()).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn single_target_is_memorised() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pca = Tensor::from_fn(vec![5], |_| rng.random_range(-1.0..1.0));
        let omega = Tensor::from_fn(vec![36], |_| rng.random_range(-1.0..1.0));
        let cfg = HypernetTrainConfig {
            hidden: vec![16, 16],
            steps: 300,
            ..Default::default()
        };
        let res = train_hypernet(&[(pca, omega)], shape(), &cfg).unwrap();
        assert!(res.final_mse < 1e-8, "{}", res.final_mse);
    }

    #[test]
    fn training_reduces_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let targets: Vec<(Tensor, Tensor)> = (0..6)
            .map(|i| {
                let t = i as f64 / 5.0;
                let pca = Tensor::from_fn(vec![3], |j| (t * (j + 1) as f64).sin());
                let omega = Tensor::from_fn(vec![36], |j| (t + j as f64 * 0.1).cos() + rng.random_range(-0.01..0.01));
                (pca, omega)
            })
            .collect();
        let cfg = HypernetTrainConfig {
            hidden: vec![16, 16],
            steps: 400,
            seed: 1,
            ..Default::default()
        };
        let res = train_hypernet(&targets, shape(), &cfg).unwrap();
        assert!(
            res.final_mse < 0.2 * res.curve[0],
            "{} vs {}",
            res.final_mse,
            res.curve[0]
        );
        let again = train_hypernet(&targets, shape(), &cfg).unwrap();
        assert_eq!(res.curve, again.curve);
    }
}
