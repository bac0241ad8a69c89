use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, linear, linear_backward, Activation,
    ConvParams, LinearParams,
};
use crate::optim::{prefixed, prefixed_mut, Parameters};
use crate::tensor::Tensor;

/// Probabilities are kept this far away from 0 and 1.
pub const PROB_MARGIN: f64 = 1e-7;
pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscArch {
    pub channels: usize,
    /// Output widths of the stride-2 convolutions.
    pub widths: Vec<usize>,
}

impl DiscArch {
    pub fn paper(channels: usize) -> Self {
        DiscArch {
            channels,
            widths: vec![32, 64, 128, 256],
        }
    }

    pub fn desk(channels: usize) -> Self {
        DiscArch {
            channels,
            widths: vec![8, 16, 32, 64],
        }
    }
}

/// `d_φ(x)`: strided 3×3 convs with leaky ReLU, global average, linear, sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub convs: Vec<ConvParams>,
    pub head: LinearParams,
}

#[derive(Clone, Debug, Default)]
pub struct DiscCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    pooled: Tensor,
    logit: f64,
    prob: f64,
}

impl DiscCache {
    pub fn prob(&self) -> f64 {
        self.prob
    }

    pub fn logit(&self) -> f64 {
        self.logit
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Discriminator {
    pub fn zeros(arch: &DiscArch) -> Result<Self> {
        if arch.widths.is_empty() || arch.channels == 0 {
            return Err(Error::invalid("discriminator needs at least one conv layer"));
        }
        let mut convs = Vec::with_capacity(arch.widths.len());
        let mut c_in = arch.channels;
        for &w in &arch.widths {
            convs.push(ConvParams::zeros(w, c_in, 3, 2, 1, true));
            c_in = w;
        }
        Ok(Discriminator {
            convs,
            head: LinearParams::zeros(1, c_in),
        })
    }

    pub fn init(arch: &DiscArch, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut d = Self::zeros(arch)?;
        for c in &mut d.convs {
            *c = c.clone().init_he(1.0, &mut rng);
        }
        d.head = d.head.clone().init_he(0.5, &mut rng);
        Ok(d)
    }

    pub fn arch(&self) -> DiscArch {
        DiscArch {
            channels: self.convs[0].dims().1,
            widths: self.convs.iter().map(|c| c.dims().0).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Discriminator {
            convs: self.convs.iter().map(ConvParams::zeros_like).collect(),
            head: LinearParams::zeros(self.head.out_dim(), self.head.in_dim()),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<f64> {
        Ok(self.forward_cached(x)?.prob)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<DiscCache> {
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        let mut cache = DiscCache::default();
        let mut h = x.clone();
        for c in &self.convs {
            let pre = conv2d(&h, c)?;
            cache.inputs.push(h);
            h = act.forward(&pre);
            cache.pre.push(pre);
        }
        cache.pooled = global_avg_pool(&h)?;
        cache.logit = linear(&cache.pooled, &self.head)?.data()[0];
        cache.prob = sigmoid(cache.logit).clamp(PROB_MARGIN, 1.0 - PROB_MARGIN);
        Ok(cache)
    }

    /// Gradients of a loss with `∂L/∂d = grad_prob`: parameters and input image.
    pub fn backward(&self, cache: &DiscCache, grad_prob: f64) -> Result<(Discriminator, Tensor)> {
        let act = Activation::LeakyRelu(LEAKY_SLOPE);
        let s = sigmoid(cache.logit);
        // The clamp is flat outside the margin.
        let dz = if s < PROB_MARGIN || s > 1.0 - PROB_MARGIN {
            0.0
        } else {
            grad_prob * s * (1.0 - s)
        };
        let mut g = self.zeros_like();
        let hg = linear_backward(&Tensor::new(vec![1], vec![dz])?, &cache.pooled, &self.head)?;
        g.head.weight = hg.weight;
        g.head.bias = hg.bias;
        let last_shape = cache.pre.last().expect("non-empty").shape().to_vec();
        let mut d = global_avg_pool_backward(&hg.input, &last_shape)?;
        for i in (0..self.convs.len()).rev() {
            let dpre = act.backward(&d, &cache.pre[i])?;
            let cg = conv2d_backward(&dpre, &cache.inputs[i], &self.convs[i])?;
            g.convs[i].weight = cg.weight;
            g.convs[i].bias = cg.bias;
            d = cg.input;
        }
        Ok((g, d))
    }
}

impl Parameters for Discriminator {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = self
            .convs
            .iter()
            .enumerate()
            .flat_map(|(i, c)| prefixed(&format!("conv{i}"), c.params()))
            .collect();
        v.extend(prefixed("head", self.head.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v: Vec<(String, &mut Tensor)> = self
            .convs
            .iter_mut()
            .enumerate()
            .flat_map(|(i, c)| prefixed_mut(&format!("conv{i}"), c.params_mut()))
            .collect();
        v.extend(prefixed_mut("head", self.head.params_mut()));
        v
    }
}

pub fn discriminator_forward(x: &Tensor, d: &Discriminator) -> Result<f64> {
    d.forward(x)
}
