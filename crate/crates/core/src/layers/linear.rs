use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fully connected layer `W·x + b` with `W: [M, N]`, `b: [M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearParams {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearParams {
            weight: Tensor::zeros(vec![out_dim, in_dim]),
            bias: Tensor::zeros(vec![out_dim]),
        }
    }

    pub fn init_he<R: Rng + ?Sized>(mut self, gain: f64, rng: &mut R) -> Self {
        let std = gain * (2.0 / self.in_dim() as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in self.weight.data_mut() {
            *v = normal.sample(rng);
        }
        self
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    fn check(&self, input: &Tensor) -> Result<()> {
        if self.weight.rank() != 2 || self.bias.shape() != [self.out_dim()] {
            return Err(Error::shape(
                "linear",
                format!("weight {:?} / bias {:?}", self.weight.shape(), self.bias.shape()),
            ));
        }
        if input.len() != self.in_dim() {
            return Err(Error::shape(
                "linear",
                format!("input has {} values, layer expects {}", input.len(), self.in_dim()),
            ));
        }
        Ok(())
    }
}

pub fn linear(input: &Tensor, p: &LinearParams) -> Result<Tensor> {
    p.check(input)?;
    let n = p.in_dim();
    let x = input.data();
    let out = p
        .weight
        .data()
        .chunks_exact(n)
        .zip(p.bias.data())
        .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    Tensor::new(vec![p.out_dim()], out)
}

pub fn linear_backward(grad_out: &Tensor, input: &Tensor, p: &LinearParams) -> Result<LinearGrads> {
    p.check(input)?;
    if grad_out.len() != p.out_dim() {
        return Err(Error::shape(
            "linear_backward",
            format!(
                "grad_out has {} values, layer has {} outputs",
                grad_out.len(),
                p.out_dim()
            ),
        ));
    }
    let n = p.in_dim();
    let x = input.data();
    let g = grad_out.data();
    let mut gin = vec![0.0; n];
    let mut gw = vec![0.0; p.weight.len()];
    for (m, (row, grow)) in p.weight.data().chunks_exact(n).zip(gw.chunks_exact_mut(n)).enumerate() {
        let gm = g[m];
        if gm == 0.0 {
            continue;
        }
        for j in 0..n {
            gin[j] += row[j] * gm;
            grow[j] = gm * x[j];
        }
    }
    Ok(LinearGrads {
        input: Tensor::new(input.shape().to_vec(), gin)?,
        weight: Tensor::new(p.weight.shape().to_vec(), gw)?,
        bias: Tensor::new(vec![p.out_dim()], g.to_vec())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnObjective, GradCheckOptions};

    #[test]
    fn identity_and_zero_weights() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut p = LinearParams::zeros(3, 3);
        for i in 0..3 {
            p.weight.data_mut()[i * 3 + i] = 1.0;
        }
        assert_eq!(linear(&x, &p).unwrap(), x);
        let mut z = LinearParams::zeros(2, 3);
        z.bias = Tensor::new(vec![2], vec![4.0, 5.0]).unwrap();
        assert_eq!(linear(&x, &z).unwrap().data(), &[4.0, 5.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let p = LinearParams::zeros(2, 3);
        assert!(linear(&Tensor::zeros(vec![4]), &p).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = Tensor::from_fn(vec![6], |i| (i as f64).sin());
        let w = Tensor::from_fn(vec![4, 6], |i| (i as f64 * 0.7).cos());
        let b = Tensor::from_fn(vec![4], |i| i as f64 * 0.1);
        let probe = Tensor::from_fn(vec![4], |i| 1.0 - i as f64 * 0.3);
        let obj = FnObjective::new(
            |t: &[Tensor]| {
                let p = LinearParams {
                    weight: t[1].clone(),
                    bias: t[2].clone(),
                };
                linear(&t[0], &p)?.dot(&probe)
            },
            |t: &[Tensor]| {
                let p = LinearParams {
                    weight: t[1].clone(),
                    bias: t[2].clone(),
                };
                let v = linear(&t[0], &p)?.dot(&probe)?;
                let g = linear_backward(&probe, &t[0], &p)?;
                Ok((v, vec![g.input, g.weight, g.bias]))
            },
        );
        let r = grad_check(&obj, &[x, w, b], &GradCheckOptions::default()).unwrap();
        assert!(r.passed(), "{r}");
    }
}
