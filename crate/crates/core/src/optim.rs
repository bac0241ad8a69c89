//! Adam with classic L2 weight decay, plus the parameter enumeration trait
//! shared by every trainable structure.

use crate::error::{Error, Result};
use crate::layers::{ConvParams, LinearParams};
use crate::tensor::Tensor;

/// Stable, named enumeration of trainable tensors.
///
/// Gradients are represented by a value of the same type, so `params()` of a
/// model and of its gradient line up element by element.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|(_, t)| t.len()).sum()
    }

    /// `self += other`, entry by entry.
    fn accumulate(&mut self, other: &Self) -> Result<()>
    where
        Self: Sized,
    {
        let src = other.params();
        let dst = self.params_mut();
        if src.len() != dst.len() {
            return Err(Error::shape("accumulate", "parameter sets differ".to_string()));
        }
        for ((_, d), (_, s)) in dst.into_iter().zip(src) {
            d.add_assign(s)?;
        }
        Ok(())
    }

    fn scale_all(&mut self, s: f64) {
        for (_, t) in self.params_mut() {
            for v in t.data_mut() {
                *v *= s;
            }
        }
    }

    fn to_tensors(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|(_, t)| t.clone()).collect()
    }

    fn load_tensors(&mut self, tensors: &[Tensor]) -> Result<()> {
        let dst = self.params_mut();
        if dst.len() != tensors.len() {
            return Err(Error::shape(
                "load_tensors",
                format!("{} tensors for {} parameters", tensors.len(), dst.len()),
            ));
        }
        for ((name, d), s) in dst.into_iter().zip(tensors) {
            if d.shape() != s.shape() {
                return Err(Error::shape(
                    "load_tensors",
                    format!("{name}: {:?} vs {:?}", d.shape(), s.shape()),
                ));
            }
            d.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }
}

pub(crate) fn prefixed<'a>(prefix: &str, inner: Vec<(String, &'a Tensor)>) -> Vec<(String, &'a Tensor)> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

pub(crate) fn prefixed_mut<'a>(prefix: &str, inner: Vec<(String, &'a mut Tensor)>) -> Vec<(String, &'a mut Tensor)> {
    inner.into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)).collect()
}

impl Parameters for ConvParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![("weight".to_string(), &self.weight)];
        if let Some(b) = &self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = vec![("weight".to_string(), &mut self.weight)];
        if let Some(b) = &mut self.bias {
            v.push(("bias".to_string(), b));
        }
        v
    }
}

impl Parameters for LinearParams {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![("weight".into(), &mut self.weight), ("bias".into(), &mut self.bias)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub step: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params.params().iter().map(|(_, t)| t.zeros_like()).collect();
        AdamState {
            second: zeros.clone(),
            first: zeros,
            step: 0,
            config,
        }
    }

    /// One bias-corrected Adam update. Weight decay is added to the gradient
    /// as `wd · param` before the moment updates.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64, weight_decay: f64) -> Result<()> {
        let g: Vec<(String, &Tensor)> = grads.params();
        let p = params.params_mut();
        adam_step(p, &g, self, lr, weight_decay)
    }
}

pub fn adam_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &[(String, &Tensor)],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment blocks",
                params.len(),
                grads.len(),
                state.first.len()
            ),
        ));
    }
    for ((name, p), (_, g)) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{name}: param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (i, ((_, p), (_, g))) in params.into_iter().zip(grads).enumerate() {
        let m = state.first[i].data_mut();
        let v = state.second[i].data_mut();
        for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            let gd = gv + weight_decay * *pv;
            *mv = beta1 * *mv + (1.0 - beta1) * gd;
            *vv = beta2 * *vv + (1.0 - beta2) * gd * gd;
            let mhat = *mv / bc1;
            let vhat = *vv / bc2;
            *pv -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone)]
    struct Scalar(Tensor);

    impl Parameters for Scalar {
        fn params(&self) -> Vec<(String, &Tensor)> {
            vec![("x".into(), &self.0)]
        }
        fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
            vec![("x".into(), &mut self.0)]
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Scalar(Tensor::new(vec![3], vec![1.0, -2.0, 3.0]).unwrap());
        let before = p.0.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let g = Scalar(Tensor::zeros(vec![3]));
        st.step(&mut p, &g, 1e-3, 0.0).unwrap();
        assert_eq!(p.0, before);
    }

    #[test]
    fn zero_lr_is_identity() {
        let mut p = Scalar(Tensor::new(vec![2], vec![1.0, -2.0]).unwrap());
        let before = p.0.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let g = Scalar(Tensor::new(vec![2], vec![0.3, -7.0]).unwrap());
        for _ in 0..5 {
            st.step(&mut p, &g, 0.0, 1e-3).unwrap();
        }
        assert_eq!(p.0, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Scalar(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let mut st = AdamState::new(&p, AdamConfig::default());
        let g = Scalar(Tensor::new(vec![2], vec![0.5, -3.0]).unwrap());
        st.step(&mut p, &g, 1e-3, 0.0).unwrap();
        assert!((p.0.data()[0] + 1e-3).abs() < 1e-10);
        assert!((p.0.data()[1] - 1e-3).abs() < 1e-10);
    }

    #[test]
    fn converges_on_quadratic() {
        // f(x) = (x - 0.5)^2, minimiser 0.5.
        let mut p = Scalar(Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut st = AdamState::new(&p, AdamConfig::default());
        for _ in 0..100 {
            let x = p.0.data()[0];
            let g = Scalar(Tensor::new(vec![1], vec![2.0 * (x - 0.5)]).unwrap());
            st.step(&mut p, &g, 0.02, 0.0).unwrap();
        }
        assert!((p.0.data()[0] - 0.5).abs() < 1e-3, "{}", p.0.data()[0]);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut p = Scalar(Tensor::zeros(vec![1]));
        let mut st = AdamState::new(&p, AdamConfig::default());
        let g = Scalar(Tensor::new(vec![1], vec![f64::NAN]).unwrap());
        let err = st.step(&mut p, &g, 1e-3, 0.0).unwrap_err();
        assert!(err.to_string().contains("gradient of x"));
        assert_eq!(st.step, 0);
    }
}
