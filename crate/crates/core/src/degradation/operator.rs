use crate::degradation::kernel::GaussianKernel;
use crate::degradation::resample::{
    blur_reflect, blur_reflect_adjoint, resample_separable, resample_separable_adjoint, AxisWeights,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `A = bicubic↓f ∘ blur(k)`, with reflect boundaries in both stages.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationOperator {
    factor: usize,
    kernel: GaussianKernel,
}

impl DegradationOperator {
    pub fn new(factor: usize, kernel: GaussianKernel) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("scale factor must be at least 1"));
        }
        Ok(DegradationOperator { factor, kernel })
    }

    /// Gaussian blur of standard deviation `sigma` on its automatic support;
    /// `sigma == 0` gives pure bicubic downsampling.
    pub fn from_sigma(factor: usize, sigma: f64) -> Result<Self> {
        Self::new(factor, GaussianKernel::from_sigma(sigma, None)?)
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn kernel(&self) -> &GaussianKernel {
        &self.kernel
    }

    pub fn sigma(&self) -> f64 {
        self.kernel.sigma()
    }

    pub fn lr_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let f = self.factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(
                "apply_A",
                format!("{h}x{w} image is not divisible by factor {f}"),
            ));
        }
        Ok((h / f, w / f))
    }

    fn axes(&self, h: usize, w: usize) -> Result<(AxisWeights, AxisWeights)> {
        self.lr_dims(h, w)?;
        Ok((
            AxisWeights::bicubic_down(h, self.factor)?,
            AxisWeights::bicubic_down(w, self.factor)?,
        ))
    }

    /// `y = A x` for `x` of shape `[C, H, W]`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, h, w) = x.chw()?;
        let (rows, cols) = self.axes(h, w)?;
        let blurred = blur_reflect(x, self.kernel.profile())?;
        resample_separable(&blurred, &rows, &cols)
    }

    /// `Aᵀ g` for `g` of shape `[C, H/f, W/f]`.
    pub fn adjoint(&self, g: &Tensor) -> Result<Tensor> {
        let (_, h, w) = g.chw()?;
        let (rows, cols) = self.axes(h * self.factor, w * self.factor)?;
        let up = resample_separable_adjoint(g, &rows, &cols)?;
        blur_reflect_adjoint(&up, self.kernel.profile())
    }
}

pub fn apply_a(x: &Tensor, op: &DegradationOperator) -> Result<Tensor> {
    op.apply(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn delta_kernel_factor_one_is_identity() {
        let op = DegradationOperator::from_sigma(1, 0.0).unwrap();
        let x = random(vec![2, 6, 5], 1);
        assert!(op.apply(&x).unwrap().sub(&x).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn preserves_constants() {
        for (f, sigma) in [(2, 0.2), (2, 2.0), (3, 1.3), (4, 4.0)] {
            let op = DegradationOperator::from_sigma(f, sigma).unwrap();
            let x = Tensor::full(vec![1, 12, 24], -0.8);
            let y = op.apply(&x).unwrap();
            assert_eq!(y.shape(), &[1, 12 / f, 24 / f]);
            assert!(y.data().iter().all(|v| (v + 0.8).abs() < 1e-12));
        }
    }

    #[test]
    fn adjoint_inner_product() {
        for (f, sigma) in [(2, 1.0), (3, 0.5), (4, 2.5)] {
            let op = DegradationOperator::from_sigma(f, sigma).unwrap();
            let x = random(vec![2, 12, 24], 2);
            let g = random(vec![2, 12 / f, 24 / f], 3);
            let lhs = op.apply(&x).unwrap().dot(&g).unwrap();
            let rhs = x.dot(&op.adjoint(&g).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn rejects_indivisible() {
        let op = DegradationOperator::from_sigma(3, 1.0).unwrap();
        assert!(op.apply(&Tensor::zeros(vec![1, 10, 9])).is_err());
    }

    #[test]
    fn blur_stage_matches_direct_2d_convolution() {
        // f = 1: A is the blur alone; compare against explicit 2-D reflect convolution.
        let k = GaussianKernel::new(0.9, None).unwrap();
        let op = DegradationOperator::new(1, k.clone()).unwrap();
        let x = random(vec![1, 9, 7], 4);
        let y = op.apply(&x).unwrap();
        let n = k.size();
        let r = (n / 2) as isize;
        let refl = |i: isize, m: usize| crate::degradation::resample::reflect(i, m);
        for yy in 0..9isize {
            for xx in 0..7isize {
                let mut acc = 0.0;
                for a in 0..n {
                    for b in 0..n {
                        let sy = refl(yy + a as isize - r, 9);
                        let sx = refl(xx + b as isize - r, 7);
                        acc += k.taps().data()[a * n + b] * x.data()[sy * 7 + sx];
                    }
                }
                assert!((acc - y.data()[(yy * 7 + xx) as usize]).abs() < 1e-13);
            }
        }
    }
}
