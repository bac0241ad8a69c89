use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Isotropic, normalised Gaussian blur kernel on an odd square support.
///
/// `sigma == 0` denotes the delta kernel (pure bicubic degradation).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianKernel {
    sigma: f64,
    size: usize,
    /// Normalised 1-D profile; the 2-D taps are its outer product.
    profile: Vec<f64>,
    taps: Tensor,
}

/// Smallest odd integer ≥ 6σ (at least 1).
pub fn auto_size(sigma: f64) -> usize {
    let s = (6.0 * sigma).ceil().max(1.0) as usize;
    if s % 2 == 0 {
        s + 1
    } else {
        s
    }
}

impl GaussianKernel {
    pub fn new(sigma: f64, size: Option<usize>) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::invalid(format!("Gaussian sigma must be > 0, got {sigma}")));
        }
        let size = size.unwrap_or_else(|| auto_size(sigma));
        if size % 2 == 0 {
            return Err(Error::invalid(format!("kernel size must be odd, got {size}")));
        }
        let r = (size / 2) as isize;
        let raw: Vec<f64> = (-r..=r)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
            .collect();
        let total: f64 = raw.iter().sum();
        let profile: Vec<f64> = raw.iter().map(|v| v / total).collect();
        Ok(Self::from_profile(sigma, profile))
    }

    pub fn delta() -> Self {
        Self::delta_sized(1)
    }

    pub fn delta_sized(size: usize) -> Self {
        let mut profile = vec![0.0; size.max(1) | 1];
        let mid = profile.len() / 2;
        profile[mid] = 1.0;
        Self::from_profile(0.0, profile)
    }

    /// `sigma == 0` maps to the delta kernel.
    pub fn from_sigma(sigma: f64, size: Option<usize>) -> Result<Self> {
        if sigma == 0.0 {
            Ok(Self::delta_sized(size.unwrap_or(1)))
        } else {
            Self::new(sigma, size)
        }
    }

    fn from_profile(sigma: f64, profile: Vec<f64>) -> Self {
        let size = profile.len();
        let taps = Tensor::from_fn(vec![size, size], |i| profile[i / size] * profile[i % size]);
        GaussianKernel {
            sigma,
            size,
            profile,
            taps,
        }
    }

    /// The same kernel re-evaluated on another odd support.
    pub fn with_size(&self, size: usize) -> Result<Self> {
        Self::from_sigma(self.sigma, Some(size))
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_delta(&self) -> bool {
        self.sigma == 0.0
    }

    pub fn taps(&self) -> &Tensor {
        &self.taps
    }

    pub fn profile(&self) -> &[f64] {
        &self.profile
    }
}

pub fn gaussian_kernel(sigma: f64, size: Option<usize>) -> Result<GaussianKernel> {
    GaussianKernel::new(sigma, size)
}

/// Blur standard deviations used for each scale factor, in tenths of a pixel.
pub fn sigma_range(factor: usize) -> Result<(u32, u32)> {
    match factor {
        2 => Ok((2, 20)),
        3 => Ok((2, 30)),
        4 => Ok((2, 40)),
        _ => Err(Error::invalid(format!(
            "no kernel bank for factor {factor} (supported: 2, 3, 4)"
        ))),
    }
}

pub fn bank_sigmas(factor: usize) -> Result<Vec<f64>> {
    let (lo, hi) = sigma_range(factor)?;
    Ok((lo..=hi).map(|t| t as f64 / 10.0).collect())
}

/// Support shared by all kernels of the factor's bank.
pub fn bank_support(factor: usize) -> Result<usize> {
    let (_, hi) = sigma_range(factor)?;
    Ok(auto_size(hi as f64 / 10.0))
}

/// Kernel of standard deviation `sigma` on the bank support of `factor`
/// (`sigma == 0` gives the delta kernel).
pub fn bank_kernel(factor: usize, sigma: f64) -> Result<GaussianKernel> {
    GaussianKernel::from_sigma(sigma, Some(bank_support(factor)?))
}

/// All Gaussian kernels for the factor's σ grid (step 0.1), on the common
/// support of the widest kernel.
pub fn kernel_bank(factor: usize) -> Result<Vec<GaussianKernel>> {
    let sigmas = bank_sigmas(factor)?;
    let size = auto_size(*sigmas.last().expect("non-empty range"));
    sigmas.into_iter().map(|s| GaussianKernel::new(s, Some(size))).collect()
}
