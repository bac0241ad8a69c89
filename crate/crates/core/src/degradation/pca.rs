use nalgebra::{DMatrix, SymmetricEigen};

use crate::degradation::kernel::GaussianKernel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_PCA_DIM: usize = 15;

/// Principal components of a kernel bank, each kernel flattened row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelPca {
    pub mean: Tensor,
    /// `[d, size²]`, orthonormal rows in order of decreasing variance.
    pub basis: Tensor,
    pub eigenvalues: Vec<f64>,
    pub kernel_size: usize,
}

impl KernelPca {
    pub fn dim(&self) -> usize {
        self.basis.shape()[0]
    }

    pub fn project(&self, k: &GaussianKernel) -> Result<Tensor> {
        pca_project(k, self)
    }

    /// `basis · (vec(taps) − mean)` for raw taps on this basis' support.
    pub fn project_taps(&self, taps: &Tensor) -> Result<Tensor> {
        let n = self.mean.len();
        if taps.len() != n {
            return Err(Error::shape(
                "pca_project",
                format!("{} taps vs PCA support of {n}", taps.len()),
            ));
        }
        let b = self.basis.data();
        let centered: Vec<f64> = taps.data().iter().zip(self.mean.data()).map(|(a, m)| a - m).collect();
        let coeffs = (0..self.dim())
            .map(|r| b[r * n..(r + 1) * n].iter().zip(&centered).map(|(u, v)| u * v).sum())
            .collect();
        Tensor::new(vec![self.dim()], coeffs)
    }

    /// Project the Gaussian of the given σ evaluated on this basis' support.
    pub fn project_sigma(&self, sigma: f64) -> Result<Tensor> {
        self.project(&GaussianKernel::from_sigma(sigma, Some(self.kernel_size))?)
    }

    /// `mean + basisᵀ · coeffs`, reshaped to `[size, size]`.
    pub fn reconstruct(&self, coeffs: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if coeffs.len() != d {
            return Err(Error::shape(
                "pca_reconstruct",
                format!("{} coefficients for d = {d}", coeffs.len()),
            ));
        }
        let n = self.mean.len();
        let b = self.basis.data();
        let mut out = self.mean.data().to_vec();
        for (r, &c) in coeffs.data().iter().enumerate() {
            for (o, &v) in out.iter_mut().zip(&b[r * n..(r + 1) * n]) {
                *o += c * v;
            }
        }
        Tensor::new(vec![self.kernel_size, self.kernel_size], out)
    }
}

pub fn pca_fit(bank: &[GaussianKernel], d: usize) -> Result<KernelPca> {
    let first = bank
        .first()
        .ok_or_else(|| Error::invalid("cannot fit PCA to an empty kernel bank"))?;
    if d == 0 || d > bank.len() {
        return Err(Error::invalid(format!(
            "PCA dimension {d} must be in 1..={} (bank size)",
            bank.len()
        )));
    }
    let size = first.size();
    if bank.iter().any(|k| k.size() != size) {
        return Err(Error::invalid("kernels in a bank must share one support size"));
    }
    let n = size * size;
    let m = bank.len();
    let mut mean = vec![0.0; n];
    for k in bank {
        for (a, v) in mean.iter_mut().zip(k.taps().data()) {
            *a += v / m as f64;
        }
    }
    let centered = DMatrix::from_fn(m, n, |i, j| bank[i].taps().data()[j] - mean[j]);
    let cov = centered.transpose() * &centered / m as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut basis = Vec::with_capacity(d * n);
    let mut eigenvalues = Vec::with_capacity(d);
    for &k in order.iter().take(d) {
        let col = eig.eigenvectors.column(k);
        // Sign convention: the largest-magnitude component is positive.
        let pivot = col
            .iter()
            .cloned()
            .fold(0.0, |m: f64, v| if v.abs() > m.abs() { v } else { m });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        basis.extend(col.iter().map(|v| sign * v));
        eigenvalues.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(KernelPca {
        mean: Tensor::new(vec![n], mean)?,
        basis: Tensor::new(vec![d, n], basis)?,
        eigenvalues,
        kernel_size: size,
    })
}

pub fn pca_project(k: &GaussianKernel, pca: &KernelPca) -> Result<Tensor> {
    if k.size() != pca.kernel_size {
        return Err(Error::shape(
            "pca_project",
            format!("kernel size {} vs PCA support {}", k.size(), pca.kernel_size),
        ));
    }
    pca.project_taps(k.taps())
}
