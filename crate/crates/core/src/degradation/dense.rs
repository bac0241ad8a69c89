//! Dense materialisation of `A` and the SVD pseudo-inverse used as an oracle.

use nalgebra::DMatrix;

use crate::degradation::operator::DegradationOperator;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest HR pixel count that may be materialised.
pub const DEFAULT_DENSE_CAP: usize = 64 * 64;

/// Relative singular-value cutoff for the pseudo-inverse and rank.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// A single-channel linear map between images, stored as `[rows, cols]`.
#[derive(Clone, Debug)]
pub struct DenseOperator {
    pub matrix: Tensor,
    /// Spatial dims of the input image.
    pub source: (usize, usize),
    /// Spatial dims of the output image.
    pub target: (usize, usize),
}

impl DenseOperator {
    pub fn rows(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows(), self.cols(), self.matrix.data())
    }

    pub fn from_nalgebra(m: &DMatrix<f64>, source: (usize, usize), target: (usize, usize)) -> Result<Self> {
        let (r, c) = m.shape();
        let data: Vec<f64> = (0..r).flat_map(|i| (0..c).map(move |j| m[(i, j)])).collect();
        Ok(DenseOperator {
            matrix: Tensor::new(vec![r, c], data)?,
            source,
            target,
        })
    }

    /// Apply to every channel of a `[C, H, W]` image.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (c, h, w) = x.chw()?;
        if (h, w) != self.source {
            return Err(Error::shape(
                "dense_apply",
                format!("operator expects {:?}, image is {h}x{w}", self.source),
            ));
        }
        let (rows, cols) = (self.rows(), self.cols());
        let m = self.matrix.data();
        let mut out = Vec::with_capacity(c * rows);
        for ch in 0..c {
            let v = x.channel(ch)?;
            for r in 0..rows {
                let row = &m[r * cols..(r + 1) * cols];
                out.push(row.iter().zip(v).map(|(a, b)| a * b).sum());
            }
        }
        Tensor::new(vec![c, self.target.0, self.target.1], out)
    }

    pub fn compose(&self, rhs: &DenseOperator) -> Result<DenseOperator> {
        if rhs.target != self.source {
            return Err(Error::shape(
                "compose",
                format!("{:?} feeds {:?}", rhs.target, self.source),
            ));
        }
        let m = self.to_nalgebra() * rhs.to_nalgebra();
        Self::from_nalgebra(&m, rhs.source, self.target)
    }

    /// Number of singular values above `RANK_TOLERANCE · σ_max`.
    pub fn rank(&self) -> Result<usize> {
        let sv = self.to_nalgebra().singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        Ok(sv.iter().filter(|&&s| s > RANK_TOLERANCE * smax).count())
    }

    pub fn singular_values(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.to_nalgebra().singular_values().iter().cloned().collect();
        v.sort_by(|a, b| b.total_cmp(a));
        v
    }
}

/// Materialise `A` for `H × W` single-channel images, column by column.
pub fn materialize_a(op: &DegradationOperator, h: usize, w: usize) -> Result<DenseOperator> {
    materialize_a_capped(op, h, w, DEFAULT_DENSE_CAP)
}

pub fn materialize_a_capped(op: &DegradationOperator, h: usize, w: usize, cap: usize) -> Result<DenseOperator> {
    if h * w > cap {
        return Err(Error::invalid(format!(
            "dense materialisation of {h}x{w} exceeds the cap of {cap} pixels"
        )));
    }
    let (lh, lw) = op.lr_dims(h, w)?;
    materialize_columns(|x| op.apply(x), (h, w), (lh, lw))
}

/// Build a dense matrix from any linear image map by probing unit images.
pub fn materialize_columns(
    map: impl Fn(&Tensor) -> Result<Tensor>,
    source: (usize, usize),
    target: (usize, usize),
) -> Result<DenseOperator> {
    let n = source.0 * source.1;
    let m = target.0 * target.1;
    let mut data = vec![0.0; m * n];
    let mut e = Tensor::zeros(vec![1, source.0, source.1]);
    for j in 0..n {
        e.data_mut()[j] = 1.0;
        let col = map(&e)?;
        e.data_mut()[j] = 0.0;
        if col.len() != m {
            return Err(Error::shape(
                "materialize",
                format!("map produced {} values, expected {m}", col.len()),
            ));
        }
        for (i, v) in col.data().iter().enumerate() {
            data[i * n + j] = *v;
        }
    }
    Ok(DenseOperator {
        matrix: Tensor::new(vec![m, n], data)?,
        source,
        target,
    })
}

/// Moore–Penrose pseudo-inverse via SVD, truncating singular values below
/// `RANK_TOLERANCE · σ_max`.
pub fn pinv_oracle(a: &DenseOperator) -> Result<DenseOperator> {
    let m = a.to_nalgebra();
    let svd = m.svd(true, true);
    let u = svd
        .u
        .as_ref()
        .ok_or_else(|| Error::Linalg("SVD did not return U".into()))?;
    let vt = svd
        .v_t
        .as_ref()
        .ok_or_else(|| Error::Linalg("SVD did not return Vᵀ".into()))?;
    let s = &svd.singular_values;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Linalg("non-finite singular values".into()));
    }
    let smax = s.iter().cloned().fold(0.0, f64::max);
    let mut vs = vt.transpose();
    for (k, &sk) in s.iter().enumerate() {
        let inv = if sk > RANK_TOLERANCE * smax { 1.0 / sk } else { 0.0 };
        vs.column_mut(k).scale_mut(inv);
    }
    let p = vs * u.transpose();
    DenseOperator::from_nalgebra(&p, a.target, a.source)
}
