//! Separable antialiased bicubic downsampling and reflect-padded blur, each
//! with its exact adjoint.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Keys cubic coefficient.
pub const BICUBIC_A: f64 = -0.5;

/// Mirror an index into `[0, n)` without repeating the edge sample
/// (`-1 → 1`, `n → n - 2`).
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

pub fn cubic_weight(x: f64) -> f64 {
    let a = BICUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        (a + 2.0) * x * x * x - (a + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        a * x * x * x - 5.0 * a * x * x + 8.0 * a * x - 4.0 * a
    } else {
        0.0
    }
}

/// Sparse 1-D resampling matrix: for each output sample, `(input index, weight)`.
#[derive(Clone, Debug)]
pub struct AxisWeights {
    pub input_len: usize,
    pub taps: Vec<Vec<(usize, f64)>>,
}

impl AxisWeights {
    /// Downsampling by `factor`: output `j` is centred on input coordinate
    /// `(j + 0.5)·f − 0.5` and the cubic kernel is stretched by `f`.
    pub fn bicubic_down(input_len: usize, factor: usize) -> Result<Self> {
        if factor == 0 || input_len % factor != 0 {
            return Err(Error::shape(
                "bicubic_downsample",
                format!("length {input_len} not divisible by factor {factor}"),
            ));
        }
        let f = factor as f64;
        let taps = (0..input_len / factor)
            .map(|j| {
                let c = (j as f64 + 0.5) * f - 0.5;
                let lo = (c - 2.0 * f).floor() as isize;
                let hi = (c + 2.0 * f).ceil() as isize;
                let raw: Vec<(isize, f64)> = (lo..=hi)
                    .map(|i| (i, cubic_weight((i as f64 - c) / f) / f))
                    .filter(|&(_, w)| w != 0.0)
                    .collect();
                let total: f64 = raw.iter().map(|&(_, w)| w).sum();
                raw.into_iter()
                    .map(|(i, w)| (reflect(i, input_len), w / total))
                    .collect()
            })
            .collect();
        Ok(AxisWeights { input_len, taps })
    }

    /// Bicubic interpolation upsampling by `factor` (no antialiasing).
    pub fn bicubic_up(input_len: usize, factor: usize) -> Self {
        let f = factor as f64;
        let taps = (0..input_len * factor)
            .map(|j| {
                let c = (j as f64 + 0.5) / f - 0.5;
                let lo = c.floor() as isize - 1;
                let raw: Vec<(isize, f64)> = (lo..lo + 4)
                    .map(|i| (i, cubic_weight(i as f64 - c)))
                    .filter(|&(_, w)| w != 0.0)
                    .collect();
                let total: f64 = raw.iter().map(|&(_, w)| w).sum();
                raw.into_iter()
                    .map(|(i, w)| (reflect(i, input_len), w / total))
                    .collect()
            })
            .collect();
        AxisWeights { input_len, taps }
    }

    pub fn output_len(&self) -> usize {
        self.taps.len()
    }
}

/// Apply `rows` along H and `cols` along W of every channel.
pub fn resample_separable(x: &Tensor, rows: &AxisWeights, cols: &AxisWeights) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    if rows.input_len != h || cols.input_len != w {
        return Err(Error::shape(
            "resample",
            format!("weights for {}x{}, image {h}x{w}", rows.input_len, cols.input_len),
        ));
    }
    let (oh, ow) = (rows.output_len(), cols.output_len());
    let src = x.data();
    let mut tmp = vec![0.0; h * ow];
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let row = &plane[y * w..(y + 1) * w];
            for (ox, taps) in cols.taps.iter().enumerate() {
                tmp[y * ow + ox] = taps.iter().map(|&(i, wt)| wt * row[i]).sum();
            }
        }
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, taps) in rows.taps.iter().enumerate() {
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for &(i, wt) in taps {
                for (d, &t) in drow.iter_mut().zip(&tmp[i * ow..(i + 1) * ow]) {
                    *d += wt * t;
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Adjoint of [`resample_separable`].
pub fn resample_separable_adjoint(g: &Tensor, rows: &AxisWeights, cols: &AxisWeights) -> Result<Tensor> {
    let (c, oh, ow) = g.chw()?;
    if rows.output_len() != oh || cols.output_len() != ow {
        return Err(Error::shape(
            "resample_adjoint",
            format!(
                "weights produce {}x{}, gradient is {oh}x{ow}",
                rows.output_len(),
                cols.output_len()
            ),
        ));
    }
    let (h, w) = (rows.input_len, cols.input_len);
    let src = g.data();
    let mut out = vec![0.0; c * h * w];
    let mut tmp = vec![0.0; h * ow];
    for ch in 0..c {
        tmp.fill(0.0);
        let gplane = &src[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, taps) in rows.taps.iter().enumerate() {
            let grow = &gplane[oy * ow..(oy + 1) * ow];
            for &(i, wt) in taps {
                for (t, &gv) in tmp[i * ow..(i + 1) * ow].iter_mut().zip(grow) {
                    *t += wt * gv;
                }
            }
        }
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let drow = &mut dst[y * w..(y + 1) * w];
            for (ox, taps) in cols.taps.iter().enumerate() {
                let t = tmp[y * ow + ox];
                for &(i, wt) in taps {
                    drow[i] += wt * t;
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn bicubic_downsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    let rows = AxisWeights::bicubic_down(h, factor)?;
    let cols = AxisWeights::bicubic_down(w, factor)?;
    resample_separable(x, &rows, &cols)
}

pub fn bicubic_upsample(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    resample_separable(
        x,
        &AxisWeights::bicubic_up(h, factor),
        &AxisWeights::bicubic_up(w, factor),
    )
}

/// Reflect-padded separable filtering with a symmetric 1-D `profile`.
pub fn blur_reflect(x: &Tensor, profile: &[f64]) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    let rows = blur_axis(h, profile);
    let cols = blur_axis(w, profile);
    resample_separable(x, &rows, &cols)
}

pub fn blur_reflect_adjoint(g: &Tensor, profile: &[f64]) -> Result<Tensor> {
    let (_, h, w) = g.chw()?;
    resample_separable_adjoint(g, &blur_axis(h, profile), &blur_axis(w, profile))
}

pub(crate) fn blur_axis(n: usize, profile: &[f64]) -> AxisWeights {
    let r = (profile.len() / 2) as isize;
    let taps = (0..n as isize)
        .map(|y| {
            profile
                .iter()
                .enumerate()
                .filter(|(_, &p)| p != 0.0)
                .map(|(d, &p)| (reflect(y + d as isize - r, n), p))
                .collect()
        })
        .collect();
    AxisWeights { input_len: n, taps }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(0.0..1.0))
    }

    fn flip_w(t: &Tensor) -> Tensor {
        let (_, h, w) = t.chw().unwrap();
        Tensor::from_fn(t.shape().to_vec(), |i| {
            let x = i % w;
            t.data()[i - x + (w - 1 - x)]
        })
        .reshape(vec![t.shape()[0], h, w])
        .unwrap()
    }

    fn flip_h(t: &Tensor) -> Tensor {
        let (_, h, w) = t.chw().unwrap();
        Tensor::from_fn(t.shape().to_vec(), |i| {
            let ch = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            t.data()[ch * h * w + (h - 1 - y) * w + x]
        })
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-4, 5), 4);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(9, 5), 1);
        assert_eq!(reflect(-7, 3), 1);
        assert_eq!(reflect(3, 1), 0);
    }

    #[test]
    fn cubic_weight_knots() {
        assert_eq!(cubic_weight(0.0), 1.0);
        assert_eq!(cubic_weight(1.0), 0.0);
        assert_eq!(cubic_weight(2.0), 0.0);
        assert!((cubic_weight(0.5) - 0.5625).abs() < 1e-15);
        assert!((cubic_weight(1.5) + 0.0625).abs() < 1e-15);
    }

    #[test]
    fn constant_image_is_preserved() {
        for f in 1..=4 {
            let x = Tensor::full(vec![2, 12, 24], 0.3);
            let y = bicubic_downsample(&x, f).unwrap();
            assert_eq!(y.shape(), &[2, 12 / f, 24 / f]);
            assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-14));
        }
    }

    #[test]
    fn factor_one_is_identity() {
        let x = random(vec![1, 7, 5], 1);
        let y = bicubic_downsample(&x, 1).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_indivisible() {
        assert!(bicubic_downsample(&Tensor::zeros(vec![1, 9, 8]), 2).is_err());
    }

    #[test]
    fn matches_dense_weights() {
        // Direct 2-D evaluation of the same formula, without the separable path.
        let x = random(vec![1, 8, 8], 2);
        let y = bicubic_downsample(&x, 2).unwrap();
        let f = 2.0;
        for oy in 0..4 {
            for ox in 0..4 {
                let cy = (oy as f64 + 0.5) * f - 0.5;
                let cx = (ox as f64 + 0.5) * f - 0.5;
                let mut acc = 0.0;
                let mut norm_y = 0.0;
                let mut norm_x = 0.0;
                for i in -4..12isize {
                    norm_y += cubic_weight((i as f64 - cy) / f) / f;
                    norm_x += cubic_weight((i as f64 - cx) / f) / f;
                }
                for i in -4..12isize {
                    for j in -4..12isize {
                        let wy = cubic_weight((i as f64 - cy) / f) / f / norm_y;
                        let wx = cubic_weight((j as f64 - cx) / f) / f / norm_x;
                        acc += wy * wx * x.data()[reflect(i, 8) * 8 + reflect(j, 8)];
                    }
                }
                assert!((acc - y.data()[oy * 4 + ox]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn commutes_with_flips() {
        let x = random(vec![1, 12, 12], 3);
        for f in [2, 3, 4] {
            let a = bicubic_downsample(&flip_w(&x), f).unwrap();
            let b = flip_w(&bicubic_downsample(&x, f).unwrap());
            assert!(a.sub(&b).unwrap().max_abs() < 1e-13);
            let a = bicubic_downsample(&flip_h(&x), f).unwrap();
            let b = flip_h(&bicubic_downsample(&x, f).unwrap());
            assert!(a.sub(&b).unwrap().max_abs() < 1e-13);
        }
    }

    #[test]
    fn adjoints_satisfy_inner_product_identity() {
        let x = random(vec![2, 12, 8], 4);
        let g = random(vec![2, 6, 4], 5);
        let rows = AxisWeights::bicubic_down(12, 2).unwrap();
        let cols = AxisWeights::bicubic_down(8, 2).unwrap();
        let lhs = resample_separable(&x, &rows, &cols).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&resample_separable_adjoint(&g, &rows, &cols).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);

        let profile = [0.1, 0.2, 0.4, 0.2, 0.1];
        let g = random(vec![2, 12, 8], 6);
        let lhs = blur_reflect(&x, &profile).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&blur_reflect_adjoint(&g, &profile).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn upsample_preserves_constants() {
        let x = Tensor::full(vec![1, 5, 5], 0.7);
        let y = bicubic_upsample(&x, 3).unwrap();
        assert_eq!(y.shape(), &[1, 15, 15]);
        assert!(y.data().iter().all(|v| (v - 0.7).abs() < 1e-14));
    }
}
