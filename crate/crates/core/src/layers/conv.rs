//! 2-D cross-correlation over `[C, H, W]` tensors with zero padding.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    /// `[C_out, C_in, kH, kW]`
    pub weight: Tensor,
    /// `[C_out]`
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Tensor>, stride: usize, pad: usize) -> Result<Self> {
        if weight.rank() != 4 {
            return Err(Error::shape(
                "ConvParams",
                format!("weight must be [C_out,C_in,kH,kW], got {:?}", weight.shape()),
            ));
        }
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be >= 1"));
        }
        if let Some(b) = &bias {
            if b.shape() != [weight.shape()[0]] {
                return Err(Error::shape(
                    "ConvParams",
                    format!("bias {:?} vs {} output channels", b.shape(), weight.shape()[0]),
                ));
            }
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            pad,
        })
    }

    pub fn zeros(c_out: usize, c_in: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Self {
        ConvParams {
            weight: Tensor::zeros(vec![c_out, c_in, k, k]),
            bias: bias.then(|| Tensor::zeros(vec![c_out])),
            stride,
            pad,
        }
    }

    /// Odd square kernel, stride 1, padding that preserves the spatial size.
    pub fn same(c_out: usize, c_in: usize, k: usize, bias: bool) -> Self {
        Self::zeros(c_out, c_in, k, 1, k / 2, bias)
    }

    /// He-normal weights scaled by `gain`, zero bias.
    pub fn init_he<R: Rng + ?Sized>(mut self, gain: f64, rng: &mut R) -> Self {
        let (_, c_in, kh, kw) = self.dims();
        let std = gain * (2.0 / (c_in * kh * kw) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("finite std");
        for v in self.weight.data_mut() {
            *v = normal.sample(rng);
        }
        self
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.weight.shape();
        (s[0], s[1], s[2], s[3])
    }

    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (_, _, kh, kw) = self.dims();
        let ph = h + 2 * self.pad;
        let pw = w + 2 * self.pad;
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} with pad {} is smaller than kernel {kh}x{kw}", self.pad),
            ));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    pub fn zeros_like(&self) -> Self {
        ConvParams {
            weight: self.weight.zeros_like(),
            bias: self.bias.as_ref().map(Tensor::zeros_like),
            stride: self.stride,
            pad: self.pad,
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input.chw()?;
        let (_, c_in, _, _) = self.dims();
        if c != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c} channels, kernel expects {c_in}"),
            ));
        }
        Ok((c, h, w))
    }
}

/// Output indices `[lo, hi)` whose tap `k` lands inside an input of length `len`.
#[inline]
fn valid_range(out_len: usize, len: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let last = len as isize - 1 + pad as isize - k as isize;
    let hi = if last < 0 {
        0
    } else {
        (last as usize / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    let (_, h, w) = p.check_input(input)?;
    let (c_out, c_in, kh, kw) = p.dims();
    let (ho, wo) = p.output_dims(h, w)?;
    let (s, pad) = (p.stride, p.pad);
    let x = input.data();
    let wt = p.weight.data();
    let mut out = vec![0.0; c_out * ho * wo];

    for co in 0..c_out {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        if let Some(b) = &p.bias {
            plane.fill(b.data()[co]);
        }
        for ci in 0..c_in {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, pad);
                for kx in 0..kw {
                    let wv = wt[((co * c_in + ci) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(wo, w, kx, s, pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let orow = &mut plane[oy * wo..(oy + 1) * wo];
                        let irow = &xin[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let shift = kx as isize - pad as isize;
                            let src = &irow[(ox_lo as isize + shift) as usize..(ox_hi as isize + shift) as usize];
                            for (o, &i) in orow[ox_lo..ox_hi].iter_mut().zip(src) {
                                *o += wv * i;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                orow[ox] += wv * irow[ox * s + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, ho, wo], out)
}

fn check_grad_out(grad_out: &Tensor, p: &ConvParams, h: usize, w: usize) -> Result<(usize, usize)> {
    let (c_out, _, _, _) = p.dims();
    let (ho, wo) = p.output_dims(h, w)?;
    if grad_out.shape() != [c_out, ho, wo] {
        return Err(Error::shape(
            "conv2d_backward",
            format!(
                "grad_out {:?} does not match conv output [{c_out}, {ho}, {wo}]",
                grad_out.shape()
            ),
        ));
    }
    Ok((ho, wo))
}

/// Gradient of the convolution output with respect to its input (the adjoint map).
pub fn conv2d_input_grad(grad_out: &Tensor, input_dims: (usize, usize), p: &ConvParams) -> Result<Tensor> {
    let (h, w) = input_dims;
    let (ho, wo) = check_grad_out(grad_out, p, h, w)?;
    let (c_out, c_in, kh, kw) = p.dims();
    let (s, pad) = (p.stride, p.pad);
    let g = grad_out.data();
    let wt = p.weight.data();
    let mut gin = vec![0.0; c_in * h * w];

    for co in 0..c_out {
        let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..c_in {
            let dst = &mut gin[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, pad);
                for kx in 0..kw {
                    let wv = wt[((co * c_in + ci) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(wo, w, kx, s, pad);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * s + ky - pad;
                        let grow = &gplane[oy * wo..(oy + 1) * wo];
                        let drow = &mut dst[iy * w..(iy + 1) * w];
                        if s == 1 {
                            let shift = kx as isize - pad as isize;
                            let d = &mut drow[(ox_lo as isize + shift) as usize..(ox_hi as isize + shift) as usize];
                            for (o, &gv) in d.iter_mut().zip(&grow[ox_lo..ox_hi]) {
                                *o += wv * gv;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                drow[ox * s + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_in, h, w], gin)
}

/// Gradient with respect to the kernel weights (and bias, if present).
pub fn conv2d_param_grad(grad_out: &Tensor, input: &Tensor, p: &ConvParams) -> Result<(Tensor, Option<Tensor>)> {
    let (_, h, w) = p.check_input(input)?;
    let (ho, wo) = check_grad_out(grad_out, p, h, w)?;
    let (c_out, c_in, kh, kw) = p.dims();
    let (s, pad) = (p.stride, p.pad);
    let g = grad_out.data();
    let x = input.data();
    let mut gw = vec![0.0; c_out * c_in * kh * kw];

    for co in 0..c_out {
        let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..c_in {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(ho, h, ky, s, pad);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_range(wo, w, kx, s, pad);
                    let mut acc = 0.0;
                    if ox_lo < ox_hi {
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - pad;
                            let grow = &gplane[oy * wo..(oy + 1) * wo];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            if s == 1 {
                                let shift = kx as isize - pad as isize;
                                let src = &irow[(ox_lo as isize + shift) as usize..(ox_hi as isize + shift) as usize];
                                acc += grow[ox_lo..ox_hi].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                for ox in ox_lo..ox_hi {
                                    acc += grow[ox] * irow[ox * s + kx - pad];
                                }
                            }
                        }
                    }
                    gw[((co * c_in + ci) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    let gb = p
        .bias
        .as_ref()
        .map(|_| Tensor::from_fn(vec![c_out], |co| gplane_sum(g, co, ho * wo)));
    Ok((Tensor::new(vec![c_out, c_in, kh, kw], gw)?, gb))
}

fn gplane_sum(g: &[f64], co: usize, n: usize) -> f64 {
    g[co * n..(co + 1) * n].iter().sum()
}

pub fn conv2d_backward(grad_out: &Tensor, input: &Tensor, p: &ConvParams) -> Result<ConvGrads> {
    let (_, h, w) = p.check_input(input)?;
    let gin = conv2d_input_grad(grad_out, (h, w), p)?;
    let (gw, gb) = conv2d_param_grad(grad_out, input, p)?;
    Ok(ConvGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, FnObjective, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Materialise the convolution as a dense matrix by probing with unit images.
    fn dense_conv(p: &ConvParams, c: usize, h: usize, w: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut nobias = p.clone();
        nobias.bias = None;
        let n = c * h * w;
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let e = Tensor::from_fn(vec![c, h, w], |i| if i == j { 1.0 } else { 0.0 });
            cols.push(conv2d(&e, &nobias).unwrap().into_data());
        }
        let offset = conv2d(&Tensor::zeros(vec![c, h, w]), p).unwrap().into_data();
        (cols, offset)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(vec![1, 4, 4], &mut rng);
        let p = ConvParams::new(Tensor::full(vec![1, 1, 1, 1], 1.0), None, 1, 0).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn constant_image_all_ones_kernel() {
        let c = 0.37;
        let x = Tensor::full(vec![1, 6, 6], c);
        let p = ConvParams::new(Tensor::full(vec![1, 1, 3, 3], 1.0), None, 1, 0).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 4, 4]);
        for &v in y.data() {
            assert!((v - 9.0 * c).abs() < 1e-12);
        }
    }

    #[test]
    fn output_dims_formula() {
        let p = ConvParams::zeros(2, 1, 3, 2, 1, false);
        // floor((9 + 2 - 3) / 2) + 1 = 5
        assert_eq!(p.output_dims(9, 9).unwrap(), (5, 5));
        let y = conv2d(&Tensor::zeros(vec![1, 9, 9]), &p).unwrap();
        assert_eq!(y.shape(), &[2, 5, 5]);
    }

    #[test]
    fn matches_dense_materialisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let x = random(vec![1, 8, 8], &mut rng);
            let p = ConvParams::new(
                random(vec![2, 1, 3, 3], &mut rng),
                Some(random(vec![2], &mut rng)),
                stride,
                pad,
            )
            .unwrap();
            let y = conv2d(&x, &p).unwrap();
            let (cols, offset) = dense_conv(&p, 1, 8, 8);
            for (r, &yr) in y.data().iter().enumerate() {
                let dense: f64 = offset[r] + cols.iter().zip(x.data()).map(|(col, xv)| col[r] * xv).sum::<f64>();
                assert!((dense - yr).abs() <= 1e-10 * (1.0 + yr.abs()));
            }
        }
    }

    #[test]
    fn channel_mismatch_is_reported() {
        let p = ConvParams::same(4, 3, 3, true);
        let err = conv2d(&Tensor::zeros(vec![2, 5, 5]), &p).unwrap_err();
        assert!(err.to_string().contains("2 channels"));
    }

    #[test]
    fn zero_grad_out_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(vec![2, 5, 5], &mut rng);
        let p = ConvParams::same(3, 2, 3, true).init_he(1.0, &mut rng);
        let g = conv2d_backward(&Tensor::zeros(vec![3, 5, 5]), &x, &p).unwrap();
        assert_eq!(g.input.max_abs(), 0.0);
        assert_eq!(g.weight.max_abs(), 0.0);
        assert_eq!(g.bias.unwrap().max_abs(), 0.0);
    }

    #[test]
    fn sum_of_identity_output_has_unit_input_grad() {
        let x = Tensor::full(vec![1, 4, 4], 0.5);
        let p = ConvParams::new(Tensor::full(vec![1, 1, 1, 1], 1.0), None, 1, 0).unwrap();
        let g = conv2d_backward(&Tensor::full(vec![1, 4, 4], 1.0), &x, &p).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
            let x = random(vec![2, 7, 7], &mut rng);
            let p = ConvParams::new(
                random(vec![3, 2, 3, 3], &mut rng),
                Some(random(vec![3], &mut rng)),
                stride,
                pad,
            )
            .unwrap();
            let (ho, wo) = p.output_dims(7, 7).unwrap();
            let probe = random(vec![3, ho, wo], &mut rng);
            let (s, pd) = (stride, pad);
            let objective = FnObjective::new(
                |t: &[Tensor]| {
                    let p = ConvParams::new(t[1].clone(), Some(t[2].clone()), s, pd)?;
                    conv2d(&t[0], &p)?.dot(&probe)
                },
                |t: &[Tensor]| {
                    let p = ConvParams::new(t[1].clone(), Some(t[2].clone()), s, pd)?;
                    let value = conv2d(&t[0], &p)?.dot(&probe)?;
                    let g = conv2d_backward(&probe, &t[0], &p)?;
                    Ok((value, vec![g.input, g.weight, g.bias.unwrap()]))
                },
            );
            let inputs = vec![x, p.weight.clone(), p.bias.clone().unwrap()];
            let report = grad_check(&objective, &inputs, &GradCheckOptions::default()).unwrap();
            assert!(report.passed(), "{report}");
        }
    }
}
