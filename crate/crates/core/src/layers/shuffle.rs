//! Sub-pixel shuffle: `[C·f², H, W]` ↔ `[C, f·H, f·W]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `out[c, f·h + dy, f·w + dx] = in[c·f² + dy·f + dx, h, w]`
pub fn pixel_shuffle(input: &Tensor, f: usize) -> Result<Tensor> {
    let (cin, h, w) = input.chw()?;
    if f == 0 || cin % (f * f) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("{cin} channels not divisible by factor² = {}", f * f),
        ));
    }
    let c = cin / (f * f);
    let (oh, ow) = (h * f, w * f);
    let src = input.data();
    let mut out = vec![0.0; cin * h * w];
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let plane = &src[(ch * f * f + dy * f + dx) * h * w..][..h * w];
                for y in 0..h {
                    let orow = (ch * oh + f * y + dy) * ow;
                    for x in 0..w {
                        out[orow + f * x + dx] = plane[y * w + x];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c, oh, ow], out)
}

/// Exact inverse of [`pixel_shuffle`]; also its adjoint.
pub fn pixel_unshuffle(input: &Tensor, f: usize) -> Result<Tensor> {
    let (c, oh, ow) = input.chw()?;
    if f == 0 || oh % f != 0 || ow % f != 0 {
        return Err(Error::shape(
            "pixel_unshuffle",
            format!("{oh}x{ow} not divisible by factor {f}"),
        ));
    }
    let (h, w) = (oh / f, ow / f);
    let src = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for dy in 0..f {
            for dx in 0..f {
                let plane = &mut out[(ch * f * f + dy * f + dx) * h * w..][..h * w];
                for y in 0..h {
                    let irow = (ch * oh + f * y + dy) * ow;
                    for x in 0..w {
                        plane[y * w + x] = src[irow + f * x + dx];
                    }
                }
            }
        }
    }
    Tensor::new(vec![c * f * f, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn factor_one_is_identity() {
        let t = Tensor::from_fn(vec![3, 2, 5], |i| i as f64);
        assert_eq!(pixel_shuffle(&t, 1).unwrap(), t);
    }

    #[test]
    fn four_channels_to_two_by_two() {
        let t = Tensor::new(vec![4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let s = pixel_shuffle(&t, 2).unwrap();
        assert_eq!(s.shape(), &[1, 2, 2]);
        assert_eq!(s.data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn index_formula() {
        let f = 3;
        let t = Tensor::from_fn(vec![2 * f * f, 2, 3], |i| i as f64);
        let s = pixel_shuffle(&t, f).unwrap();
        let (_, h, w) = t.chw().unwrap();
        for c in 0..2 {
            for dy in 0..f {
                for dx in 0..f {
                    for y in 0..h {
                        for x in 0..w {
                            let src = t.data()[((c * f * f + dy * f + dx) * h + y) * w + x];
                            let dst = s.data()[(c * f * h + f * y + dy) * f * w + f * x + dx];
                            assert_eq!(src, dst);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_channel_count() {
        assert!(pixel_shuffle(&Tensor::zeros(vec![3, 2, 2]), 2).is_err());
    }

    proptest! {
        #[test]
        fn shuffle_unshuffle_round_trip(c in 1usize..3, f in 1usize..4, h in 1usize..5, w in 1usize..5,
                                        seed in any::<u64>()) {
            let t = Tensor::from_fn(vec![c * f * f, h, w], |i| ((i as u64).wrapping_mul(seed | 1) % 1009) as f64 / 7.0);
            let s = pixel_shuffle(&t, f).unwrap();
            prop_assert_eq!(pixel_unshuffle(&s, f).unwrap(), t.clone());
            prop_assert_eq!(pixel_shuffle(&pixel_unshuffle(&s, f).unwrap(), f).unwrap(), s);
        }
    }
}
