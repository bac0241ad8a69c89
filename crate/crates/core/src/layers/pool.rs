use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2×2 average pooling with stride 2.
pub fn avg_pool2(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("avg_pool2", format!("{h}x{w} is not even")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let out = Tensor::from_fn(vec![c, oh, ow], |i| {
        let ch = i / (oh * ow);
        let y = (i / ow) % oh;
        let xo = i % ow;
        let base = ch * h * w + 2 * y * w + 2 * xo;
        0.25 * (x[base] + x[base + 1] + x[base + w] + x[base + w + 1])
    });
    Ok(out)
}

pub fn avg_pool2_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (c, oh, ow) = grad_out.chw()?;
    if input_shape != [c, 2 * oh, 2 * ow] {
        return Err(Error::shape(
            "avg_pool2_backward",
            format!("grad {:?} vs input {:?}", grad_out.shape(), input_shape),
        ));
    }
    let (h, w) = (2 * oh, 2 * ow);
    let g = grad_out.data();
    Ok(Tensor::from_fn(vec![c, h, w], |i| {
        let ch = i / (h * w);
        let y = (i / w) % h;
        let x = i % w;
        0.25 * g[ch * oh * ow + (y / 2) * ow + x / 2]
    }))
}

/// Mean over the spatial axes: `[C, H, W]` → `[C]`.
pub fn global_avg_pool(input: &Tensor) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let n = (h * w) as f64;
    Ok(Tensor::from_fn(vec![c], |ch| {
        input.data()[ch * h * w..(ch + 1) * h * w].iter().sum::<f64>() / n
    }))
}

pub fn global_avg_pool_backward(grad_out: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let (c, h, w) = match input_shape {
        &[c, h, w] => (c, h, w),
        _ => return Err(Error::shape("global_avg_pool_backward", format!("{input_shape:?}"))),
    };
    if grad_out.len() != c {
        return Err(Error::shape(
            "global_avg_pool_backward",
            format!("{} grads for {c} channels", grad_out.len()),
        ));
    }
    let n = (h * w) as f64;
    Ok(Tensor::from_fn(vec![c, h, w], |i| grad_out.data()[i / (h * w)] / n))
}
