//! Built-in verification suites shared by the `gradcheck` and `selftest`
//! commands: finite-difference checks of every loss, layer and network, and
//! a set of quick numerical invariants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degradation::{kernel_bank, materialize_a, pca_fit, pinv_oracle, DegradationOperator, DEFAULT_PCA_DIM};
use crate::error::Result;
use crate::gradcheck::{grad_check, Corrupted, FnObjective, GradCheckOptions, GradCheckReport, Objective};
use crate::layers::{
    avg_pool2, avg_pool2_backward, conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward, linear,
    linear_backward, pixel_shuffle, pixel_unshuffle, Activation, ConvParams, LinearParams,
};
use crate::losses::{
    charbonnier, charbonnier_grad, feature_loss, feature_loss_grad, gan_d_loss, gan_d_loss_grad, gan_g_loss,
    gan_g_loss_grad, generator_loss_grad, mse_loss, mse_loss_grad, sobel_weight, total_loss, total_smooth_loss,
    weighted_charbonnier, weighted_charbonnier_grad, FeatureExtractor, LossConfig, LossMode,
};
use crate::metrics::{psnr, ssim};
use crate::network::{affine_project, DiscArch, Discriminator, SrArch, SrModel};
use crate::optim::Parameters;
use crate::pinv::{pinv_loss_grad, pinv_loss_lr, HyperNetwork, LearnedPseudoInverse, PinvShape, PseudoInverse};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaseKind {
    Loss,
    Layer,
    Network,
}

pub struct GradCase {
    pub name: String,
    pub kind: CaseKind,
    pub objective: Box<dyn Objective>,
    pub inputs: Vec<Tensor>,
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn case<V, G>(name: &str, kind: CaseKind, names: &[&str], value: V, grad: G, inputs: Vec<Tensor>) -> GradCase
where
    V: Fn(&[Tensor]) -> Result<f64> + 'static,
    G: Fn(&[Tensor]) -> Result<(f64, Vec<Tensor>)> + 'static,
{
    GradCase {
        name: name.to_string(),
        kind,
        objective: Box::new(FnObjective::new(value, grad).with_names(names)),
        inputs,
    }
}

/// One-input loss `value(x)` with analytic gradient `grad(x)`.
fn loss_case<V, G>(name: &str, value: V, grad: G, x: Tensor) -> GradCase
where
    V: Fn(&Tensor) -> Result<f64> + 'static,
    G: Fn(&Tensor) -> Result<(f64, Tensor)> + 'static,
{
    case(
        name,
        CaseKind::Loss,
        &["x_hat"],
        move |t| value(&t[0]),
        move |t| {
            let (v, g) = grad(&t[0])?;
            Ok((v, vec![g]))
        },
        vec![x],
    )
}

fn model_case<M>(
    name: &str,
    kind: CaseKind,
    model: M,
    f: impl Fn(&M) -> Result<(f64, M)> + 'static,
    value_of: impl Fn(&M) -> Result<f64> + 'static,
) -> GradCase
where
    M: Parameters + Clone + 'static,
{
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let inputs = model.to_tensors();
    let t1 = model.clone();
    let t2 = model;
    case(
        name,
        kind,
        &names,
        move |t| {
            let mut m = t1.clone();
            m.load_tensors(t)?;
            value_of(&m)
        },
        move |t| {
            let mut m = t2.clone();
            m.load_tensors(t)?;
            let (v, g) = f(&m)?;
            Ok((v, g.to_tensors()))
        },
        inputs,
    )
}

/// Every loss, layer and network with its own random fixture.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut cases = Vec::new();
    let eps = 1e-3;

    // Losses.
    let x = uniform(vec![1, 8, 8], 0.0, 1.0, r);
    {
        let (a, b) = (x.clone(), x.clone());
        cases.push(loss_case(
            "mse",
            move |t| mse_loss(&a, t),
            move |t| mse_loss_grad(&b, t),
            uniform(vec![1, 8, 8], 0.0, 1.0, r),
        ));
    }
    {
        let (a, b) = (x.clone(), x.clone());
        cases.push(loss_case(
            "charbonnier",
            move |t| charbonnier(t, &a, eps),
            move |t| charbonnier_grad(t, &b, eps),
            uniform(vec![1, 8, 8], 0.0, 1.0, r),
        ));
    }
    {
        let m = sobel_weight(&x)?;
        let (a, b, m2) = (x.clone(), x.clone(), m.clone());
        cases.push(loss_case(
            "sobel-weighted charbonnier",
            move |t| weighted_charbonnier(t, &a, &m, eps),
            move |t| weighted_charbonnier_grad(t, &b, Some(&m2), eps),
            uniform(vec![1, 8, 8], 0.0, 1.0, r),
        ));
    }
    let fe = FeatureExtractor::new(1, &[4, 6], seed ^ 1)?;
    {
        let (a, b, fa, fb) = (x.clone(), x.clone(), fe.clone(), fe.clone());
        cases.push(loss_case(
            "feature",
            move |t| feature_loss(&a, t, &fa, eps),
            move |t| feature_loss_grad(&b, t, &fb, eps),
            uniform(vec![1, 8, 8], 0.0, 1.0, r),
        ));
    }
    cases.push(case(
        "gan discriminator",
        CaseKind::Loss,
        &["d_real", "d_fake"],
        |t| gan_d_loss(t[0].data(), t[1].data()),
        |t| {
            let (l, gr, gf) = gan_d_loss_grad(t[0].data(), t[1].data())?;
            Ok((
                l,
                vec![Tensor::new(vec![gr.len()], gr)?, Tensor::new(vec![gf.len()], gf)?],
            ))
        },
        vec![uniform(vec![6], 0.05, 0.95, r), uniform(vec![6], 0.05, 0.95, r)],
    ));
    cases.push(case(
        "gan generator",
        CaseKind::Loss,
        &["d_fake"],
        |t| gan_g_loss(t[0].data()),
        |t| {
            let (l, g) = gan_g_loss_grad(t[0].data())?;
            Ok((l, vec![Tensor::new(vec![g.len()], g)?]))
        },
        vec![uniform(vec![6], 0.05, 0.95, r)],
    ));
    let disc = Discriminator::init(&DiscArch::desk(1), seed ^ 2)?;
    for (name, mode) in [
        ("total", LossMode::Combined),
        ("total smooth", LossMode::CombinedSmooth),
    ] {
        let cfg = LossConfig {
            mode,
            ..LossConfig::smooth_perceptual()
        };
        let (a, b) = (x.clone(), x.clone());
        let (da, db, fa, fb, ca) = (disc.clone(), disc.clone(), fe.clone(), fe.clone(), cfg.clone());
        let value = move |t: &Tensor| match mode {
            LossMode::CombinedSmooth => total_smooth_loss(&a, t, &da, &fa, &ca),
            _ => total_loss(&a, t, &da, &fa, &ca),
        };
        cases.push(loss_case(
            name,
            value,
            move |t| {
                let (terms, g) = generator_loss_grad(&b, t, &db, &fb, &cfg)?;
                Ok((terms.total, g))
            },
            uniform(vec![1, 8, 8], 0.0, 1.0, r),
        ));
    }
    {
        let op = DegradationOperator::from_sigma(2, 0.8)?;
        let ys = (0..2)
            .map(|_| op.apply(&uniform(vec![1, 8, 8], 0.0, 1.0, r)))
            .collect::<Result<Vec<_>>>()?;
        let (op2, ys2) = (op.clone(), ys.clone());
        cases.push(case(
            "pseudo-inverse",
            CaseKind::Loss,
            &["omega"],
            move |t| pinv_loss_lr(&LearnedPseudoInverse::from_weight(t[0].clone(), 2)?, &op, &ys),
            move |t| {
                let (v, g) = pinv_loss_grad(&LearnedPseudoInverse::from_weight(t[0].clone(), 2)?, &op2, &ys2)?;
                Ok((v, vec![g]))
            },
            vec![uniform(vec![4, 1, 5, 5], -0.3, 0.3, r)],
        ));
    }

    // Layers, each contracted with a fixed random probe.
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        let probe_shape = {
            let p = ConvParams::zeros(3, 2, 3, stride, pad, true);
            let (ho, wo) = p.output_dims(7, 7)?;
            vec![3, ho, wo]
        };
        let probe = uniform(probe_shape, -1.0, 1.0, r);
        let p2 = probe.clone();
        cases.push(case(
            &format!("conv2d stride {stride} pad {pad}"),
            CaseKind::Layer,
            &["input", "weight", "bias"],
            move |t| conv2d(&t[0], &ConvParams::new(t[1].clone(), Some(t[2].clone()), stride, pad)?)?.dot(&probe),
            move |t| {
                let p = ConvParams::new(t[1].clone(), Some(t[2].clone()), stride, pad)?;
                let v = conv2d(&t[0], &p)?.dot(&p2)?;
                let g = conv2d_backward(&p2, &t[0], &p)?;
                Ok((v, vec![g.input, g.weight, g.bias.expect("bias")]))
            },
            vec![
                uniform(vec![2, 7, 7], -1.0, 1.0, r),
                uniform(vec![3, 2, 3, 3], -1.0, 1.0, r),
                uniform(vec![3], -1.0, 1.0, r),
            ],
        ));
    }
    {
        let probe = uniform(vec![5], -1.0, 1.0, r);
        let p2 = probe.clone();
        cases.push(case(
            "linear",
            CaseKind::Layer,
            &["input", "weight", "bias"],
            move |t| {
                linear(
                    &t[0],
                    &LinearParams {
                        weight: t[1].clone(),
                        bias: t[2].clone(),
                    },
                )?
                .dot(&probe)
            },
            move |t| {
                let p = LinearParams {
                    weight: t[1].clone(),
                    bias: t[2].clone(),
                };
                let g = linear_backward(&p2, &t[0], &p)?;
                Ok((linear(&t[0], &p)?.dot(&p2)?, vec![g.input, g.weight, g.bias]))
            },
            vec![
                uniform(vec![7], -1.0, 1.0, r),
                uniform(vec![5, 7], -1.0, 1.0, r),
                uniform(vec![5], -1.0, 1.0, r),
            ],
        ));
    }
    for (name, act) in [("relu", Activation::Relu), ("leaky relu", Activation::LeakyRelu(0.2))] {
        let w = uniform(vec![60], -1.0, 1.0, r);
        let w2 = w.clone();
        cases.push(case(
            name,
            CaseKind::Layer,
            &["input"],
            move |t| act.forward(&t[0]).dot(&w),
            move |t| Ok((act.forward(&t[0]).dot(&w2)?, vec![act.backward(&w2, &t[0])?])),
            vec![uniform(vec![60], -2.0, 2.0, r)],
        ));
    }
    {
        let (p1, p2) = (uniform(vec![2, 2, 3], -1.0, 1.0, r), uniform(vec![2], -1.0, 1.0, r));
        let (q1, q2) = (p1.clone(), p2.clone());
        cases.push(case(
            "average pooling",
            CaseKind::Layer,
            &["input"],
            move |t| Ok(avg_pool2(&t[0])?.dot(&p1)? + global_avg_pool(&t[0])?.dot(&p2)?),
            move |t| {
                let v = avg_pool2(&t[0])?.dot(&q1)? + global_avg_pool(&t[0])?.dot(&q2)?;
                let mut g = avg_pool2_backward(&q1, t[0].shape())?;
                g.add_assign(&global_avg_pool_backward(&q2, t[0].shape())?)?;
                Ok((v, vec![g]))
            },
            vec![uniform(vec![2, 4, 6], -1.0, 1.0, r)],
        ));
    }
    {
        let probe = uniform(vec![2, 6, 8], -1.0, 1.0, r);
        let p2 = probe.clone();
        cases.push(case(
            "pixel shuffle",
            CaseKind::Layer,
            &["input"],
            move |t| pixel_shuffle(&t[0], 2)?.dot(&probe),
            move |t| Ok((pixel_shuffle(&t[0], 2)?.dot(&p2)?, vec![pixel_unshuffle(&p2, 2)?])),
            vec![uniform(vec![8, 3, 4], -1.0, 1.0, r)],
        ));
    }
    {
        let op = DegradationOperator::from_sigma(2, 1.1)?;
        let probe = uniform(vec![1, 5, 4], -1.0, 1.0, r);
        let (op2, p2) = (op.clone(), probe.clone());
        cases.push(case(
            "degradation operator",
            CaseKind::Layer,
            &["x"],
            move |t| op.apply(&t[0])?.dot(&probe),
            move |t| Ok((op2.apply(&t[0])?.dot(&p2)?, vec![op2.adjoint(&p2)?])),
            vec![uniform(vec![1, 10, 8], 0.0, 1.0, r)],
        ));
    }
    {
        let op = DegradationOperator::from_sigma(2, 0.7)?;
        let pinv = LearnedPseudoInverse::from_weight(uniform(vec![4, 1, 5, 5], -0.3, 0.3, r), 2)?;
        let y = uniform(vec![1, 4, 4], 0.0, 1.0, r);
        let probe = uniform(vec![1, 8, 8], -1.0, 1.0, r);
        let (op2, pinv2, p2) = (op.clone(), pinv.clone(), probe.clone());
        cases.push(case(
            "affine projection",
            CaseKind::Layer,
            &["f_out", "y"],
            move |t| affine_project(&t[0], &t[1], &op, &pinv)?.dot(&probe),
            move |t| {
                let v = affine_project(&t[0], &t[1], &op2, &pinv2)?.dot(&p2)?;
                // g = f + P(y − A f): ∂/∂f = I − Aᵀ Pᵀ, ∂/∂y = Pᵀ.
                let pt = pinv2.adjoint(&p2)?;
                let gf = p2.sub(&op2.adjoint(&pt)?)?;
                Ok((v, vec![gf, pt]))
            },
            vec![uniform(vec![1, 8, 8], 0.0, 1.0, r), y],
        ));
    }

    // Networks, through their parameters.
    {
        let x = uniform(vec![1, 16, 16], 0.0, 1.0, r);
        let x2 = x.clone();
        cases.push(model_case(
            "discriminator",
            CaseKind::Network,
            disc.clone(),
            move |m: &Discriminator| {
                let c = m.forward_cached(&x)?;
                let (g, _) = m.backward(&c, -1.0 / c.prob())?;
                Ok((-c.prob().ln(), g))
            },
            move |m| Ok(-m.forward(&x2)?.ln()),
        ));
    }
    {
        let shape = PinvShape {
            channels: 1,
            factor: 2,
            kernel_size: 3,
        };
        let mut net = HyperNetwork::init(4, &[6, 5], shape, seed ^ 3);
        for v in net.layers[2].weight.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        net.input_scale = 0.7;
        net.output_scale = 1.3;
        let x = uniform(vec![4], -1.0, 1.0, r);
        let g = uniform(vec![36], -1.0, 1.0, r);
        let (x2, g2) = (x.clone(), g.clone());
        cases.push(model_case(
            "hyper-network",
            CaseKind::Network,
            net,
            move |n: &HyperNetwork| Ok((n.forward(&x)?.dot(&g)?, n.backward(&x, &g)?)),
            move |n| n.forward(&x2)?.dot(&g2),
        ));
    }
    {
        let arch = SrArch {
            n_blocks: 2,
            width: 4,
            encoder_width: 3,
            radius: 1,
            ..SrArch::desk(2)
        };
        let mut model = SrModel::init(arch, seed ^ 4)?;
        for (name, t) in model.params_mut() {
            if name.ends_with("bias") {
                *t = uniform(t.shape().to_vec(), -0.1, 0.1, r);
            }
        }
        let op = DegradationOperator::from_sigma(2, 0.9)?;
        let pinv = LearnedPseudoInverse::from_weight(uniform(vec![4, 1, 5, 5], -0.1, 0.1, r), 2)?;
        let window: Vec<Tensor> = (0..3).map(|_| uniform(vec![1, 3, 4], 0.0, 1.0, r)).collect();
        let target = uniform(vec![1, 6, 8], 0.0, 1.0, r);
        let (op2, pinv2, w2, t2) = (op.clone(), pinv.clone(), window.clone(), target.clone());
        cases.push(model_case(
            "generator",
            CaseKind::Network,
            model,
            move |m: &SrModel| {
                let (out, cache) = m.forward_cached(&window, &op, &pinv)?;
                let d = out.sub(&target)?;
                Ok((d.sum_sq(), m.backward(&cache, &window, &d.scale(2.0), &op, &pinv)?))
            },
            move |m| Ok(m.forward(&w2, &op2, &pinv2)?.sub(&t2)?.sum_sq()),
        ));
    }
    Ok(cases)
}

/// Run every case; with `corrupt` each analytic gradient is scaled by that factor.
pub fn run_gradient_suite(
    cases: &[GradCase],
    opts: &GradCheckOptions,
    corrupt: Option<f64>,
) -> Result<Vec<(String, CaseKind, GradCheckReport)>> {
    cases
        .iter()
        .map(|c| {
            let report = match corrupt {
                Some(factor) => grad_check(
                    &Corrupted {
                        inner: c.objective.as_ref(),
                        factor,
                    },
                    &c.inputs,
                    opts,
                )?,
                None => grad_check(c.objective.as_ref(), &c.inputs, opts)?,
            };
            Ok((c.name.clone(), c.kind, report))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct InvariantResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn verdict(name: &str, passed: bool, detail: String) -> InvariantResult {
    InvariantResult {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// Quick numerical invariants: loss and metric anchors, the pseudo-inverse
/// oracle identities and the PCA reconstruction of the kernel bank.
pub fn invariant_suite(seed: u64) -> Result<Vec<InvariantResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let d = gan_d_loss(&[0.5], &[0.5])?;
    out.push(verdict(
        "gan_d(0.5, 0.5) = 2 ln 2",
        (d - 2.0 * 2f64.ln()).abs() <= 1e-12,
        format!("{d}"),
    ));
    let g = gan_g_loss(&[0.5])?;
    out.push(verdict("gan_g(0.5) = 0", g.abs() <= 1e-12, format!("{g}")));
    let u = uniform(vec![1, 6, 6], 0.0, 1.0, &mut rng);
    let c = charbonnier(&u, &u, 1e-3)?;
    out.push(verdict("charbonnier(u, u) = N·ε", c == 36.0 * 1e-3, format!("{c}")));
    let m = sobel_weight(&Tensor::full(vec![1, 6, 6], 0.3))?;
    out.push(verdict(
        "sobel weight of a constant is 1",
        m.data().iter().all(|v| *v == 1.0),
        String::new(),
    ));

    let x = uniform(vec![1, 16, 16], 0.0, 1.0, &mut rng);
    let s = ssim(&x, &x, 2)?;
    out.push(verdict("ssim(x, x) = 1", (s - 1.0).abs() <= 1e-9, format!("{s}")));
    let base = Tensor::from_fn(vec![1, 8, 8], |i| ((i * 37) % 200) as f64 / 255.0);
    let p = psnr(&base, &base.map(|v| v + 16.0 / 255.0), 2)?;
    out.push(verdict(
        "psnr of a 16/255 offset",
        (p - 24.0483).abs() <= 1e-3,
        format!("{p:.6} dB"),
    ));

    let bank = kernel_bank(2)?;
    let pca = pca_fit(&bank, DEFAULT_PCA_DIM)?;
    let mut worst: f64 = 0.0;
    for k in &bank {
        let rec = pca.reconstruct(&pca.project(k)?)?;
        let taps = k.taps().clone().reshape(vec![k.taps().len()])?;
        worst = worst.max(rec.reshape(vec![taps.len()])?.relative_error(&taps)?);
    }
    out.push(verdict(
        "PCA bank reconstruction at d = 15",
        worst <= 1e-3,
        format!("{worst:.3e}"),
    ));

    let op = DegradationOperator::from_sigma(2, 1.0)?;
    let a = materialize_a(&op, 8, 8)?;
    let ap = pinv_oracle(&a)?;
    let aap = a.compose(&ap)?;
    let n = aap.rows();
    let mut dev: f64 = 0.0;
    let m = aap.to_nalgebra();
    for i in 0..n {
        for j in 0..n {
            dev = dev.max((m[(i, j)] - if i == j { 1.0 } else { 0.0 }).abs());
        }
    }
    out.push(verdict("A A⁺ = I for 8x8, f = 2", dev <= 1e-8, format!("{dev:.3e}")));
    Ok(out)
}
