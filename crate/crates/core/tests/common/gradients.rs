//! Adjoints against central finite differences.
//!
//! Each layer is checked on five seeded inputs twice: once by differencing
//! the f32 runtime forward (relative error < 1e-2), and once by
//! differencing an independent f64 reference forward (relative error < 1e-4).
//! Whole generator and discriminator graphs are differenced through an f64
//! interpretation of their layers (relative error < 1e-3).

use super::{check_f32, check_f32_kinked, check_f64, dot, dot64, reference as r, to64, uniform, REL_FLOOR};
use swiftsr::model::{
    build_discriminator, build_extractor, build_generator, DiscriminatorConfig, ExtractorConfig, GeneratorConfig,
    ModelGraph,
};
use swiftsr::nn::*;
use swiftsr::{Shape, Tensor};

const SEEDS: u64 = 5;
const TOL32: f64 = 1e-2;
const TOL64: f64 = 1e-4;
/// f32 rounding accumulates through a whole graph's adjoint.
const TOL_GRAPH: f64 = 1e-3;
const H_MODEL: f32 = 3e-3;

fn t(shape: Shape, data: &[f32]) -> Tensor {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

fn conv(weight: Tensor, bias: Vec<f32>, stride: usize, padding: usize) -> ConvParams {
    ConvParams::new(weight, Some(bias), stride, padding).unwrap()
}

pub fn conv2d_adjoint() {
    for seed in 0..SEEDS {
        for stride in [1, 2] {
            let s = Shape::new(2, 3, 6, 5);
            let x = uniform(s, seed, -1.0, 1.0);
            let w = uniform((4, 3, 3, 3), seed + 100, -0.5, 0.5);
            let b = uniform((1, 1, 1, 4), seed + 200, -0.5, 0.5).into_vec();
            let p = conv(w.clone(), b.clone(), stride, 1);
            let y = conv2d(&x, &p).unwrap();
            let g = uniform(y.shape(), seed + 300, -1.0, 1.0);
            let grads = conv2d_backward(&x, &p, &g).unwrap();

            let (y64, _) = r::conv2d(&to64(x.data()), s, &to64(w.data()), 4, 3, Some(&to64(&b)), stride, 1);
            for (a, e) in y.data().iter().zip(&y64) {
                assert!((*a as f64 - e).abs() < 1e-5);
            }

            let gd = g.data();
            check_f32("conv dx", x.data(), grads.input.data(), 1e-2, TOL32, 200, |v| {
                dot(conv2d(&t(s, v), &p).unwrap().data(), gd)
            });
            check_f32("conv dw", w.data(), grads.params.weight.data(), 1e-2, TOL32, 200, |v| {
                dot(conv2d(&x, &conv(t(w.shape(), v), b.clone(), stride, 1)).unwrap().data(), gd)
            });
            check_f32("conv db", &b, grads.params.bias.as_ref().unwrap(), 1e-2, TOL32, 10, |v| {
                dot(conv2d(&x, &conv(w.clone(), v.to_vec(), stride, 1)).unwrap().data(), gd)
            });

            let (x64, w64, b64) = (to64(x.data()), to64(w.data()), to64(&b));
            check_f64("conv dx f64", x.data(), grads.input.data(), TOL64, 200, |v| {
                dot64(&r::conv2d(v, s, &w64, 4, 3, Some(&b64), stride, 1).0, gd)
            });
            check_f64("conv dw f64", w.data(), grads.params.weight.data(), TOL64, 200, |v| {
                dot64(&r::conv2d(&x64, s, v, 4, 3, Some(&b64), stride, 1).0, gd)
            });
            check_f64("conv db f64", &b, grads.params.bias.as_ref().unwrap(), TOL64, 10, |v| {
                dot64(&r::conv2d(&x64, s, &w64, 4, 3, Some(v), stride, 1).0, gd)
            });
        }
    }
}

pub fn depthwise_adjoint() {
    for seed in 0..SEEDS {
        for stride in [1, 2] {
            let s = Shape::new(2, 3, 7, 6);
            let x = uniform(s, seed, -1.0, 1.0);
            let w = uniform((3, 1, 3, 3), seed + 10, -0.5, 0.5);
            let b = uniform((1, 1, 1, 3), seed + 20, -0.5, 0.5).into_vec();
            let p = conv(w.clone(), b.clone(), stride, 1);
            let y = depthwise_conv2d(&x, &p).unwrap();
            let g = uniform(y.shape(), seed + 30, -1.0, 1.0);
            let grads = depthwise_conv2d_backward(&x, &p, &g).unwrap();
            let gd = g.data();
            let (x64, w64, b64) = (to64(x.data()), to64(w.data()), to64(&b));

            let (y64, _) = r::depthwise(&x64, s, &w64, 3, Some(&b64), stride, 1);
            for (a, e) in y.data().iter().zip(&y64) {
                assert!((*a as f64 - e).abs() < 1e-5);
            }

            check_f32("dw dx", x.data(), grads.input.data(), 1e-2, TOL32, 300, |v| {
                dot(depthwise_conv2d(&t(s, v), &p).unwrap().data(), gd)
            });
            check_f32("dw dw", w.data(), grads.params.weight.data(), 1e-2, TOL32, 30, |v| {
                dot(depthwise_conv2d(&x, &conv(t(w.shape(), v), b.clone(), stride, 1)).unwrap().data(), gd)
            });
            check_f64("dw dx f64", x.data(), grads.input.data(), TOL64, 300, |v| {
                dot64(&r::depthwise(v, s, &w64, 3, Some(&b64), stride, 1).0, gd)
            });
            check_f64("dw dw f64", w.data(), grads.params.weight.data(), TOL64, 30, |v| {
                dot64(&r::depthwise(&x64, s, v, 3, Some(&b64), stride, 1).0, gd)
            });
            check_f64("dw db f64", &b, grads.params.bias.as_ref().unwrap(), TOL64, 3, |v| {
                dot64(&r::depthwise(&x64, s, &w64, 3, Some(v), stride, 1).0, gd)
            });
        }
    }
}

pub fn separable_adjoint() {
    for seed in 0..SEEDS {
        let s = Shape::new(2, 3, 5, 6);
        let x = uniform(s, seed, -1.0, 1.0);
        let dw_w = uniform((3, 1, 3, 3), seed + 1, -0.5, 0.5);
        let dw_b = uniform((1, 1, 1, 3), seed + 2, -0.5, 0.5).into_vec();
        let pw_w = uniform((5, 3, 1, 1), seed + 3, -0.5, 0.5);
        let pw_b = uniform((1, 1, 1, 5), seed + 4, -0.5, 0.5).into_vec();
        let dw = conv(dw_w.clone(), dw_b.clone(), 1, 1);
        let pw = conv(pw_w.clone(), pw_b.clone(), 1, 0);
        let mid = depthwise_conv2d(&x, &dw).unwrap();
        let y = ds_conv2d(&x, &dw, &pw).unwrap();
        let g = uniform(y.shape(), seed + 5, -1.0, 1.0);
        let grads = ds_conv2d_backward(&x, &mid, &dw, &pw, &g).unwrap();
        let gd = g.data();
        let (dw64, dwb64, pw64, pwb64) = (to64(dw_w.data()), to64(&dw_b), to64(pw_w.data()), to64(&pw_b));
        let fwd64 = |x: &[f64], dww: &[f64], pww: &[f64]| {
            let (m, ms) = r::depthwise(x, s, dww, 3, Some(&dwb64), 1, 1);
            r::conv2d(&m, ms, pww, 5, 1, Some(&pwb64), 1, 0).0
        };
        check_f32("ds dx", x.data(), grads.input.data(), 1e-2, TOL32, 180, |v| {
            dot(ds_conv2d(&t(s, v), &dw, &pw).unwrap().data(), gd)
        });
        check_f32("ds dpw", pw_w.data(), grads.pointwise.weight.data(), 1e-2, TOL32, 15, |v| {
            dot(ds_conv2d(&x, &dw, &conv(t(pw_w.shape(), v), pw_b.clone(), 1, 0)).unwrap().data(), gd)
        });
        let x64 = to64(x.data());
        check_f64("ds dx f64", x.data(), grads.input.data(), TOL64, 180, |v| dot64(&fwd64(v, &dw64, &pw64), gd));
        check_f64("ds ddw f64", dw_w.data(), grads.depthwise.weight.data(), TOL64, 27, |v| {
            dot64(&fwd64(&x64, v, &pw64), gd)
        });
        check_f64("ds dpw f64", pw_w.data(), grads.pointwise.weight.data(), TOL64, 15, |v| {
            dot64(&fwd64(&x64, &dw64, v), gd)
        });
    }
}

pub fn batch_norm_adjoint() {
    for seed in 0..SEEDS {
        let s = Shape::new(2, 3, 4, 3);
        let x = uniform(s, seed, -2.0, 2.0);
        let mut bn = BatchNormState::new(3);
        bn.gamma = uniform((1, 1, 1, 3), seed + 1, 0.5, 1.5).into_vec();
        bn.beta = uniform((1, 1, 1, 3), seed + 2, -0.5, 0.5).into_vec();
        for mode in [Mode::Train, Mode::Eval] {
            if mode == Mode::Eval {
                bn.running_mean = vec![0.1, -0.2, 0.3];
                bn.running_var = vec![0.5, 1.5, 2.0];
            }
            let (y, cache) = bn.forward_cached(&x, mode).unwrap();
            let g = uniform(y.shape(), seed + 3, -1.0, 1.0);
            let grads = bn.backward(&cache, &g).unwrap();
            let gd = g.data();
            let eval = |x: &Tensor, bn: &BatchNormState| dot(bn.forward_cached(x, mode).unwrap().0.data(), gd);
            check_f32("bn dx", x.data(), grads.input.data(), 1e-2, TOL32, 72, |v| eval(&t(s, v), &bn));
            check_f32("bn dgamma", &bn.gamma, &grads.gamma, 1e-2, TOL32, 3, |v| {
                let mut b = bn.clone();
                b.gamma = v.to_vec();
                eval(&x, &b)
            });
            check_f32("bn dbeta", &bn.beta, &grads.beta, 1e-2, TOL32, 3, |v| {
                let mut b = bn.clone();
                b.beta = v.to_vec();
                eval(&x, &b)
            });
            if mode == Mode::Train {
                let (g64, b64) = (to64(&bn.gamma), to64(&bn.beta));
                let eps = bn.eps as f64;
                check_f64("bn dx f64", x.data(), grads.input.data(), TOL64, 72, |v| {
                    dot64(&r::batch_norm(v, s, &g64, &b64, eps), gd)
                });
                check_f64("bn dgamma f64", &bn.gamma, &grads.gamma, TOL64, 3, |v| {
                    dot64(&r::batch_norm(&to64(x.data()), s, v, &b64, eps), gd)
                });
            }
        }
    }
}

pub fn linear_adjoint() {
    for seed in 0..SEEDS {
        let s = Shape::new(3, 2, 2, 2);
        let x = uniform(s, seed, -1.0, 1.0);
        let p = LinearParams {
            weight: uniform((1, 1, 5, 8), seed + 1, -0.5, 0.5).into_vec(),
            bias: Some(uniform((1, 1, 1, 5), seed + 2, -0.5, 0.5).into_vec()),
            in_features: 8,
            out_features: 5,
        };
        let y = linear(&x, &p).unwrap();
        let g = uniform(y.shape(), seed + 3, -1.0, 1.0);
        let grads = linear_backward(&x, &p, &g).unwrap();
        let gd = g.data();
        let (w64, b64) = (to64(&p.weight), to64(p.bias.as_ref().unwrap()));
        check_f32("linear dx", x.data(), grads.input.data(), 1e-2, TOL32, 24, |v| {
            dot(linear(&t(s, v), &p).unwrap().data(), gd)
        });
        check_f64("linear dx f64", x.data(), grads.input.data(), TOL64, 24, |v| {
            dot64(&r::linear(v, 3, &w64, Some(&b64), 5), gd)
        });
        check_f64("linear dw f64", &p.weight, &grads.weight, TOL64, 40, |v| {
            dot64(&r::linear(&to64(x.data()), 3, v, Some(&b64), 5), gd)
        });
        check_f64("linear db f64", p.bias.as_ref().unwrap(), grads.bias.as_ref().unwrap(), TOL64, 5, |v| {
            dot64(&r::linear(&to64(x.data()), 3, &w64, Some(v), 5), gd)
        });
    }
}

/// Samples at least `gap` away from every kink in `kinks`.
fn clear_of(shape: Shape, seed: u64, lo: f32, hi: f32, kinks: &[f32], gap: f32) -> Tensor {
    let raw = uniform(shape, seed, lo, hi);
    raw.map(|v| {
        let mut v = v;
        for &k in kinks {
            if (v - k).abs() < gap {
                v = if v < k { k - gap } else { k + gap };
            }
        }
        v
    })
}

pub fn activation_adjoints() {
    for seed in 0..SEEDS {
        let s = Shape::new(2, 3, 3, 4);
        let g = uniform(s, seed + 50, -1.0, 1.0);
        let gd = g.data();

        let x = clear_of(s, seed, -2.0, 2.0, &[0.0], 0.05);
        let slope = uniform((1, 1, 1, 3), seed + 1, 0.05, 0.5).into_vec();
        let (dx, dslope) = prelu_backward(&x, &slope, &g).unwrap();
        check_f32("prelu dx", x.data(), dx.data(), 1e-2, TOL32, 72, |v| {
            dot(prelu(&t(s, v), &slope).unwrap().data(), gd)
        });
        check_f32("prelu dslope", &slope, &dslope, 1e-2, TOL32, 3, |v| dot(prelu(&x, v).unwrap().data(), gd));
        let s64 = to64(&slope);
        check_f64("prelu dx f64", x.data(), dx.data(), TOL64, 72, |v| dot64(&r::prelu(v, s, &s64), gd));
        check_f64("prelu dslope f64", &slope, &dslope, TOL64, 3, |v| {
            dot64(&r::prelu(&to64(x.data()), s, v), gd)
        });

        let dx = leaky_relu_backward(&x, LEAKY_SLOPE, &g).unwrap();
        check_f32("leaky dx", x.data(), dx.data(), 1e-2, TOL32, 72, |v| {
            dot(leaky_relu(&t(s, v), LEAKY_SLOPE).data(), gd)
        });

        let x6 = clear_of(s, seed + 2, -2.0, 8.0, &[0.0, 6.0], 0.05);
        let dx = relu6_backward(&x6, &g).unwrap();
        check_f32("relu6 dx", x6.data(), dx.data(), 1e-2, TOL32, 72, |v| dot(relu6(&t(s, v)).data(), gd));

        let xs = uniform(s, seed + 3, -4.0, 4.0);
        let y = sigmoid(&xs);
        let dx = sigmoid_backward(&y, &g).unwrap();
        check_f32("sigmoid dx", xs.data(), dx.data(), 1e-2, TOL32, 72, |v| dot(sigmoid(&t(s, v)).data(), gd));
        check_f64("sigmoid dx f64", xs.data(), dx.data(), TOL64, 72, |v| dot64(&r::sigmoid(v), gd));
    }
}

pub fn shuffle_and_pool_adjoints() {
    for seed in 0..SEEDS {
        let s = Shape::new(2, 8, 3, 3);
        let x = uniform(s, seed, -1.0, 1.0);
        let g = uniform((2, 2, 6, 6), seed + 1, -1.0, 1.0);
        let dx = pixel_shuffle_backward(&g, 2).unwrap();
        check_f32("shuffle dx", x.data(), dx.data(), 1e-2, TOL32, 144, |v| {
            dot(pixel_shuffle(&t(s, v), 2).unwrap().data(), g.data())
        });

        let s = Shape::new(2, 3, 7, 5);
        let x = uniform(s, seed + 2, -1.0, 1.0);
        let g = uniform((2, 3, 3, 2), seed + 3, -1.0, 1.0);
        let dx = adaptive_avg_pool_backward(s, &g).unwrap();
        let y = adaptive_avg_pool(&x, 3, 2).unwrap();
        for (a, e) in y.data().iter().zip(r::adaptive_avg_pool(&to64(x.data()), s, 3, 2)) {
            assert!((*a as f64 - e).abs() < 1e-6);
        }
        check_f32("pool dx", x.data(), dx.data(), 1e-2, TOL32, 210, |v| {
            dot(adaptive_avg_pool(&t(s, v), 3, 2).unwrap().data(), g.data())
        });
        check_f64("pool dx f64", x.data(), dx.data(), TOL64, 210, |v| {
            dot64(&r::adaptive_avg_pool(v, s, 3, 2), g.data())
        });
    }
}

/// Whole-graph check in train mode. The runtime forward is first matched
/// against an f64 interpretation of the same layers, which is then
/// differenced for the input and for probes of every parameter tensor.
fn check_model(label: &str, model: &ModelGraph, x: &Tensor, seed: u64) {
    let (y, tape) = model.forward_tape(x, Mode::Train).unwrap();
    let g = uniform(y.shape(), seed + 7, -1.0, 1.0);
    let (dx, grads) = model.backward(&tape, &g).unwrap();
    let s = x.shape();
    let (y64, ys) = r::graph(model.layers(), to64(x.data()), s, None);
    assert_eq!(ys, y.shape(), "{label}: reference output shape");
    for (a, e) in y.data().iter().zip(&y64) {
        assert!((*a as f64 - e).abs() < 1e-3 * e.abs().max(1.0), "{label}: forward {a} vs {e}");
    }
    check_f64(&format!("{label} dx"), x.data(), dx.data(), TOL_GRAPH, 24, |v| {
        dot64(&r::graph(model.layers(), v.to_vec(), s, None).0, g.data())
    });
    let x64 = to64(x.data());
    let mut checked = 0;
    for e in model.entries().into_iter().filter(|e| e.kind.is_parameter()) {
        let grad = grads.get(&e.name).unwrap_or_else(|| panic!("no gradient for {}", e.name));
        let base = e.data.to_vec();
        let name = e.name.clone();
        check_f64(&format!("{label} {name}"), &base, grad, TOL_GRAPH, 4, |v| {
            let over = v.iter().zip(&base).position(|(a, b)| *a != *b as f64).map(|i| (name.as_str(), i, v[i]));
            dot64(&r::graph(model.layers(), x64.clone(), s, over).0, g.data())
        });
        checked += 1;
    }
    assert_eq!(checked, grads.len(), "{label}: every parameter has a gradient");
}

/// At most a tenth of the probes may be discarded as kinks.
fn assert_mostly_compared(label: &str, (compared, skipped): (usize, usize)) {
    assert!(skipped * 9 <= compared, "{label}: {skipped} kink skips vs {compared} compared");
}

pub fn generator_graph_adjoint() {
    let cfg = GeneratorConfig {
        base_channels: 4,
        num_residual_blocks: 1,
        upscale_factor: 2,
        ..GeneratorConfig::default()
    };
    for seed in 0..SEEDS {
        let g = build_generator(&cfg, seed).unwrap();
        check_model("generator", &g, &uniform((2, 3, 5, 4), seed, 0.0, 1.0), seed);
    }
}

pub fn discriminator_graph_adjoint() {
    let cfg = DiscriminatorConfig {
        block_channels: vec![2, 2, 3, 3, 4, 4, 4, 4],
        pool_size: 2,
        hidden_units: 6,
        ..DiscriminatorConfig::default()
    };
    for seed in 0..SEEDS {
        let d = build_discriminator(&cfg, seed).unwrap();
        check_model("discriminator", &d, &uniform((3, 3, 16, 16), seed, 0.0, 1.0), seed);
    }
}

pub fn extractor_input_adjoint() {
    let cfg = ExtractorConfig {
        channels: vec![3, 4],
        strides: vec![1, 2],
        tap: 2,
        ..ExtractorConfig::default()
    };
    let mut tally = (0, 0);
    for seed in 0..SEEDS {
        let fx = build_extractor(&cfg, seed).unwrap();
        let x = uniform((1, 3, 6, 6), seed, 0.0, 1.0);
        let (y, tape) = fx.forward_tape(&x, Mode::Eval).unwrap();
        let g = uniform(y.shape(), seed + 1, -1.0, 1.0);
        let dx = fx.backward_input(&tape, &g).unwrap();
        let (c, k) = check_f32_kinked("extractor dx", x.data(), dx.data(), H_MODEL, TOL32, REL_FLOOR, 108, |v| {
            dot(fx.forward(&t(x.shape(), v)).unwrap().data(), g.data())
        });
        tally = (tally.0 + c, tally.1 + k);
    }
    assert_mostly_compared("extractor", tally);
}
