#![allow(dead_code)]

pub mod fixtures;
pub mod gradients;
pub mod training;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swiftsr::{Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: impl Into<Shape>, seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Values in `±[lo, hi]`, keeping clear of zero.
pub fn away_from_zero(shape: impl Into<Shape>, seed: u64, lo: f32, hi: f32) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_fn(shape, |_| {
        let v = r.gen_range(lo..hi);
        if r.gen::<bool>() {
            v
        } else {
            -v
        }
    })
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

pub fn dot64(a: &[f64], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x * y as f64).sum()
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

pub const REL_FLOOR: f64 = 1e-2;

/// Indices to probe: all of them for small tensors, otherwise a seeded sample.
pub fn probe_indices(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    let mut r = rng(seed ^ 0x5eed);
    (0..max).map(|_| r.gen_range(0..len)).collect()
}

/// Central differences of `eval` at `base` on f32 values, compared with `analytic`.
pub fn check_f32(
    what: &str,
    base: &[f32],
    analytic: &[f32],
    h: f32,
    tol: f64,
    max_probes: usize,
    eval: impl Fn(&[f32]) -> f64,
) -> f64 {
    assert_eq!(base.len(), analytic.len(), "{what}: gradient length");
    let mut worst = 0.0f64;
    for i in probe_indices(base.len(), max_probes, base.len() as u64) {
        let mut p = base.to_vec();
        p[i] = base[i] + h;
        let up = eval(&p);
        p[i] = base[i] - h;
        let down = eval(&p);
        let numeric = (up - down) / (2.0 * h as f64);
        let e = rel_err(analytic[i] as f64, numeric, REL_FLOOR);
        assert!(
            e < tol,
            "{what}[{i}]: analytic {} vs numeric {numeric} (rel {e:.3e})",
            analytic[i]
        );
        worst = worst.max(e);
    }
    worst
}

/// Like [`check_f32`] for piecewise-smooth functions. A probe whose left and
/// right one-sided differences disagree by more than `tol` straddles a kink
/// and is skipped. `floor` bounds the denominator of the compared relative error from
/// below. Returns the number of probes compared and skipped.
#[allow(clippy::too_many_arguments)]
pub fn check_f32_kinked(
    what: &str,
    base: &[f32],
    analytic: &[f32],
    h: f32,
    tol: f64,
    floor: f64,
    max_probes: usize,
    eval: impl Fn(&[f32]) -> f64,
) -> (usize, usize) {
    assert_eq!(base.len(), analytic.len(), "{what}: gradient length");
    let (mut compared, mut skipped) = (0, 0);
    for i in probe_indices(base.len(), max_probes, base.len() as u64) {
        let mut p = base.to_vec();
        let mid = eval(&p);
        p[i] = base[i] + h;
        let up = eval(&p);
        p[i] = base[i] - h;
        let down = eval(&p);
        let right = (up - mid) / h as f64;
        let left = (mid - down) / h as f64;
        if rel_err(right, left, floor) > tol {
            skipped += 1;
            continue;
        }
        let numeric = (up - down) / (2.0 * h as f64);
        let e = rel_err(analytic[i] as f64, numeric, floor);
        assert!(
            e < tol,
            "{what}[{i}]: analytic {} vs numeric {numeric} (rel {e:.3e})",
            analytic[i]
        );
        compared += 1;
    }
    (compared, skipped)
}

/// Central differences of an f64 reference forward, compared with the f32 adjoint.
pub fn check_f64(
    what: &str,
    base: &[f32],
    analytic: &[f32],
    tol: f64,
    max_probes: usize,
    eval: impl Fn(&[f64]) -> f64,
) -> f64 {
    assert_eq!(base.len(), analytic.len(), "{what}: gradient length");
    let h = 1e-6;
    let base = to64(base);
    let mut worst = 0.0f64;
    for i in probe_indices(base.len(), max_probes, base.len() as u64) {
        let mut p = base.clone();
        p[i] = base[i] + h;
        let up = eval(&p);
        p[i] = base[i] - h;
        let down = eval(&p);
        let numeric = (up - down) / (2.0 * h);
        let e = rel_err(analytic[i] as f64, numeric, REL_FLOOR);
        assert!(
            e < tol,
            "{what}[{i}]: analytic {} vs f64 numeric {numeric} (rel {e:.3e})",
            analytic[i]
        );
        worst = worst.max(e);
    }
    worst
}

/// Reference layers in f64, written directly from their definitions.
pub mod reference {
    use swiftsr::model::Layer;
    use swiftsr::nn::ConvParams;
    use swiftsr::Shape;

    /// Cross-correlation with zero padding. `w` is `(co, ci, k, k)`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        x: &[f64],
        s: Shape,
        w: &[f64],
        co: usize,
        k: usize,
        bias: Option<&[f64]>,
        stride: usize,
        pad: usize,
    ) -> (Vec<f64>, Shape) {
        let ci = s.c;
        let oh = (s.h + 2 * pad - k) / stride + 1;
        let ow = (s.w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; s.n * co * oh * ow];
        for n in 0..s.n {
            for o in 0..co {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[o]);
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xo * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                        continue;
                                    }
                                    let xv = x[((n * ci + c) * s.h + iy as usize) * s.w + ix as usize];
                                    acc += w[((o * ci + c) * k + ky) * k + kx] * xv;
                                }
                            }
                        }
                        out[((n * co + o) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        (out, Shape::new(s.n, co, oh, ow))
    }

    /// Per-channel filtering; `w` is `(c, 1, k, k)`.
    pub fn depthwise(x: &[f64], s: Shape, w: &[f64], k: usize, bias: Option<&[f64]>, stride: usize, pad: usize) -> (Vec<f64>, Shape) {
        let oh = (s.h + 2 * pad - k) / stride + 1;
        let ow = (s.w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; s.n * s.c * oh * ow];
        for n in 0..s.n {
            for c in 0..s.c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[c]);
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride + ky) as isize - pad as isize;
                                let ix = (xo * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                acc += w[(c * k + ky) * k + kx] * x[((n * s.c + c) * s.h + iy as usize) * s.w + ix as usize];
                            }
                        }
                        out[((n * s.c + c) * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        (out, Shape::new(s.n, s.c, oh, ow))
    }

    /// Train-mode batch norm with the biased batch variance.
    pub fn batch_norm(x: &[f64], s: Shape, gamma: &[f64], beta: &[f64], eps: f64) -> Vec<f64> {
        let count = (s.n * s.h * s.w) as f64;
        let mut out = vec![0.0; x.len()];
        for c in 0..s.c {
            let idx = |n: usize, i: usize| (n * s.c + c) * s.h * s.w + i;
            let mut mean = 0.0;
            for n in 0..s.n {
                for i in 0..s.h * s.w {
                    mean += x[idx(n, i)];
                }
            }
            mean /= count;
            let mut var = 0.0;
            for n in 0..s.n {
                for i in 0..s.h * s.w {
                    var += (x[idx(n, i)] - mean).powi(2);
                }
            }
            var /= count;
            for n in 0..s.n {
                for i in 0..s.h * s.w {
                    out[idx(n, i)] = gamma[c] * (x[idx(n, i)] - mean) / (var + eps).sqrt() + beta[c];
                }
            }
        }
        out
    }

    /// `out[n][o] = Σ_i w[o][i]·x[n][i] + b[o]`.
    pub fn linear(x: &[f64], n: usize, w: &[f64], b: Option<&[f64]>, out_f: usize) -> Vec<f64> {
        let in_f = x.len() / n;
        let mut out = vec![0.0; n * out_f];
        for i in 0..n {
            for o in 0..out_f {
                let mut acc = b.map_or(0.0, |b| b[o]);
                for j in 0..in_f {
                    acc += w[o * in_f + j] * x[i * in_f + j];
                }
                out[i * out_f + o] = acc;
            }
        }
        out
    }

    pub fn prelu(x: &[f64], s: Shape, slope: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / (s.h * s.w) % s.c;
                if v >= 0.0 {
                    v
                } else {
                    slope[c] * v
                }
            })
            .collect()
    }

    pub fn sigmoid(x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect()
    }

    pub fn adaptive_avg_pool(x: &[f64], s: Shape, oh: usize, ow: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for nc in 0..s.n * s.c {
            for i in 0..oh {
                let (y0, y1) = ((i * s.h) / oh, ((i + 1) * s.h).div_ceil(oh));
                for j in 0..ow {
                    let (x0, x1) = ((j * s.w) / ow, ((j + 1) * s.w).div_ceil(ow));
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            acc += x[nc * s.h * s.w + y * s.w + xx];
                        }
                    }
                    out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        out
    }

    pub fn pixel_shuffle(x: &[f64], s: Shape, r: usize) -> (Vec<f64>, Shape) {
        let o = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
        let mut out = vec![0.0; x.len()];
        for n in 0..o.n {
            for c in 0..o.c {
                for y in 0..o.h {
                    for xx in 0..o.w {
                        let src = c * r * r + (y % r) * r + xx % r;
                        out[((n * o.c + c) * o.h + y) * o.w + xx] = x[((n * s.c + src) * s.h + y / r) * s.w + xx / r];
                    }
                }
            }
        }
        (out, o)
    }

    /// A parameter value replaced during a finite-difference probe.
    pub type Override<'a> = Option<(&'a str, usize, f64)>;

    fn param(name: String, data: &[f32], over: Override) -> Vec<f64> {
        let mut v: Vec<f64> = data.iter().map(|&x| x as f64).collect();
        if let Some((n, i, val)) = over {
            if n == name {
                v[i] = val;
            }
        }
        v
    }

    fn conv(x: &[f64], s: Shape, name: String, c: &ConvParams, per_channel: bool, over: Override) -> (Vec<f64>, Shape) {
        let ws = c.weight.shape();
        let w = param(format!("{name}.weight"), c.weight.data(), over);
        let b = c.bias.as_ref().map(|b| param(format!("{name}.bias"), b, over));
        if per_channel {
            depthwise(x, s, &w, ws.h, b.as_deref(), c.stride, c.padding)
        } else {
            conv2d(x, s, &w, ws.n, ws.h, b.as_deref(), c.stride, c.padding)
        }
    }

    /// Train-mode forward of a layer graph in f64, read from the runtime's
    /// own parameters.
    pub fn graph(layers: &[Layer], x: Vec<f64>, s: Shape, over: Override) -> (Vec<f64>, Shape) {
        let (mut x, mut s) = (x, s);
        for layer in layers {
            (x, s) = match layer {
                Layer::Conv { name, conv: c } => conv(&x, s, name.clone(), c, false, over),
                Layer::DsConv { name, depthwise: d, pointwise: p } => {
                    let (y, ys) = conv(&x, s, format!("{name}.dw"), d, true, over);
                    conv(&y, ys, format!("{name}.pw"), p, false, over)
                }
                Layer::BatchNorm { name, bn } => {
                    let g = param(format!("{name}.gamma"), &bn.gamma, over);
                    let b = param(format!("{name}.beta"), &bn.beta, over);
                    (batch_norm(&x, s, &g, &b, bn.eps as f64), s)
                }
                Layer::PRelu { name, slope } => (prelu(&x, s, &param(format!("{name}.slope"), slope, over)), s),
                Layer::LeakyRelu(a) => (x.iter().map(|&v| if v >= 0.0 { v } else { *a as f64 * v }).collect(), s),
                Layer::Relu6 => (x.iter().map(|v| v.clamp(0.0, 6.0)).collect(), s),
                Layer::PixelShuffle(r) => pixel_shuffle(&x, s, *r),
                Layer::AdaptiveAvgPool(oh, ow) => (adaptive_avg_pool(&x, s, *oh, *ow), Shape::new(s.n, s.c, *oh, *ow)),
                Layer::Flatten => (x, Shape::new(s.n, s.c * s.h * s.w, 1, 1)),
                Layer::Linear { name, linear: l } => {
                    let w = param(format!("{name}.weight"), &l.weight, over);
                    let b = l.bias.as_ref().map(|b| param(format!("{name}.bias"), b, over));
                    (linear(&x, s.n, &w, b.as_deref(), l.out_features), Shape::new(s.n, l.out_features, 1, 1))
                }
                Layer::Sigmoid => (sigmoid(&x), s),
                Layer::Residual { body, .. } => {
                    let (y, ys) = graph(body, x.clone(), s, over);
                    (x.iter().zip(&y).map(|(a, b)| a + b).collect(), ys)
                }
            };
        }
        (x, s)
    }
}
