//! Standard, depthwise and depthwise-separable 2-D convolution.
//!
//! All convolutions are cross-correlations with zero padding. Standard
//! convolution lowers to im2col + GEMM over tiles of output rows so the
//! column buffer stays small even for 9×9 kernels on large frames.

use rayon::prelude::*;

use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Soft cap, in floats, on the per-tile im2col buffer.
const TILE_BUDGET: usize = 1 << 17;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `(out_c, in_c, k, k)` for standard convs, `(c, 1, k, k)` for depthwise.
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
    pub stride: usize,
    pub padding: usize,
}

/// Gradients for the learnable part of a convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub params: ParamGrads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsConvGrads {
    pub input: Tensor,
    pub depthwise: ParamGrads,
    pub pointwise: ParamGrads,
}

impl ConvParams {
    pub fn new(weight: Tensor, bias: Option<Vec<f32>>, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.h != s.w || s.h == 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "convolution kernel must be square and non-empty".into(),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        if let Some(b) = &bias {
            if b.len() != s.n {
                return Err(Error::InvalidArgument(format!(
                    "bias length {} != output channels {}",
                    b.len(),
                    s.n
                )));
            }
        }
        Ok(ConvParams {
            weight,
            bias,
            stride,
            padding,
        })
    }

    /// All-zero parameters for a standard convolution.
    pub fn zeros(out_c: usize, in_c: usize, k: usize, stride: usize, padding: usize, bias: bool) -> Self {
        ConvParams {
            weight: Tensor::zeros((out_c, in_c, k, k)),
            bias: bias.then(|| vec![0.0; out_c]),
            stride,
            padding,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape().n
    }

    /// Input channels seen by one filter (1 for depthwise kernels).
    pub fn in_channels(&self) -> usize {
        self.weight.shape().c
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape().h
    }

    pub fn weight_count(&self) -> usize {
        self.weight.len()
    }

    pub fn bias_count(&self) -> usize {
        self.bias.as_ref().map_or(0, Vec::len)
    }

    /// `floor((in + 2·padding − k) / stride) + 1` per spatial axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let axis = |len: usize| -> Result<usize> {
            let padded = len + 2 * self.padding;
            if padded < k {
                return Err(Error::InvalidArgument(format!(
                    "input extent {len} with padding {} is smaller than kernel {k}",
                    self.padding
                )));
            }
            Ok((padded - k) / self.stride + 1)
        };
        Ok((axis(h)?, axis(w)?))
    }
}

/// Geometry shared by the im2col helpers.
#[derive(Clone, Copy)]
struct Geometry {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn new(input: Shape, p: &ConvParams) -> Result<Self> {
        let (out_h, out_w) = p.output_size(input.h, input.w)?;
        Ok(Geometry {
            in_c: input.c,
            in_h: input.h,
            in_w: input.w,
            k: p.kernel(),
            stride: p.stride,
            padding: p.padding,
            out_h,
            out_w,
        })
    }

    fn patch(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Valid output range `[lo, hi)` along one axis for kernel offset `kx`.
    fn valid_range(&self, kx: usize, in_len: usize, out_len: usize) -> (usize, usize) {
        // ix = o * stride + kx - padding must lie in [0, in_len)
        let lo = if kx >= self.padding {
            0
        } else {
            (self.padding - kx).div_ceil(self.stride)
        };
        let hi = if in_len + self.padding > kx {
            ((in_len + self.padding - kx - 1) / self.stride + 1).min(out_len)
        } else {
            0
        };
        (lo, hi.max(lo))
    }

    /// Row tiles `[r0, r1)` sized so `per_col` floats per output column fit the budget.
    fn tiles(&self, per_col: usize) -> Vec<(usize, usize)> {
        let rows = (TILE_BUDGET / (per_col.max(1) * self.out_w)).clamp(1, self.out_h);
        (0..self.out_h)
            .step_by(rows)
            .map(|r0| (r0, (r0 + rows).min(self.out_h)))
            .collect()
    }

    /// Column matrix `(in_c·k·k) × ((r1−r0)·out_w)` for output rows `[r0, r1)`.
    fn im2col(&self, x: &[f32], r0: usize, r1: usize, cols: &mut [f32]) {
        let t = (r1 - r0) * self.out_w;
        cols.fill(0.0);
        for ci in 0..self.in_c {
            let plane = &x[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * t..(row + 1) * t];
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.in_w, self.out_w);
                    for oy in r0..r1 {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        let src = &plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        let d = &mut dst[(oy - r0) * self.out_w..(oy - r0 + 1) * self.out_w];
                        for ox in ox_lo..ox_hi {
                            d[ox] = src[ox * self.stride + kx - self.padding];
                        }
                    }
                }
            }
        }
    }

    /// Scatter-add a column matrix back into an input-shaped buffer.
    fn col2im(&self, cols: &[f32], r0: usize, r1: usize, dx: &mut [f32]) {
        let t = (r1 - r0) * self.out_w;
        for ci in 0..self.in_c {
            let plane = &mut dx[ci * self.in_h * self.in_w..(ci + 1) * self.in_h * self.in_w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ci * self.k + ky) * self.k + kx;
                    let src = &cols[row * t..(row + 1) * t];
                    let (ox_lo, ox_hi) = self.valid_range(kx, self.in_w, self.out_w);
                    for oy in r0..r1 {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.in_h {
                            continue;
                        }
                        let d = &mut plane[iy as usize * self.in_w..(iy as usize + 1) * self.in_w];
                        let s = &src[(oy - r0) * self.out_w..(oy - r0 + 1) * self.out_w];
                        for ox in ox_lo..ox_hi {
                            d[ox * self.stride + kx - self.padding] += s[ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_input_channels(input: &Tensor, expected: usize) -> Result<()> {
    if input.shape().c != expected {
        return Err(Error::InvalidArgument(format!(
            "input has {} channels, kernel expects {expected}",
            input.shape().c
        )));
    }
    Ok(())
}

/// Standard convolution.
pub fn conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    check_input_channels(input, p.in_channels())?;
    let s = input.shape();
    let g = Geometry::new(s, p)?;
    let oc = p.out_channels();
    let kk = g.patch();
    let in_item = s.c * s.plane();
    let out_plane = g.out_h * g.out_w;
    let tiles = g.tiles(kk + oc);
    let jobs: Vec<(usize, usize, usize)> = (0..s.n)
        .flat_map(|n| tiles.iter().map(move |&(r0, r1)| (n, r0, r1)))
        .collect();
    let w = p.weight.data();

    let blocks: Vec<Vec<f32>> = jobs
        .par_iter()
        .map(|&(n, r0, r1)| {
            let x = &input.data()[n * in_item..(n + 1) * in_item];
            let t = (r1 - r0) * g.out_w;
            let mut local = vec![0.0f32; oc * t];
            if let Some(b) = &p.bias {
                for (row, &bv) in local.chunks_mut(t).zip(b) {
                    row.fill(bv);
                }
            }
            if g.is_pointwise() {
                let view = MatRef {
                    data: &x[r0 * g.out_w..],
                    rs: s.plane(),
                    cs: 1,
                };
                gemm(oc, kk, t, MatRef::row_major(w, kk), view, 1.0, &mut local, t);
            } else {
                let mut cols = vec![0.0f32; kk * t];
                g.im2col(x, r0, r1, &mut cols);
                gemm(oc, kk, t, MatRef::row_major(w, kk), MatRef::row_major(&cols, t), 1.0, &mut local, t);
            }
            local
        })
        .collect();

    let out_shape = Shape::new(s.n, oc, g.out_h, g.out_w);
    let mut out = vec![0.0f32; out_shape.numel()];
    for (&(n, r0, r1), local) in jobs.iter().zip(&blocks) {
        let t = (r1 - r0) * g.out_w;
        for o in 0..oc {
            let dst = (n * oc + o) * out_plane + r0 * g.out_w;
            out[dst..dst + t].copy_from_slice(&local[o * t..(o + 1) * t]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

fn check_grad_shape(grad: &Tensor, expected: Shape) -> Result<()> {
    if grad.shape() != expected {
        return Err(Error::ShapeMismatch {
            left: grad.shape(),
            right: expected,
        });
    }
    Ok(())
}

fn bias_grad(grad_out: &Tensor, has_bias: bool) -> Option<Vec<f32>> {
    has_bias.then(|| {
        let s = grad_out.shape();
        (0..s.c)
            .map(|c| {
                let mut acc = 0.0f64;
                for n in 0..s.n {
                    acc += grad_out.plane(n, c).iter().map(|&v| v as f64).sum::<f64>();
                }
                acc as f32
            })
            .collect()
    })
}

/// Adjoint of [`conv2d`].
pub fn conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    check_input_channels(input, p.in_channels())?;
    let s = input.shape();
    let g = Geometry::new(s, p)?;
    let oc = p.out_channels();
    check_grad_shape(grad_out, Shape::new(s.n, oc, g.out_h, g.out_w))?;
    let kk = g.patch();
    let in_item = s.c * s.plane();
    let out_item = oc * g.out_h * g.out_w;
    let out_plane = g.out_h * g.out_w;
    let tiles = g.tiles(2 * kk);
    let w = p.weight.data();

    let per_item: Vec<(Vec<f32>, Vec<f32>)> = (0..s.n)
        .into_par_iter()
        .map(|n| {
            let x = &input.data()[n * in_item..(n + 1) * in_item];
            let dy = &grad_out.data()[n * out_item..(n + 1) * out_item];
            let mut dx = vec![0.0f32; in_item];
            let mut dw = vec![0.0f32; oc * kk];
            for &(r0, r1) in &tiles {
                let t = (r1 - r0) * g.out_w;
                let mut cols = vec![0.0f32; kk * t];
                g.im2col(x, r0, r1, &mut cols);
                let dy_tile = MatRef {
                    data: &dy[r0 * g.out_w..],
                    rs: out_plane,
                    cs: 1,
                };
                gemm(oc, t, kk, dy_tile, MatRef::transposed(&cols, t), 1.0, &mut dw, kk);
                gemm(kk, oc, t, MatRef::transposed(w, kk), dy_tile, 0.0, &mut cols, t);
                g.col2im(&cols, r0, r1, &mut dx);
            }
            (dx, dw)
        })
        .collect();

    let mut dx = Vec::with_capacity(s.numel());
    let mut dw = vec![0.0f32; oc * kk];
    for (dxi, dwi) in per_item {
        dx.extend_from_slice(&dxi);
        for (a, b) in dw.iter_mut().zip(&dwi) {
            *a += b;
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_vec(s, dx)?,
        params: ParamGrads {
            weight: Tensor::from_vec(p.weight.shape(), dw)?,
            bias: bias_grad(grad_out, p.bias.is_some()),
        },
    })
}

fn check_depthwise(input: &Tensor, p: &ConvParams) -> Result<()> {
    let ws = p.weight.shape();
    if ws.c != 1 {
        return Err(Error::InvalidShape {
            shape: ws,
            reason: "depthwise kernel must have one input channel per filter".into(),
        });
    }
    if ws.n != input.shape().c {
        return Err(Error::InvalidArgument(format!(
            "input has {} channels, depthwise kernel has {}",
            input.shape().c,
            ws.n
        )));
    }
    Ok(())
}

/// Per-channel convolution: output channel `c` sees only input channel `c`.
pub fn depthwise_conv2d(input: &Tensor, p: &ConvParams) -> Result<Tensor> {
    check_depthwise(input, p)?;
    let s = input.shape();
    let g = Geometry::new(Shape::new(s.n, 1, s.h, s.w), p)?;
    let out_shape = Shape::new(s.n, s.c, g.out_h, g.out_w);
    let out_plane = g.out_h * g.out_w;
    let k = g.k;
    let mut out = vec![0.0f32; out_shape.numel()];
    let w = p.weight.data();

    out.par_chunks_mut(out_plane).enumerate().for_each(|(nc, dst)| {
        let c = nc % s.c;
        let src = &input.data()[nc * s.plane()..(nc + 1) * s.plane()];
        let kern = &w[c * k * k..(c + 1) * k * k];
        if let Some(b) = &p.bias {
            dst.fill(b[c]);
        }
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, s.h, g.out_h);
            for kx in 0..k {
                let wv = kern[ky * k + kx];
                let (ox_lo, ox_hi) = g.valid_range(kx, s.w, g.out_w);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    let row = &src[iy * s.w..(iy + 1) * s.w];
                    let d = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let start = ox_lo + kx - g.padding;
                        let len = ox_hi - ox_lo;
                        for (o, i) in d[ox_lo..ox_hi].iter_mut().zip(&row[start..start + len]) {
                            *o += wv * i;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            d[ox] += wv * row[ox * g.stride + kx - g.padding];
                        }
                    }
                }
            }
        }
    });
    Tensor::from_vec(out_shape, out)
}

/// Adjoint of [`depthwise_conv2d`].
pub fn depthwise_conv2d_backward(input: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    check_depthwise(input, p)?;
    let s = input.shape();
    let g = Geometry::new(Shape::new(s.n, 1, s.h, s.w), p)?;
    check_grad_shape(grad_out, Shape::new(s.n, s.c, g.out_h, g.out_w))?;
    let out_plane = g.out_h * g.out_w;
    let k = g.k;
    let w = p.weight.data();

    let mut dx = vec![0.0f32; s.numel()];
    dx.par_chunks_mut(s.plane()).enumerate().for_each(|(nc, dst)| {
        let c = nc % s.c;
        let dy = &grad_out.data()[nc * out_plane..(nc + 1) * out_plane];
        for ky in 0..k {
            let (oy_lo, oy_hi) = g.valid_range(ky, s.h, g.out_h);
            for kx in 0..k {
                let wv = w[(c * k + ky) * k + kx];
                let (ox_lo, ox_hi) = g.valid_range(kx, s.w, g.out_w);
                for oy in oy_lo..oy_hi {
                    let iy = oy * g.stride + ky - g.padding;
                    for ox in ox_lo..ox_hi {
                        dst[iy * s.w + ox * g.stride + kx - g.padding] += wv * dy[oy * g.out_w + ox];
                    }
                }
            }
        }
    });

    let dw: Vec<f32> = (0..s.c)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut acc = vec![0.0f64; k * k];
            for n in 0..s.n {
                let x = input.plane(n, c);
                let dy = grad_out.plane(n, c);
                for ky in 0..k {
                    let (oy_lo, oy_hi) = g.valid_range(ky, s.h, g.out_h);
                    for kx in 0..k {
                        let (ox_lo, ox_hi) = g.valid_range(kx, s.w, g.out_w);
                        let mut sum = 0.0f32;
                        for oy in oy_lo..oy_hi {
                            let iy = oy * g.stride + ky - g.padding;
                            for ox in ox_lo..ox_hi {
                                sum += dy[oy * g.out_w + ox] * x[iy * s.w + ox * g.stride + kx - g.padding];
                            }
                        }
                        acc[ky * k + kx] += sum as f64;
                    }
                }
            }
            acc.into_iter().map(|v| v as f32)
        })
        .collect();

    Ok(ConvGrads {
        input: Tensor::from_vec(s, dx)?,
        params: ParamGrads {
            weight: Tensor::from_vec(p.weight.shape(), dw)?,
            bias: bias_grad(grad_out, p.bias.is_some()),
        },
    })
}

fn check_pointwise(pw: &ConvParams) -> Result<()> {
    if pw.kernel() != 1 || pw.stride != 1 || pw.padding != 0 {
        return Err(Error::InvalidArgument(
            "pointwise stage must be a 1×1 kernel with stride 1 and no padding".into(),
        ));
    }
    Ok(())
}

/// Depthwise filtering followed by a 1×1 channel mix. Stride and padding
/// belong to the depthwise stage.
pub fn ds_conv2d(input: &Tensor, dw: &ConvParams, pw: &ConvParams) -> Result<Tensor> {
    check_pointwise(pw)?;
    conv2d(&depthwise_conv2d(input, dw)?, pw)
}

/// Adjoint of [`ds_conv2d`]. `mid` is the saved depthwise output.
pub fn ds_conv2d_backward(
    input: &Tensor,
    mid: &Tensor,
    dw: &ConvParams,
    pw: &ConvParams,
    grad_out: &Tensor,
) -> Result<DsConvGrads> {
    check_pointwise(pw)?;
    let point = conv2d_backward(mid, pw, grad_out)?;
    let depth = depthwise_conv2d_backward(input, dw, &point.input)?;
    Ok(DsConvGrads {
        input: depth.input,
        depthwise: depth.params,
        pointwise: point.params,
    })
}

/// Weight count of a standard `k×k` convolution, `k²·C_in·C_out`.
pub const fn standard_conv_weights(k: usize, c_in: usize, c_out: usize) -> usize {
    k * k * c_in * c_out
}

/// Weight count of a depthwise-separable convolution, `k²·C_in + C_in·C_out`.
pub const fn separable_conv_weights(k: usize, c_in: usize, c_out: usize) -> usize {
    k * k * c_in + c_in * c_out
}
