//! Sub-pixel rearrangement between channel depth and spatial resolution.

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// `(n, c·r², h, w) → (n, c, h·r, w·r)` with
/// `out[n][c][h·r + i][w·r + j] = in[n][c·r² + i·r + j][h][w]`.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let s = input.shape();
    if r == 0 || !s.c.is_multiple_of(r * r) {
        return Err(Error::InvalidArgument(format!(
            "pixel shuffle factor {r} does not divide {} channels into r² groups",
            s.c
        )));
    }
    let out_shape = Shape::new(s.n, s.c / (r * r), s.h * r, s.w * r);
    let mut out = vec![0.0f32; s.numel()];
    for n in 0..s.n {
        for c in 0..out_shape.c {
            for i in 0..r {
                for j in 0..r {
                    let src = input.plane(n, c * r * r + i * r + j);
                    for h in 0..s.h {
                        let row = out_shape.index(n, c, h * r + i, 0);
                        for w in 0..s.w {
                            out[row + w * r + j] = src[h * s.w + w];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

/// Exact inverse of [`pixel_shuffle`]; also its adjoint.
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Result<Tensor> {
    let s = input.shape();
    if r == 0 || !s.h.is_multiple_of(r) || !s.w.is_multiple_of(r) {
        return Err(Error::InvalidArgument(format!(
            "pixel unshuffle factor {r} does not divide spatial size {}x{}",
            s.h, s.w
        )));
    }
    let out_shape = Shape::new(s.n, s.c * r * r, s.h / r, s.w / r);
    let mut out = vec![0.0f32; s.numel()];
    for n in 0..s.n {
        for c in 0..s.c {
            for i in 0..r {
                for j in 0..r {
                    let dst = out_shape.index(n, c * r * r + i * r + j, 0, 0);
                    for h in 0..out_shape.h {
                        let row = s.index(n, c, h * r + i, 0);
                        for w in 0..out_shape.w {
                            out[dst + h * out_shape.w + w] = input.data()[row + w * r + j];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn pixel_shuffle_backward(grad_out: &Tensor, r: usize) -> Result<Tensor> {
    pixel_unshuffle(grad_out, r)
}
