use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Input window `[floor(i·len/out), ceil((i+1)·len/out))`.
fn window(i: usize, len: usize, out: usize) -> (usize, usize) {
    (i * len / out, ((i + 1) * len).div_ceil(out))
}

pub fn adaptive_avg_pool(input: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("adaptive pool output size must be positive".into()));
    }
    let s = input.shape();
    let out_shape = Shape::new(s.n, s.c, out_h, out_w);
    let mut out = Vec::with_capacity(out_shape.numel());
    for n in 0..s.n {
        for c in 0..s.c {
            let plane = input.plane(n, c);
            for i in 0..out_h {
                let (y0, y1) = window(i, s.h, out_h);
                for j in 0..out_w {
                    let (x0, x1) = window(j, s.w, out_w);
                    let mut sum = 0.0f32;
                    for y in y0..y1 {
                        sum += plane[y * s.w + x0..y * s.w + x1].iter().sum::<f32>();
                    }
                    out.push(sum / ((y1 - y0) * (x1 - x0)) as f32);
                }
            }
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub fn adaptive_avg_pool_backward(input_shape: Shape, grad_out: &Tensor) -> Result<Tensor> {
    let g = grad_out.shape();
    if (g.n, g.c) != (input_shape.n, input_shape.c) {
        return Err(Error::ShapeMismatch {
            left: g,
            right: input_shape,
        });
    }
    let s = input_shape;
    let mut dx = Tensor::zeros(s);
    for n in 0..s.n {
        for c in 0..s.c {
            let base = s.index(n, c, 0, 0);
            for i in 0..g.h {
                let (y0, y1) = window(i, s.h, g.h);
                for j in 0..g.w {
                    let (x0, x1) = window(j, s.w, g.w);
                    let share = grad_out.at(n, c, i, j) / ((y1 - y0) * (x1 - x0)) as f32;
                    for y in y0..y1 {
                        for v in &mut dx.data_mut()[base + y * s.w + x0..base + y * s.w + x1] {
                            *v += share;
                        }
                    }
                }
            }
        }
    }
    Ok(dx)
}
