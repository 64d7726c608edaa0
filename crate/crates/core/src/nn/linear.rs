use super::gemm::{gemm, MatRef};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Fully connected layer parameters; `weight` is row-major `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub in_features: usize,
    pub out_features: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads {
    pub input: Tensor,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl LinearParams {
    pub fn zeros(in_features: usize, out_features: usize, bias: bool) -> Self {
        LinearParams {
            weight: vec![0.0; in_features * out_features],
            bias: bias.then(|| vec![0.0; out_features]),
            in_features,
            out_features,
        }
    }

    fn check(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        let width = s.c * s.plane();
        if width != self.in_features || self.weight.len() != self.in_features * self.out_features {
            return Err(Error::InvalidArgument(format!(
                "linear layer expects {} input features, got {width} from {s}",
                self.in_features
            )));
        }
        Ok(())
    }
}

/// `out = input · Wᵀ + b`, one row per batch item. Each item is flattened
/// in `(c, h, w)` order; the result has shape `(n, out, 1, 1)`.
pub fn linear(input: &Tensor, p: &LinearParams) -> Result<Tensor> {
    p.check(input)?;
    let n = input.shape().n;
    let mut out = vec![0.0f32; n * p.out_features];
    if let Some(b) = &p.bias {
        for row in out.chunks_mut(p.out_features) {
            row.copy_from_slice(b);
        }
    }
    gemm(
        n,
        p.in_features,
        p.out_features,
        MatRef::row_major(input.data(), p.in_features),
        MatRef::transposed(&p.weight, p.in_features),
        1.0,
        &mut out,
        p.out_features,
    );
    Tensor::from_vec(Shape::new(n, p.out_features, 1, 1), out)
}

pub fn linear_backward(input: &Tensor, p: &LinearParams, grad_out: &Tensor) -> Result<LinearGrads> {
    p.check(input)?;
    let n = input.shape().n;
    let expected = Shape::new(n, p.out_features, 1, 1);
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            left: grad_out.shape(),
            right: expected,
        });
    }
    let dy = grad_out.data();
    let mut dx = vec![0.0f32; n * p.in_features];
    gemm(
        n,
        p.out_features,
        p.in_features,
        MatRef::row_major(dy, p.out_features),
        MatRef::row_major(&p.weight, p.in_features),
        0.0,
        &mut dx,
        p.in_features,
    );
    let mut dw = vec![0.0f32; p.weight.len()];
    gemm(
        p.out_features,
        n,
        p.in_features,
        MatRef::transposed(dy, p.out_features),
        MatRef::row_major(input.data(), p.in_features),
        0.0,
        &mut dw,
        p.in_features,
    );
    let db = p.bias.as_ref().map(|_| {
        (0..p.out_features)
            .map(|o| (0..n).map(|i| dy[i * p.out_features + o] as f64).sum::<f64>() as f32)
            .collect()
    });
    Ok(LinearGrads {
        input: Tensor::from_vec(input.shape(), dx)?,
        weight: dw,
        bias: db,
    })
}
