use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const PRELU_INIT: f32 = 0.25;
pub const LEAKY_SLOPE: f32 = 0.2;
/// Sigmoid outputs are clamped to `[SIGMOID_CLAMP, 1 − SIGMOID_CLAMP]`.
pub const SIGMOID_CLAMP: f32 = 1e-7;

fn check_slope(input: &Tensor, slope: &[f32]) -> Result<()> {
    if slope.len() != input.shape().c {
        return Err(Error::InvalidArgument(format!(
            "prelu has {} slopes, input has {} channels",
            slope.len(),
            input.shape().c
        )));
    }
    Ok(())
}

fn channel_of(input: &Tensor, i: usize) -> usize {
    let s = input.shape();
    (i / s.plane()) % s.c
}

/// Per-channel parametric ReLU.
pub fn prelu(input: &Tensor, slope: &[f32]) -> Result<Tensor> {
    check_slope(input, slope)?;
    let plane = input.shape().plane();
    let c = input.shape().c;
    let mut out = input.clone();
    for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let a = slope[i % c];
        chunk.iter_mut().filter(|v| **v < 0.0).for_each(|v| *v *= a);
    }
    Ok(out)
}

/// Returns `(input gradient, slope gradient)`.
pub fn prelu_backward(input: &Tensor, slope: &[f32], grad_out: &Tensor) -> Result<(Tensor, Vec<f32>)> {
    check_slope(input, slope)?;
    input.check_same(grad_out)?;
    let mut dslope = vec![0.0f64; slope.len()];
    let mut dx = grad_out.clone();
    for (i, (d, &x)) in dx.data_mut().iter_mut().zip(input.data()).enumerate() {
        if x < 0.0 {
            let c = channel_of(input, i);
            dslope[c] += (*d * x) as f64;
            *d *= slope[c];
        }
    }
    Ok((dx, dslope.into_iter().map(|v| v as f32).collect()))
}

pub fn leaky_relu(input: &Tensor, slope: f32) -> Tensor {
    input.map(|x| if x >= 0.0 { x } else { slope * x })
}

pub fn leaky_relu_backward(input: &Tensor, slope: f32, grad_out: &Tensor) -> Result<Tensor> {
    input.check_same(grad_out)?;
    let mut dx = grad_out.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if x < 0.0 {
            *d *= slope;
        }
    }
    Ok(dx)
}

pub fn relu6(input: &Tensor) -> Tensor {
    input.map(|x| x.clamp(0.0, 6.0))
}

pub fn relu6_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.check_same(grad_out)?;
    let mut dx = grad_out.clone();
    for (d, &x) in dx.data_mut().iter_mut().zip(input.data()) {
        if !(x > 0.0 && x < 6.0) {
            *d = 0.0;
        }
    }
    Ok(dx)
}

/// Logistic function, clamped away from 0 and 1 so downstream logs stay finite.
pub fn sigmoid(input: &Tensor) -> Tensor {
    input.map(|x| {
        let s = if x >= 0.0 {
            1.0 / (1.0 + (-x).exp())
        } else {
            let e = x.exp();
            e / (1.0 + e)
        };
        s.clamp(SIGMOID_CLAMP, 1.0 - SIGMOID_CLAMP)
    })
}

/// Uses the saved (clamped) output; `σ' = σ(1 − σ)`.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.check_same(grad_out)?;
    let mut dx = grad_out.clone();
    for (d, &s) in dx.data_mut().iter_mut().zip(output.data()) {
        *d *= s * (1.0 - s);
    }
    Ok(dx)
}
