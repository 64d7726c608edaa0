//! Generator, discriminator and feature-extractor graphs.
//!
//! A [`ModelGraph`] is an ordered list of [`Layer`]s plus the config it was
//! built from. Every learnable tensor has a unique dotted name such as
//! `trunk.res.3.conv1.dw.weight`; those names key gradients, optimizer state
//! and checkpoint records.

mod build;
pub mod checkpoint;
mod graph;

pub use build::{
    build_discriminator, build_extractor, build_generator, build_standard_conv_twin, ConvStyle,
    DiscriminatorConfig, ExtractorConfig, GeneratorConfig, ModelConfig, Topology,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, NamedTensor};
pub use graph::{Entry, EntryMut, Gradients, Layer, Tape, TensorKind};

use graph::{backward_layers, commit_layers, forward_layers, trace_layers};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Mode, PRELU_INIT};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    config: ModelConfig,
    layers: Vec<Layer>,
}

/// One parametric layer in a parameter audit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSummary {
    pub name: String,
    pub kind: &'static str,
    pub conv_weights: usize,
    pub biases: usize,
    pub other: usize,
}

impl LayerSummary {
    pub fn total(&self) -> usize {
        self.conv_weights + self.biases + self.other
    }
}

impl ModelGraph {
    pub(crate) fn from_parts(config: ModelConfig, layers: Vec<Layer>) -> Self {
        ModelGraph { config, layers }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> Topology {
        self.config.topology()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn in_channels(&self) -> usize {
        self.config.in_channels()
    }

    /// Every named tensor, parameters and buffers, in layer order.
    pub fn entries(&self) -> Vec<Entry<'_>> {
        let mut out = Vec::new();
        self.layers.iter().for_each(|l| l.entries(&mut out));
        out
    }

    pub fn entries_mut(&mut self) -> Vec<EntryMut<'_>> {
        let mut out = Vec::new();
        self.layers.iter_mut().for_each(|l| l.entries_mut(&mut out));
        out
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.entries()
            .into_iter()
            .filter(|e| e.kind.is_parameter())
            .map(|e| e.name)
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries().into_iter().find(|e| e.name == name).map(|e| e.data)
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.c != self.in_channels() {
            return Err(Error::InvalidArgument(format!(
                "model expects {} input channels, got {s}",
                self.in_channels()
            )));
        }
        if s.numel() == 0 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "model input must be non-empty".into(),
            });
        }
        Ok(())
    }

    /// Eval-mode forward pass. Deterministic and read-only.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.check_input(input)?;
        forward_layers(&self.layers, input, Mode::Eval, None)
    }

    /// Forward pass in `mode`; train mode updates batch-norm running statistics.
    pub fn forward_mode(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        match mode {
            Mode::Eval => self.forward(input),
            Mode::Train => self.forward_train(input).map(|(y, _)| y),
        }
    }

    /// Recorded forward pass that leaves running statistics untouched.
    pub fn forward_tape(&self, input: &Tensor, mode: Mode) -> Result<(Tensor, Tape)> {
        self.check_input(input)?;
        let mut ctx = Vec::with_capacity(self.layers.len());
        let out = forward_layers(&self.layers, input, mode, Some(&mut ctx))?;
        Ok((
            out.clone(),
            Tape {
                ctx,
                input_shape: input.shape(),
                output_shape: out.shape(),
            },
        ))
    }

    /// Train-mode recorded forward; running statistics are updated.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, Tape)> {
        let (out, tape) = self.forward_tape(input, Mode::Train)?;
        self.commit_running_stats(&tape);
        Ok((out, tape))
    }

    pub fn commit_running_stats(&mut self, tape: &Tape) {
        commit_layers(&mut self.layers, &tape.ctx);
    }

    /// Input gradient and parameter gradients for upstream `grad_out`.
    pub fn backward(&self, tape: &Tape, grad_out: &Tensor) -> Result<(Tensor, Gradients)> {
        let mut grads = Gradients::new();
        let dx = self.backward_inner(tape, grad_out, Some(&mut grads))?;
        Ok((dx, grads))
    }

    /// Input gradient only; parameter gradients are discarded.
    pub fn backward_input(&self, tape: &Tape, grad_out: &Tensor) -> Result<Tensor> {
        self.backward_inner(tape, grad_out, None)
    }

    fn backward_inner(&self, tape: &Tape, grad_out: &Tensor, grads: Option<&mut Gradients>) -> Result<Tensor> {
        if grad_out.shape() != tape.output_shape {
            return Err(Error::ShapeMismatch {
                left: grad_out.shape(),
                right: tape.output_shape,
            });
        }
        let mut grads = grads;
        backward_layers(&self.layers, &tape.ctx, grad_out.clone(), &mut grads)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mut macs = 0;
        trace_layers(&self.layers, input, &mut macs)
    }

    /// Multiply-accumulate count of one forward pass on `input`
    /// (convolutions and linear layers only).
    pub fn estimate_macs(&self, input: Shape) -> Result<u64> {
        let mut macs = 0;
        trace_layers(&self.layers, input, &mut macs)?;
        Ok(macs)
    }

    /// Element count of the selected parameter tensors. With `conv_only`,
    /// only convolution weights (and their biases if `include_biases`) count.
    pub fn count_parameters(&self, include_biases: bool, conv_only: bool) -> usize {
        self.entries()
            .iter()
            .filter(|e| e.kind.is_parameter())
            .filter(|e| !conv_only || e.kind.is_conv())
            .filter(|e| include_biases || !e.kind.is_bias())
            .map(|e| e.data.len())
            .sum()
    }

    /// Parameter counts for every named leaf layer, in execution order.
    pub fn layer_summaries(&self) -> Vec<LayerSummary> {
        fn walk(layers: &[Layer], out: &mut Vec<LayerSummary>) {
            for layer in layers {
                if let Layer::Residual { body, .. } = layer {
                    walk(body, out);
                    continue;
                }
                let Some(name) = layer.name() else { continue };
                let mut entries = Vec::new();
                layer.entries(&mut entries);
                let mut s = LayerSummary {
                    name: name.to_string(),
                    kind: layer.kind_label(),
                    conv_weights: 0,
                    biases: 0,
                    other: 0,
                };
                for e in entries.iter().filter(|e| e.kind.is_parameter()) {
                    match e.kind {
                        TensorKind::ConvWeight => s.conv_weights += e.data.len(),
                        k if k.is_bias() => s.biases += e.data.len(),
                        _ => s.other += e.data.len(),
                    }
                }
                out.push(s);
            }
        }
        let mut out = Vec::new();
        walk(&self.layers, &mut out);
        out
    }

    /// Kaiming-uniform weights (`U(−b, b)`, `b = sqrt(6 / fan_in)`), zero
    /// biases, unit batch-norm scale, zero shift and PReLU slopes of 0.25.
    pub fn init_weights(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for e in self.entries_mut() {
            match e.kind {
                TensorKind::ConvWeight | TensorKind::LinearWeight => {
                    let fan_in: usize = e.dims[1..].iter().product();
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    e.data.iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                }
                TensorKind::ConvBias | TensorKind::LinearBias | TensorKind::NormShift => e.data.fill(0.0),
                TensorKind::NormScale => e.data.fill(1.0),
                TensorKind::Slope => e.data.fill(PRELU_INIT),
                TensorKind::Buffer => {
                    let v = if e.name.ends_with("running_var") { 1.0 } else { 0.0 };
                    e.data.fill(v);
                }
            }
        }
    }

    /// All tensors plus the config record.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new();
        ckpt.push(self.config.to_record());
        for e in self.entries() {
            ckpt.push(NamedTensor::new(e.name, e.dims, e.data.to_vec()));
        }
        ckpt
    }

    /// Rebuild a model from the config record and tensors of a checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let config = ModelConfig::from_checkpoint(ckpt)?;
        let mut model = config.build(0)?;
        model.load_state(ckpt)?;
        Ok(model)
    }

    /// Copy tensors from a checkpoint into this topology. Names under
    /// `meta.`, `opt.` and `state.` are ignored; any other unknown name,
    /// missing name or shape mismatch is an error.
    pub fn load_state(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let names: Vec<(String, Vec<usize>)> = self.entries().into_iter().map(|e| (e.name, e.dims)).collect();
        for (name, dims) in &names {
            let rec = ckpt
                .get(name)
                .ok_or_else(|| Error::Mismatch(format!("missing tensor `{name}`")))?;
            if &rec.dims != dims {
                return Err(Error::Mismatch(format!(
                    "tensor `{name}` has dims {:?}, model expects {dims:?}",
                    rec.dims
                )));
            }
        }
        if let Some(extra) = ckpt.tensors().iter().find(|t| {
            !t.name.starts_with("meta.")
                && !t.name.starts_with("opt.")
                && !t.name.starts_with("state.")
                && !names.iter().any(|(n, _)| *n == t.name)
        }) {
            return Err(Error::Mismatch(format!("unknown tensor `{}`", extra.name)));
        }
        for e in self.entries_mut() {
            let rec = ckpt.get(&e.name).expect("checked above");
            e.data.copy_from_slice(&rec.data);
        }
        Ok(())
    }
}
