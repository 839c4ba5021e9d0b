//! Recorded forward passes over a sequential layer chain.

use super::{Layer, LayerGradients, Tensor};
use crate::error::{Error, Result};

/// Forward pass through `layers`, returning one activation per layer boundary.
///
/// With `record = true` the returned tape holds every intermediate needed to
/// differentiate the pass with respect to both the input and the parameters.
pub fn forward<'a>(
    layers: &'a [Layer],
    x: &Tensor,
    record: bool,
) -> Result<(Vec<Tensor>, Option<GradientTape<'a>>)> {
    let mut activations = Vec::with_capacity(layers.len());
    let mut inputs = if record {
        Vec::with_capacity(layers.len())
    } else {
        Vec::new()
    };
    let mut current = x.clone();
    for layer in layers {
        if record {
            inputs.push(current.clone());
        }
        current = layer.forward(&current)?;
        activations.push(current.clone());
    }
    let tape = record.then_some(GradientTape {
        layers,
        inputs,
        consumed: false,
    });
    Ok((activations, tape))
}

/// Intermediates from one recorded forward pass over a layer chain.
///
/// The backward pass may be run exactly once; a second call reports
/// [`Error::TapeConsumed`].
#[derive(Debug)]
pub struct GradientTape<'a> {
    layers: &'a [Layer],
    inputs: Vec<Tensor>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to the chain input and parameters.
#[derive(Debug, Clone)]
pub struct ChainGradients {
    /// dLoss/dInput, same shape as the forward input.
    pub input: Tensor,
    /// Per-layer parameter gradients, aligned with the layer list.
    pub layers: Vec<LayerGradients>,
}

impl GradientTape<'_> {
    /// Backpropagates `output_grad` (dLoss/dOutput) through the recorded pass.
    pub fn backward(&mut self, output_grad: &Tensor) -> Result<ChainGradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;

        let mut grad = output_grad.clone();
        let mut layer_grads = vec![LayerGradients::None; self.layers.len()];
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let (grad_in, grad_params) = layer.backward(&self.inputs[idx], &grad)?;
            layer_grads[idx] = grad_params;
            grad = grad_in;
        }
        grad.check_finite("backward")?;
        Ok(ChainGradients {
            input: grad,
            layers: layer_grads,
        })
    }
}
