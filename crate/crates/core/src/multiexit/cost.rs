//! FLOP accounting and per-exit cost fractions.
//!
//! Convention: a multiply-accumulate counts as 2 FLOPs, so a dense layer
//! `in -> out` costs `2*in*out` and a convolution costs
//! `2*k^2*in_ch*out_ch*h_out*w_out`. Activations, pooling, and reshapes are
//! free. Only ratios matter for the efficacy metric, so any consistent
//! convention gives the same curves.

use super::MultiExitNetwork;
use crate::error::{Error, Result};
use crate::tensor::Layer;

/// FLOPs of one layer applied to `input_shape`.
pub fn layer_flops(layer: &Layer, input_shape: &[usize]) -> Result<u64> {
    let out_shape = layer.output_shape(input_shape)?;
    Ok(match layer {
        Layer::Dense { weight, .. } => {
            let (out_dim, in_dim) = (weight.shape()[0] as u64, weight.shape()[1] as u64);
            2 * in_dim * out_dim
        }
        Layer::Conv2d { weight, .. } => {
            let ws = weight.shape();
            let (oc, ic, k) = (ws[0] as u64, ws[1] as u64, ws[2] as u64);
            let (oh, ow) = (out_shape[1] as u64, out_shape[2] as u64);
            2 * k * k * ic * oc * oh * ow
        }
        Layer::Relu | Layer::MaxPool { .. } | Layer::Flatten => 0,
    })
}

/// Per-block and per-exit-head FLOP counts.
#[derive(Debug, Clone)]
pub struct CostModel {
    pub block_flops: Vec<u64>,
    pub head_flops: Vec<u64>,
}

impl CostModel {
    /// Derives counts from the network's own layers.
    pub fn from_network(net: &MultiExitNetwork) -> Result<Self> {
        let mut block_flops = Vec::with_capacity(net.blocks().len());
        let mut boundary_shapes = Vec::with_capacity(net.blocks().len());
        let mut shape = net.input_shape().to_vec();
        for block in net.blocks() {
            let mut total = 0u64;
            for layer in block {
                total += layer_flops(layer, &shape)?;
                shape = layer.output_shape(&shape)?;
            }
            block_flops.push(total);
            boundary_shapes.push(shape.clone());
        }

        let mut head_flops = Vec::with_capacity(net.exits().len());
        for exit in net.exits() {
            let mut shape = boundary_shapes[exit.attach_after_block].clone();
            let mut total = 0u64;
            for layer in &exit.layers {
                total += layer_flops(layer, &shape)?;
                shape = layer.output_shape(&shape)?;
            }
            head_flops.push(total);
        }
        let model = CostModel {
            block_flops,
            head_flops,
        };
        model.validate(net)?;
        Ok(model)
    }

    fn validate(&self, net: &MultiExitNetwork) -> Result<()> {
        if self.block_flops.len() != net.blocks().len() {
            return Err(Error::MissingCost(format!(
                "have {} block counts for {} blocks",
                self.block_flops.len(),
                net.blocks().len()
            )));
        }
        if self.head_flops.len() != net.num_exits() {
            return Err(Error::MissingCost(format!(
                "have {} head counts for {} exits",
                self.head_flops.len(),
                net.num_exits()
            )));
        }
        if self.block_flops.iter().any(|&f| f == 0) || self.head_flops.iter().any(|&f| f == 0) {
            return Err(Error::MissingCost("zero FLOP count".into()));
        }
        Ok(())
    }
}

/// Cumulative cost fraction paid when stopping at each exit:
/// `(blocks up to the attach point + that head) / (all blocks + final head)`.
/// The final fraction is forced to exactly 1.0.
pub fn compute_cost_fractions(net: &MultiExitNetwork, model: &CostModel) -> Result<Vec<f64>> {
    model.validate(net)?;
    let trunk_total: u64 = model.block_flops.iter().sum();
    let full_cost = (trunk_total + *model.head_flops.last().unwrap()) as f64;

    let mut fractions = Vec::with_capacity(net.num_exits());
    for (i, exit) in net.exits().iter().enumerate() {
        if i == net.num_exits() - 1 {
            fractions.push(1.0);
            continue;
        }
        let prefix: u64 = model.block_flops[..=exit.attach_after_block].iter().sum();
        fractions.push((prefix + model.head_flops[i]) as f64 / full_cost);
    }

    for pair in fractions.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::InvalidNetwork(format!(
                "cost fractions not strictly increasing: {fractions:?}"
            )));
        }
    }
    if fractions.iter().any(|&f| f <= 0.0 || f > 1.0) {
        return Err(Error::InvalidNetwork(format!(
            "cost fractions out of (0, 1]: {fractions:?}"
        )));
    }
    Ok(fractions)
}
