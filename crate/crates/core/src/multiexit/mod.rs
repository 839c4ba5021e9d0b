//! Multi-exit network container: trunk blocks, exit heads, cost fractions.
//!
//! A network is an ordered list of blocks (each a layer chain) with K exit
//! heads attached at strictly increasing block boundaries. The last exit is
//! attached after the last block and plays the role of the original
//! classifier. The trunk is shared: one forward pass feeds every head.

mod cost;
mod serialize;

pub use cost::{compute_cost_fractions, layer_flops, CostModel};
pub use serialize::{load_model, save_model, ExitDesc, LayerDesc, ModelDescriptor, MODEL_MAGIC, MODEL_VERSION};

use crate::error::{Error, Result};
use crate::tensor::{forward, GradientTape, Layer, LayerGradients, Tensor};

/// An internal (or final) classifier attached after a trunk block.
#[derive(Debug, Clone)]
pub struct ExitHead {
    /// 0-based index of the trunk block whose output this head consumes.
    pub attach_after_block: usize,
    /// Head layers; must end in a dense layer producing `num_classes` logits.
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct MultiExitNetwork {
    blocks: Vec<Vec<Layer>>,
    exits: Vec<ExitHead>,
    num_classes: usize,
    input_shape: Vec<usize>,
    cost_fractions: Vec<f64>,
}

impl MultiExitNetwork {
    /// Validates shape chaining, attach ordering, and head output widths,
    /// then derives the per-exit cost fractions from layer FLOP counts.
    pub fn new(
        blocks: Vec<Vec<Layer>>,
        exits: Vec<ExitHead>,
        num_classes: usize,
        input_shape: Vec<usize>,
    ) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(|b| b.is_empty()) {
            return Err(Error::InvalidNetwork("empty block list or empty block".into()));
        }
        if exits.is_empty() {
            return Err(Error::InvalidNetwork("at least one exit is required".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidNetwork("need at least two classes".into()));
        }

        // Propagate shapes through the trunk, remembering each block boundary.
        let mut boundary_shapes = Vec::with_capacity(blocks.len());
        let mut shape = input_shape.clone();
        for block in &blocks {
            for layer in block {
                shape = layer.output_shape(&shape)?;
            }
            boundary_shapes.push(shape.clone());
        }

        for pair in exits.windows(2) {
            if pair[1].attach_after_block <= pair[0].attach_after_block {
                return Err(Error::InvalidNetwork(
                    "exit attach points must be strictly increasing".into(),
                ));
            }
        }
        let last = exits.last().unwrap();
        if last.attach_after_block != blocks.len() - 1 {
            return Err(Error::InvalidNetwork(
                "final exit must attach after the last block".into(),
            ));
        }

        for (i, exit) in exits.iter().enumerate() {
            if exit.attach_after_block >= blocks.len() {
                return Err(Error::InvalidNetwork(format!(
                    "exit {i} attaches after block {} but there are only {} blocks",
                    exit.attach_after_block,
                    blocks.len()
                )));
            }
            let mut head_shape = boundary_shapes[exit.attach_after_block].clone();
            for layer in &exit.layers {
                head_shape = layer.output_shape(&head_shape)?;
            }
            if head_shape != [num_classes] {
                return Err(Error::InvalidNetwork(format!(
                    "exit {i} produces shape {head_shape:?}, expected [{num_classes}]"
                )));
            }
        }

        let mut net = MultiExitNetwork {
            blocks,
            exits,
            num_classes,
            input_shape,
            cost_fractions: Vec::new(),
        };
        let model = CostModel::from_network(&net)?;
        net.cost_fractions = compute_cost_fractions(&net, &model)?;
        Ok(net)
    }

    pub fn num_exits(&self) -> usize {
        self.exits.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn blocks(&self) -> &[Vec<Layer>] {
        &self.blocks
    }

    pub fn exits(&self) -> &[ExitHead] {
        &self.exits
    }

    /// Cumulative fraction of full inference cost paid when stopping at each
    /// exit; strictly increasing, final entry exactly 1.0.
    pub fn cost_fractions(&self) -> &[f64] {
        &self.cost_fractions
    }

    /// Indices of the internal exits, i.e. all but the final one.
    pub fn internal_exits(&self) -> Vec<usize> {
        (0..self.exits.len().saturating_sub(1)).collect()
    }

    /// Mutable access for the training loop. Shapes must not change.
    pub(crate) fn blocks_mut(&mut self) -> &mut Vec<Vec<Layer>> {
        &mut self.blocks
    }

    pub(crate) fn exits_mut(&mut self) -> &mut Vec<ExitHead> {
        &mut self.exits
    }

    /// Logits of every exit for one input; a single shared trunk pass.
    ///
    /// With `record = true` also returns a tape for [`MultiExitTape::backward`].
    pub fn forward_all_exits(
        &self,
        x: &Tensor,
        record: bool,
    ) -> Result<(Vec<Tensor>, Option<MultiExitTape<'_>>)> {
        if x.shape() != self.input_shape.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "network input",
                expected: self.input_shape.clone(),
                found: x.shape().to_vec(),
            });
        }

        let mut logits = Vec::with_capacity(self.exits.len());
        let mut block_tapes = Vec::new();
        let mut head_tapes = Vec::new();

        let mut activation = x.clone();
        let mut exit_iter = self.exits.iter().peekable();
        for (block_idx, block) in self.blocks.iter().enumerate() {
            let (acts, tape) = forward(block, &activation, record)?;
            activation = acts.into_iter().last().unwrap();
            if record {
                block_tapes.push(tape.unwrap());
            }
            while let Some(exit) = exit_iter.peek() {
                if exit.attach_after_block != block_idx {
                    break;
                }
                let exit = exit_iter.next().unwrap();
                let (head_acts, head_tape) = forward(&exit.layers, &activation, record)?;
                logits.push(head_acts.into_iter().last().unwrap());
                if record {
                    head_tapes.push(head_tape.unwrap());
                }
            }
        }

        let tape = record.then_some(MultiExitTape {
            net: self,
            block_tapes,
            head_tapes,
            consumed: false,
        });
        Ok((logits, tape))
    }

    /// Logits of the final exit only (still walks the whole trunk).
    pub fn final_logits(&self, x: &Tensor) -> Result<Tensor> {
        let (logits, _) = self.forward_all_exits(x, false)?;
        Ok(logits.into_iter().last().unwrap())
    }
}

/// Recorded multi-exit forward pass: one tape per block and per head.
pub struct MultiExitTape<'a> {
    net: &'a MultiExitNetwork,
    block_tapes: Vec<GradientTape<'a>>,
    head_tapes: Vec<GradientTape<'a>>,
    consumed: bool,
}

/// Gradients of a scalar loss over exit logits, with respect to the input and
/// every parameter, aligned with the network layout.
#[derive(Debug, Clone)]
pub struct MultiExitGradients {
    pub input: Tensor,
    pub blocks: Vec<Vec<LayerGradients>>,
    pub heads: Vec<Vec<LayerGradients>>,
}

impl MultiExitGradients {
    pub fn zeros_like(net: &MultiExitNetwork) -> Self {
        MultiExitGradients {
            input: Tensor::zeros(net.input_shape().to_vec()),
            blocks: net
                .blocks()
                .iter()
                .map(|b| b.iter().map(LayerGradients::zeros_like).collect())
                .collect(),
            heads: net
                .exits()
                .iter()
                .map(|e| e.layers.iter().map(LayerGradients::zeros_like).collect())
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MultiExitGradients) -> Result<()> {
        self.input.add_assign(&other.input)?;
        for (mine, theirs) in self.blocks.iter_mut().zip(&other.blocks) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.add_assign(b)?;
            }
        }
        for (mine, theirs) in self.heads.iter_mut().zip(&other.heads) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                a.add_assign(b)?;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        self.input.scale(factor);
        for block in &mut self.blocks {
            for g in block {
                g.scale(factor);
            }
        }
        for head in &mut self.heads {
            for g in head {
                g.scale(factor);
            }
        }
    }
}

impl MultiExitTape<'_> {
    /// Backpropagates per-exit logit gradients through heads and trunk.
    ///
    /// `exit_seeds[i]` is dLoss/dLogits_i, or `None` when exit `i` does not
    /// participate in the loss. Consumes the tape; a second call errors.
    pub fn backward(&mut self, exit_seeds: &[Option<Tensor>]) -> Result<MultiExitGradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        self.consumed = true;

        let net = self.net;
        if exit_seeds.len() != net.num_exits() {
            return Err(Error::ShapeMismatch {
                context: "exit seeds",
                expected: vec![net.num_exits()],
                found: vec![exit_seeds.len()],
            });
        }

        let mut head_grads: Vec<Vec<LayerGradients>> = Vec::with_capacity(net.num_exits());
        let mut attach_grads: Vec<Option<Tensor>> = Vec::with_capacity(net.num_exits());
        for (i, seed) in exit_seeds.iter().enumerate() {
            match seed {
                Some(seed) => {
                    let grads = self.head_tapes[i].backward(seed)?;
                    head_grads.push(grads.layers);
                    attach_grads.push(Some(grads.input));
                }
                None => {
                    head_grads.push(
                        net.exits()[i]
                            .layers
                            .iter()
                            .map(LayerGradients::zeros_like)
                            .collect(),
                    );
                    attach_grads.push(None);
                }
            }
        }

        // Walk the trunk backwards, folding in each exit's contribution at
        // its attach point.
        let mut block_grads: Vec<Vec<LayerGradients>> = vec![Vec::new(); net.blocks().len()];
        let mut running: Option<Tensor> = None;
        for block_idx in (0..net.blocks().len()).rev() {
            for (i, exit) in net.exits().iter().enumerate() {
                if exit.attach_after_block == block_idx {
                    if let Some(g) = &attach_grads[i] {
                        match &mut running {
                            Some(r) => r.add_assign(g)?,
                            None => running = Some(g.clone()),
                        }
                    }
                }
            }
            match running.take() {
                Some(grad) => {
                    let grads = self.block_tapes[block_idx].backward(&grad)?;
                    block_grads[block_idx] = grads.layers;
                    running = Some(grads.input);
                }
                None => {
                    block_grads[block_idx] = net.blocks()[block_idx]
                        .iter()
                        .map(LayerGradients::zeros_like)
                        .collect();
                }
            }
        }

        let input = match running {
            Some(g) => g,
            None => Tensor::zeros(net.input_shape().to_vec()),
        };
        Ok(MultiExitGradients {
            input,
            blocks: block_grads,
            heads: head_grads,
        })
    }
}
