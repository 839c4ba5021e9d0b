//! Layer kinds and their forward/backward rules.
//!
//! Supported set: dense, conv2d (zero padding), relu, maxpool, flatten.
//! Dense expects a flat `[d]` input; conv2d and maxpool expect `[c, h, w]`.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub enum Layer {
    /// Fully connected layer: `weight` is `[out, in]`, `bias` is `[out]`.
    Dense { weight: Tensor, bias: Tensor },
    /// 2-D convolution: `weight` is `[out_ch, in_ch, k, k]`, `bias` is `[out_ch]`.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool { window: usize, stride: usize },
    Flatten,
}

/// Parameter gradients produced by a backward pass, aligned with the layer list.
#[derive(Debug, Clone)]
pub enum LayerGradients {
    Params { weight: Tensor, bias: Tensor },
    None,
}

impl LayerGradients {
    pub fn zeros_like(layer: &Layer) -> Self {
        match layer {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                LayerGradients::Params {
                    weight: Tensor::zeros(weight.shape().to_vec()),
                    bias: Tensor::zeros(bias.shape().to_vec()),
                }
            }
            _ => LayerGradients::None,
        }
    }

    pub fn add_assign(&mut self, other: &LayerGradients) -> Result<()> {
        match (self, other) {
            (
                LayerGradients::Params { weight, bias },
                LayerGradients::Params {
                    weight: ow,
                    bias: ob,
                },
            ) => {
                weight.add_assign(ow)?;
                bias.add_assign(ob)?;
                Ok(())
            }
            (LayerGradients::None, LayerGradients::None) => Ok(()),
            _ => Err(Error::InvalidLayer(
                "gradient accumulation across mismatched layer kinds".into(),
            )),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        if let LayerGradients::Params { weight, bias } = self {
            weight.scale(factor);
            bias.scale(factor);
        }
    }
}

impl Layer {
    /// Output shape for a given input shape, or an error if they cannot chain.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match self {
            Layer::Dense { weight, .. } => {
                let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
                if input != [in_dim] {
                    return Err(Error::ShapeMismatch {
                        context: "dense input",
                        expected: vec![in_dim],
                        found: input.to_vec(),
                    });
                }
                Ok(vec![out_dim])
            }
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let ws = weight.shape();
                let (out_ch, in_ch, k) = (ws[0], ws[1], ws[2]);
                if input.len() != 3 || input[0] != in_ch {
                    return Err(Error::ShapeMismatch {
                        context: "conv2d input",
                        expected: vec![in_ch],
                        found: input.to_vec(),
                    });
                }
                let (h, w) = (input[1], input[2]);
                if h + 2 * padding < k || w + 2 * padding < k {
                    return Err(Error::InvalidLayer(format!(
                        "conv2d kernel {k} larger than padded input {h}x{w}"
                    )));
                }
                let oh = (h + 2 * padding - k) / stride + 1;
                let ow = (w + 2 * padding - k) / stride + 1;
                Ok(vec![out_ch, oh, ow])
            }
            Layer::Relu => Ok(input.to_vec()),
            Layer::MaxPool { window, stride } => {
                if input.len() != 3 {
                    return Err(Error::ShapeMismatch {
                        context: "maxpool input",
                        expected: vec![0, 0, 0],
                        found: input.to_vec(),
                    });
                }
                let (c, h, w) = (input[0], input[1], input[2]);
                if h < *window || w < *window {
                    return Err(Error::InvalidLayer(format!(
                        "maxpool window {window} larger than input {h}x{w}"
                    )));
                }
                let oh = (h - window) / stride + 1;
                let ow = (w - window) / stride + 1;
                Ok(vec![c, oh, ow])
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } => {
                weight.len() + bias.len()
            }
            _ => 0,
        }
    }

    /// Forward pass through this single layer.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        self.output_shape(input.shape())?;
        let out = match self {
            Layer::Dense { weight, bias } => dense_forward(weight, bias, input),
            Layer::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => conv2d_forward(weight, bias, *stride, *padding, input),
            Layer::Relu => {
                let data = input.data().iter().map(|&v| v.max(0.0)).collect();
                Tensor {
                    shape: input.shape().to_vec(),
                    data,
                }
            }
            Layer::MaxPool { window, stride } => maxpool_forward(*window, *stride, input),
            Layer::Flatten => input.reshaped(vec![input.len()])?,
        };
        out.check_finite("layer forward")?;
        Ok(out)
    }

    /// Backward pass: given the input seen at forward time and the gradient
    /// with respect to the output, produce the gradient with respect to the
    /// input and (where applicable) the parameters.
    pub fn backward(&self, input: &Tensor, grad_out: &Tensor) -> Result<(Tensor, LayerGradients)> {
        let expected_out = self.output_shape(input.shape())?;
        if grad_out.shape() != expected_out.as_slice() {
            return Err(Error::ShapeMismatch {
                context: "layer backward (grad_out)",
                expected: expected_out,
                found: grad_out.shape().to_vec(),
            });
        }
        match self {
            Layer::Dense { weight, .. } => {
                let (gi, gw, gb) = dense_backward(weight, input, grad_out);
                Ok((gi, LayerGradients::Params { weight: gw, bias: gb }))
            }
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                let (gi, gw, gb) = conv2d_backward(weight, *stride, *padding, input, grad_out);
                Ok((gi, LayerGradients::Params { weight: gw, bias: gb }))
            }
            Layer::Relu => {
                let data = input
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((
                    Tensor {
                        shape: input.shape().to_vec(),
                        data,
                    },
                    LayerGradients::None,
                ))
            }
            Layer::MaxPool { window, stride } => Ok((
                maxpool_backward(*window, *stride, input, grad_out),
                LayerGradients::None,
            )),
            Layer::Flatten => Ok((
                grad_out.reshaped(input.shape().to_vec())?,
                LayerGradients::None,
            )),
        }
    }
}

fn dense_forward(weight: &Tensor, bias: &Tensor, input: &Tensor) -> Tensor {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let x = input.data();
    let mut out = bias.data().to_vec();
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let mut acc = 0.0;
        for i in 0..in_dim {
            acc += row[i] * x[i];
        }
        out[o] += acc;
    }
    Tensor {
        shape: vec![out_dim],
        data: out,
    }
}

fn dense_backward(weight: &Tensor, input: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (out_dim, in_dim) = (weight.shape()[0], weight.shape()[1]);
    let w = weight.data();
    let x = input.data();
    let g = grad_out.data();

    let mut grad_in = vec![0.0; in_dim];
    let mut grad_w = vec![0.0; out_dim * in_dim];
    for o in 0..out_dim {
        let row = &w[o * in_dim..(o + 1) * in_dim];
        let go = g[o];
        let grow = &mut grad_w[o * in_dim..(o + 1) * in_dim];
        for i in 0..in_dim {
            grad_in[i] += row[i] * go;
            grow[i] = go * x[i];
        }
    }
    (
        Tensor {
            shape: vec![in_dim],
            data: grad_in,
        },
        Tensor {
            shape: vec![out_dim, in_dim],
            data: grad_w,
        },
        Tensor {
            shape: vec![out_dim],
            data: g.to_vec(),
        },
    )
}

fn conv2d_forward(
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    input: &Tensor,
) -> Tensor {
    let ws = weight.shape();
    let (out_ch, in_ch, k) = (ws[0], ws[1], ws[2]);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;

    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let mut out = vec![0.0; out_ch * oh * ow];

    for oc in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b[oc];
                for ic in 0..in_ch {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += wt[((oc * in_ch + ic) * k + ky) * k + kx]
                                * x[(ic * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor {
        shape: vec![out_ch, oh, ow],
        data: out,
    }
}

fn conv2d_backward(
    weight: &Tensor,
    stride: usize,
    padding: usize,
    input: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let ws = weight.shape();
    let (out_ch, in_ch, k) = (ws[0], ws[1], ws[2]);
    let (h, w) = (input.shape()[1], input.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);

    let x = input.data();
    let wt = weight.data();
    let g = grad_out.data();

    let mut grad_in = vec![0.0; in_ch * h * w];
    let mut grad_w = vec![0.0; out_ch * in_ch * k * k];
    let mut grad_b = vec![0.0; out_ch];

    for oc in 0..out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = g[(oc * oh + oy) * ow + ox];
                grad_b[oc] += go;
                for ic in 0..in_ch {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let wi = ((oc * in_ch + ic) * k + ky) * k + kx;
                            let xi = (ic * h + iy as usize) * w + ix as usize;
                            grad_in[xi] += wt[wi] * go;
                            grad_w[wi] += x[xi] * go;
                        }
                    }
                }
            }
        }
    }
    (
        Tensor {
            shape: input.shape().to_vec(),
            data: grad_in,
        },
        Tensor {
            shape: ws.to_vec(),
            data: grad_w,
        },
        Tensor {
            shape: vec![out_ch],
            data: grad_b,
        },
    )
}

fn maxpool_forward(window: usize, stride: usize, input: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let x = input.data();
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                for ky in 0..window {
                    for kx in 0..window {
                        let v = x[(ch * h + oy * stride + ky) * w + ox * stride + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out[(ch * oh + oy) * ow + ox] = best;
            }
        }
    }
    Tensor {
        shape: vec![c, oh, ow],
        data: out,
    }
}

// Gradient routes to the first maximum in row-major scan order, which keeps
// backward deterministic under ties.
fn maxpool_backward(window: usize, stride: usize, input: &Tensor, grad_out: &Tensor) -> Tensor {
    let (c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (oh, ow) = (grad_out.shape()[1], grad_out.shape()[2]);
    let x = input.data();
    let g = grad_out.data();
    let mut grad_in = vec![0.0; c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for ky in 0..window {
                    for kx in 0..window {
                        let idx = (ch * h + oy * stride + ky) * w + ox * stride + kx;
                        if x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                grad_in[best_idx] += g[(ch * oh + oy) * ow + ox];
            }
        }
    }
    Tensor {
        shape: input.shape().to_vec(),
        data: grad_in,
    }
}
