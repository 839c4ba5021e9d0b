//! Model presets and seeded initialization.
//!
//! Presets are parameterized by the dataset's input shape and class count.
//! Weights use He-normal initialization (`N(0, sqrt(2 / fan_in))`) drawn
//! from a seeded ChaCha stream, so the same seed always produces the same
//! parameters.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use mxlab_core::error::{Error, Result};
use mxlab_core::multiexit::{ExitDesc, LayerDesc, ModelDescriptor, MultiExitNetwork};
use mxlab_core::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelPreset {
    /// Four-exit convolutional network, the benchmark model.
    Conv4,
    /// Three-exit convolutional network with wider channels.
    Conv3,
    /// Four-exit multilayer perceptron.
    Mlp4,
}

fn dense(in_dim: usize, out_dim: usize) -> LayerDesc {
    LayerDesc::Dense { in_dim, out_dim }
}

fn conv(in_ch: usize, out_ch: usize) -> LayerDesc {
    LayerDesc::Conv2d {
        in_ch,
        out_ch,
        kernel: 3,
        stride: 1,
        padding: 1,
    }
}

fn pool() -> LayerDesc {
    LayerDesc::MaxPool {
        window: 2,
        stride: 2,
    }
}

/// A pooled, flattened single-dense exit head on a `[c, h, w]` activation.
fn conv_head(attach_after_block: usize, c: usize, h: usize, w: usize, m: usize) -> ExitDesc {
    ExitDesc {
        attach_after_block,
        layers: vec![pool(), LayerDesc::Flatten, dense(c * (h / 2) * (w / 2), m)],
    }
}

impl ModelPreset {
    pub fn name(&self) -> &'static str {
        match self {
            ModelPreset::Conv4 => "conv4",
            ModelPreset::Conv3 => "conv3",
            ModelPreset::Mlp4 => "mlp4",
        }
    }

    /// Architecture descriptor for the given input shape and class count.
    pub fn descriptor(&self, input_shape: &[usize], num_classes: usize) -> Result<ModelDescriptor> {
        if input_shape.len() != 3 {
            return Err(Error::InvalidConfig(format!(
                "presets expect [channels, height, width] inputs, got {input_shape:?}"
            )));
        }
        let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
        let m = num_classes;
        match self {
            ModelPreset::Conv4 => {
                if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
                    return Err(Error::InvalidConfig(format!(
                        "conv4 needs height/width divisible by 4 and at least 8, got {h}x{w}"
                    )));
                }
                let (h2, w2) = (h / 2, w / 2);
                let (h4, w4) = (h / 4, w / 4);
                let flat = 16 * h4 * w4;
                Ok(ModelDescriptor {
                    input_shape: input_shape.to_vec(),
                    num_classes: m,
                    blocks: vec![
                        vec![conv(c, 8), LayerDesc::Relu, pool()],
                        vec![conv(8, 16), LayerDesc::Relu, pool()],
                        vec![conv(16, 16), LayerDesc::Relu],
                        vec![LayerDesc::Flatten, dense(flat, 64), LayerDesc::Relu],
                    ],
                    exits: vec![
                        conv_head(0, 8, h2, w2, m),
                        conv_head(1, 16, h4, w4, m),
                        conv_head(2, 16, h4, w4, m),
                        ExitDesc {
                            attach_after_block: 3,
                            layers: vec![dense(64, m)],
                        },
                    ],
                })
            }
            ModelPreset::Conv3 => {
                if h % 4 != 0 || w % 4 != 0 || h < 8 || w < 8 {
                    return Err(Error::InvalidConfig(format!(
                        "conv3 needs height/width divisible by 4 and at least 8, got {h}x{w}"
                    )));
                }
                let (h2, w2) = (h / 2, w / 2);
                let (h4, w4) = (h / 4, w / 4);
                let flat = 24 * h4 * w4;
                Ok(ModelDescriptor {
                    input_shape: input_shape.to_vec(),
                    num_classes: m,
                    blocks: vec![
                        vec![conv(c, 12), LayerDesc::Relu, pool()],
                        vec![conv(12, 24), LayerDesc::Relu, pool()],
                        vec![LayerDesc::Flatten, dense(flat, 48), LayerDesc::Relu],
                    ],
                    exits: vec![
                        conv_head(0, 12, h2, w2, m),
                        conv_head(1, 24, h4, w4, m),
                        ExitDesc {
                            attach_after_block: 2,
                            layers: vec![dense(48, m)],
                        },
                    ],
                })
            }
            ModelPreset::Mlp4 => {
                let d = c * h * w;
                let widths = [128usize, 96, 64, 48];
                let mut blocks = vec![vec![
                    LayerDesc::Flatten,
                    dense(d, widths[0]),
                    LayerDesc::Relu,
                ]];
                for i in 1..widths.len() {
                    blocks.push(vec![dense(widths[i - 1], widths[i]), LayerDesc::Relu]);
                }
                let exits = widths
                    .iter()
                    .enumerate()
                    .map(|(i, &width)| ExitDesc {
                        attach_after_block: i,
                        layers: vec![dense(width, m)],
                    })
                    .collect();
                Ok(ModelDescriptor {
                    input_shape: input_shape.to_vec(),
                    num_classes: m,
                    blocks,
                    exits,
                })
            }
        }
    }

    /// Builds the network with He-initialized weights and zero biases.
    pub fn build(
        &self,
        input_shape: &[usize],
        num_classes: usize,
        seed: u64,
    ) -> Result<MultiExitNetwork> {
        let descriptor = self.descriptor(input_shape, num_classes)?;
        build_from_descriptor(&descriptor, seed)
    }
}

/// He-normal initialization over an explicit descriptor.
pub fn build_from_descriptor(descriptor: &ModelDescriptor, seed: u64) -> Result<MultiExitNetwork> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    descriptor.instantiate(|shape| {
        let fan_in: usize = match shape.len() {
            2 => shape[1],
            4 => shape[1] * shape[2] * shape[3],
            _ => shape.iter().product(),
        };
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| normal.sample(&mut rng)).collect();
        Tensor::new(shape.to_vec(), data).expect("finite init")
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv4_matches_benchmark_shape() {
        let net = ModelPreset::Conv4.build(&[1, 16, 16], 8, 13).unwrap();
        assert_eq!(net.num_exits(), 4);
        assert_eq!(net.num_classes(), 8);
        let fr = net.cost_fractions();
        assert_eq!(fr.len(), 4);
        assert!(fr[0] < 0.25, "first exit should be cheap, got {}", fr[0]);
        assert_eq!(fr[3], 1.0);
    }

    #[test]
    fn presets_build_for_other_geometries() {
        ModelPreset::Conv3.build(&[3, 8, 8], 4, 1).unwrap();
        ModelPreset::Mlp4.build(&[1, 16, 16], 8, 2).unwrap();
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = ModelPreset::Conv4.build(&[1, 16, 16], 8, 42).unwrap();
        let b = ModelPreset::Conv4.build(&[1, 16, 16], 8, 42).unwrap();
        let c = ModelPreset::Conv4.build(&[1, 16, 16], 8, 43).unwrap();
        let bytes = mxlab_core::training::trunk_param_bytes;
        assert_eq!(bytes(&a), bytes(&b));
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn bad_geometry_is_rejected() {
        assert!(ModelPreset::Conv4.build(&[1, 10, 10], 8, 1).is_err());
        assert!(ModelPreset::Conv4.descriptor(&[16, 16], 8).is_err());
    }
}
