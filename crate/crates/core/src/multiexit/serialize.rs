//! Model file format ("MXNN").
//!
//! Layout: magic `MXNN`, u32 LE version, u32 LE descriptor length, JSON
//! architecture descriptor, little-endian f64 parameter payload (blocks then
//! heads, each layer weight-then-bias), u32 LE CRC32 of the payload bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExitHead, MultiExitNetwork};
use crate::error::{Error, Result};
use crate::tensor::{Layer, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"MXNN";
pub const MODEL_VERSION: u32 = 1;

/// Parameter-free layer description, the unit of the JSON descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerDesc {
    Dense {
        in_dim: usize,
        out_dim: usize,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitDesc {
    pub attach_after_block: usize,
    pub layers: Vec<LayerDesc>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDescriptor {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub blocks: Vec<Vec<LayerDesc>>,
    pub exits: Vec<ExitDesc>,
}

impl LayerDesc {
    pub fn of(layer: &Layer) -> Self {
        match layer {
            Layer::Dense { weight, .. } => LayerDesc::Dense {
                in_dim: weight.shape()[1],
                out_dim: weight.shape()[0],
            },
            Layer::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => LayerDesc::Conv2d {
                in_ch: weight.shape()[1],
                out_ch: weight.shape()[0],
                kernel: weight.shape()[2],
                stride: *stride,
                padding: *padding,
            },
            Layer::Relu => LayerDesc::Relu,
            Layer::MaxPool { window, stride } => LayerDesc::MaxPool {
                window: *window,
                stride: *stride,
            },
            Layer::Flatten => LayerDesc::Flatten,
        }
    }

    /// Shape of the weight tensor, if this layer has parameters.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerDesc::Dense { in_dim, out_dim } => Some(vec![*out_dim, *in_dim]),
            LayerDesc::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some(vec![*out_ch, *in_ch, *kernel, *kernel]),
            _ => None,
        }
    }

    pub fn bias_shape(&self) -> Option<Vec<usize>> {
        match self {
            LayerDesc::Dense { out_dim, .. } => Some(vec![*out_dim]),
            LayerDesc::Conv2d { out_ch, .. } => Some(vec![*out_ch]),
            _ => None,
        }
    }

    fn build(&self, weight: Option<Tensor>, bias: Option<Tensor>) -> Layer {
        match self {
            LayerDesc::Dense { .. } => Layer::Dense {
                weight: weight.unwrap(),
                bias: bias.unwrap(),
            },
            LayerDesc::Conv2d {
                stride, padding, ..
            } => Layer::Conv2d {
                weight: weight.unwrap(),
                bias: bias.unwrap(),
                stride: *stride,
                padding: *padding,
            },
            LayerDesc::Relu => Layer::Relu,
            LayerDesc::MaxPool { window, stride } => Layer::MaxPool {
                window: *window,
                stride: *stride,
            },
            LayerDesc::Flatten => Layer::Flatten,
        }
    }
}

impl ModelDescriptor {
    pub fn of(net: &MultiExitNetwork) -> Self {
        ModelDescriptor {
            input_shape: net.input_shape().to_vec(),
            num_classes: net.num_classes(),
            blocks: net
                .blocks()
                .iter()
                .map(|b| b.iter().map(LayerDesc::of).collect())
                .collect(),
            exits: net
                .exits()
                .iter()
                .map(|e| ExitDesc {
                    attach_after_block: e.attach_after_block,
                    layers: e.layers.iter().map(LayerDesc::of).collect(),
                })
                .collect(),
        }
    }

    fn all_layers(&self) -> impl Iterator<Item = &LayerDesc> {
        self.blocks
            .iter()
            .flatten()
            .chain(self.exits.iter().flat_map(|e| e.layers.iter()))
    }

    /// Total number of f64 parameters implied by the descriptor.
    pub fn param_count(&self) -> usize {
        self.all_layers()
            .map(|d| {
                d.weight_shape().map_or(0, |s| s.iter().product::<usize>())
                    + d.bias_shape().map_or(0, |s| s.iter().product::<usize>())
            })
            .sum()
    }

    /// Builds a network, drawing each weight tensor from `init_weight` and
    /// zero-filling biases.
    pub fn instantiate<F>(&self, mut init_weight: F) -> Result<MultiExitNetwork>
    where
        F: FnMut(&[usize]) -> Tensor,
    {
        let make = |desc: &LayerDesc, init_weight: &mut F| -> Layer {
            let weight = desc.weight_shape().map(|s| init_weight(&s));
            let bias = desc.bias_shape().map(Tensor::zeros);
            desc.build(weight, bias)
        };
        let blocks = self
            .blocks
            .iter()
            .map(|b| b.iter().map(|d| make(d, &mut init_weight)).collect())
            .collect();
        let exits = self
            .exits
            .iter()
            .map(|e| ExitHead {
                attach_after_block: e.attach_after_block,
                layers: e.layers.iter().map(|d| make(d, &mut init_weight)).collect(),
            })
            .collect();
        MultiExitNetwork::new(blocks, exits, self.num_classes, self.input_shape.clone())
    }
}

fn push_params(layer: &Layer, payload: &mut Vec<u8>) {
    if let Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias, .. } = layer {
        for &v in weight.data().iter().chain(bias.data()) {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes a network to `path` in the MXNN format.
pub fn save_model(net: &MultiExitNetwork, path: &Path) -> Result<()> {
    let descriptor = serde_json::to_vec(&ModelDescriptor::of(net))?;
    let mut payload = Vec::new();
    for layer in net.blocks().iter().flatten() {
        push_params(layer, &mut payload);
    }
    for exit in net.exits() {
        for layer in &exit.layers {
            push_params(layer, &mut payload);
        }
    }
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&payload);
    let crc = hasher.finalize();

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    w.write_all(&(descriptor.len() as u32).to_le_bytes())?;
    w.write_all(&descriptor)?;
    w.write_all(&payload)?;
    w.write_all(&crc.to_le_bytes())?;
    w.flush()?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(what)
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

/// Loads a network saved by [`save_model`]. The round trip is bit-exact on
/// parameters, attach points, and metadata.
pub fn load_model(path: &Path) -> Result<MultiExitNetwork> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MODEL_MAGIC {
        return Err(Error::BadMagic("MXNN"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != MODEL_VERSION {
        return Err(Error::UnsupportedVersion {
            kind: "MXNN",
            version,
        });
    }

    let desc_len = read_u32(&mut r, "descriptor length")? as usize;
    let mut desc_buf = vec![0u8; desc_len];
    read_exact(&mut r, &mut desc_buf, "descriptor")?;
    let descriptor: ModelDescriptor = serde_json::from_slice(&desc_buf)?;

    let mut payload = vec![0u8; descriptor.param_count() * 8];
    read_exact(&mut r, &mut payload, "parameter payload")?;
    let stored_crc = read_u32(&mut r, "checksum")?;
    let mut hasher = crc32fast::Hasher::new();
    hasher.update(&payload);
    if hasher.finalize() != stored_crc {
        return Err(Error::ChecksumMismatch);
    }

    let mut offset = 0usize;
    let mut next_tensor = |shape: Vec<usize>| -> Tensor {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            let mut b = [0u8; 8];
            b.copy_from_slice(&payload[offset..offset + 8]);
            data.push(f64::from_le_bytes(b));
            offset += 8;
        }
        Tensor::new(shape, data).expect("payload length checked against descriptor")
    };

    let mut build = |desc: &LayerDesc| -> Layer {
        let weight = desc.weight_shape().map(&mut next_tensor);
        let bias = desc.bias_shape().map(&mut next_tensor);
        desc.build(weight, bias)
    };
    let blocks: Vec<Vec<Layer>> = descriptor
        .blocks
        .iter()
        .map(|b| b.iter().map(&mut build).collect())
        .collect();
    let exits: Vec<ExitHead> = descriptor
        .exits
        .iter()
        .map(|e| ExitDesc {
            attach_after_block: e.attach_after_block,
            layers: e.layers.clone(),
        })
        .map(|e| ExitHead {
            attach_after_block: e.attach_after_block,
            layers: e.layers.iter().map(&mut build).collect(),
        })
        .collect();

    MultiExitNetwork::new(blocks, exits, descriptor.num_classes, descriptor.input_shape)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{self, toy_net};
    use std::fs;

    #[test]
    fn round_trip_is_bit_exact() {
        let net = toy_net(99);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mxnn");
        save_model(&net, &path).unwrap();
        let loaded = load_model(&path).unwrap();

        assert_eq!(net.num_classes(), loaded.num_classes());
        assert_eq!(net.input_shape(), loaded.input_shape());
        assert_eq!(net.cost_fractions(), loaded.cost_fractions());

        let mut rng = testutil::rng(1);
        let x = testutil::random_tensor(&mut rng, vec![1, 4, 4], 1.0);
        let (a, _) = net.forward_all_exits(&x, false).unwrap();
        let (b, _) = loaded.forward_all_exits(&x, false).unwrap();
        for (la, lb) in a.iter().zip(&b) {
            assert_eq!(la.data(), lb.data(), "forward outputs must be bit-identical");
        }

        // Double save produces identical bytes.
        let path2 = dir.path().join("model2.mxnn");
        save_model(&loaded, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let net = toy_net(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mxnn");
        save_model(&net, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'Z';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::BadMagic(_))));
    }

    #[test]
    fn future_version_is_rejected() {
        let net = toy_net(6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mxnn");
        save_model(&net, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_model(&path),
            Err(Error::UnsupportedVersion { version: 7, .. })
        ));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let net = toy_net(7);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mxnn");
        save_model(&net, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let net = toy_net(8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.mxnn");
        save_model(&net, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        let mid = bytes.len() - 20;
        bytes[mid] ^= 0xff;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::ChecksumMismatch)));
    }
}
