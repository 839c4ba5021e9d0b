//! Shared fixtures for the benchmark targets: a benchmark-sized multi-exit
//! network and matching inputs, built deterministically.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mxlab_core::multiexit::{ExitHead, MultiExitNetwork};
use mxlab_core::tensor::{Layer, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

fn dense(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Layer {
    let scale = (2.0 / in_dim as f64).sqrt();
    Layer::Dense {
        weight: random_tensor(rng, vec![out_dim, in_dim], scale),
        bias: Tensor::zeros(vec![out_dim]),
    }
}

fn conv(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize) -> Layer {
    let scale = (2.0 / (9 * in_ch) as f64).sqrt();
    Layer::Conv2d {
        weight: random_tensor(rng, vec![out_ch, in_ch, 3, 3], scale),
        bias: Tensor::zeros(vec![out_ch]),
        stride: 1,
        padding: 1,
    }
}

/// The benchmark-sized four-exit convolutional network on 1x16x16 inputs.
pub fn bench_net(seed: u64) -> MultiExitNetwork {
    let mut rng = rng(seed);
    let pool = Layer::MaxPool {
        window: 2,
        stride: 2,
    };
    let blocks = vec![
        vec![conv(&mut rng, 1, 8), Layer::Relu, pool.clone()],
        vec![conv(&mut rng, 8, 16), Layer::Relu, pool.clone()],
        vec![conv(&mut rng, 16, 16), Layer::Relu],
        vec![Layer::Flatten, dense(&mut rng, 256, 64), Layer::Relu],
    ];
    let exits = vec![
        ExitHead {
            attach_after_block: 0,
            layers: vec![pool.clone(), Layer::Flatten, dense(&mut rng, 128, 8)],
        },
        ExitHead {
            attach_after_block: 1,
            layers: vec![pool.clone(), Layer::Flatten, dense(&mut rng, 64, 8)],
        },
        ExitHead {
            attach_after_block: 2,
            layers: vec![pool, Layer::Flatten, dense(&mut rng, 64, 8)],
        },
        ExitHead {
            attach_after_block: 3,
            layers: vec![dense(&mut rng, 64, 8)],
        },
    ];
    MultiExitNetwork::new(blocks, exits, 8, vec![1, 16, 16]).unwrap()
}

/// An input in the valid image domain.
pub fn bench_input(seed: u64) -> Tensor {
    let mut rng = rng(seed);
    let data = (0..256).map(|_| rng.gen_range(0.0..1.0)).collect();
    Tensor::new(vec![1, 16, 16], data).unwrap()
}
