//! Shared helpers for unit tests: random layer chains and a central
//! finite-difference oracle that stays independent of the backward pass.

use crate::tensor::{cross_entropy, forward, Layer, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
pub use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape, data).unwrap()
}

pub fn random_dense(rng: &mut ChaCha8Rng, in_dim: usize, out_dim: usize) -> Layer {
    Layer::Dense {
        weight: random_tensor(rng, vec![out_dim, in_dim], 0.8),
        bias: random_tensor(rng, vec![out_dim], 0.3),
    }
}

pub fn random_conv(rng: &mut ChaCha8Rng, in_ch: usize, out_ch: usize, k: usize) -> Layer {
    Layer::Conv2d {
        weight: random_tensor(rng, vec![out_ch, in_ch, k, k], 0.6),
        bias: random_tensor(rng, vec![out_ch], 0.2),
        stride: 1,
        padding: 1,
    }
}

/// A small random chain plus a matching random input, cycling through a few
/// dense and convolutional topologies.
pub fn random_chain(rng: &mut ChaCha8Rng, variant: usize) -> (Vec<Layer>, Tensor) {
    match variant % 3 {
        0 => {
            let d = rng.gen_range(2..6);
            let h = rng.gen_range(2..6);
            let m = rng.gen_range(2..5);
            let layers = vec![
                random_dense(rng, d, h),
                Layer::Relu,
                random_dense(rng, h, m),
            ];
            let x = random_tensor(rng, vec![d], 1.0);
            (layers, x)
        }
        1 => {
            let c = rng.gen_range(1..3);
            let s = rng.gen_range(4..6);
            let oc = rng.gen_range(1..3);
            let flat = oc * s * s;
            let m = rng.gen_range(2..5);
            let layers = vec![
                random_conv(rng, c, oc, 3),
                Layer::Relu,
                Layer::Flatten,
                random_dense(rng, flat, m),
            ];
            let x = random_tensor(rng, vec![c, s, s], 1.0);
            (layers, x)
        }
        _ => {
            let c = rng.gen_range(1..3);
            let s = 6;
            let oc = rng.gen_range(2..4);
            let pooled = s / 2;
            let flat = oc * pooled * pooled;
            let m = rng.gen_range(2..4);
            let layers = vec![
                random_conv(rng, c, oc, 3),
                Layer::Relu,
                Layer::MaxPool { window: 2, stride: 2 },
                Layer::Flatten,
                random_dense(rng, flat, m),
            ];
            let x = random_tensor(rng, vec![c, s, s], 1.0);
            (layers, x)
        }
    }
}

/// Cross-entropy of the chain output against `target`, as a plain function of
/// an arbitrary input; the finite-difference probe below perturbs through it.
pub fn chain_loss(layers: &[Layer], x: &Tensor, target: &Tensor) -> f64 {
    let (acts, _) = forward(layers, x, false).unwrap();
    cross_entropy(acts.last().unwrap(), target).unwrap()
}

/// Two-block, two-exit toy: conv trunk with a dense head at each boundary.
/// Input shape `[1, 4, 4]`, three classes.
pub fn toy_net(seed: u64) -> crate::multiexit::MultiExitNetwork {
    use crate::multiexit::{ExitHead, MultiExitNetwork};
    let mut rng = rng(seed);
    let blocks = vec![
        vec![random_conv(&mut rng, 1, 2, 3), Layer::Relu],
        vec![
            Layer::Flatten,
            random_dense(&mut rng, 2 * 4 * 4, 6),
            Layer::Relu,
        ],
    ];
    let exits = vec![
        ExitHead {
            attach_after_block: 0,
            layers: vec![Layer::Flatten, random_dense(&mut rng, 2 * 4 * 4, 3)],
        },
        ExitHead {
            attach_after_block: 1,
            layers: vec![random_dense(&mut rng, 6, 3)],
        },
    ];
    MultiExitNetwork::new(blocks, exits, 3, vec![1, 4, 4]).unwrap()
}

/// Central finite differences of `f` around `x`, one coordinate at a time.
pub fn finite_difference_grad<F: FnMut(&Tensor) -> f64>(x: &Tensor, h: f64, mut f: F) -> Tensor {
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        grad.data_mut()[i] = (f(&plus) - f(&minus)) / (2.0 * h);
    }
    grad
}

/// max_i |a_i - b_i| / max(1, |b_i|): relative error with an absolute floor,
/// so near-zero coordinates do not blow the ratio up.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() / y.abs().max(1.0))
        .fold(0.0, f64::max)
}
