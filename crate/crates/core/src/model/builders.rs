//! Seeded constructors for the desk-scale architectures used as fixtures.

use super::{LayerSpec, Layout, ModelGraph, NormKind};
use crate::numerics::DenseMatrix;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn he_normal(rng: &mut ChaCha12Rng, fan_in: usize) -> f64 {
    let std = (2.0 / fan_in as f64).sqrt();
    let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
    g * std
}

fn dense(rng: &mut ChaCha12Rng, out_features: usize, in_features: usize) -> LayerSpec {
    let data: Vec<f64> =
        (0..out_features * in_features).map(|_| he_normal(rng, in_features)).collect();
    LayerSpec::Dense {
        weight: DenseMatrix::new(out_features, in_features, data).unwrap(),
        bias: vec![0.0; out_features],
    }
}

/// ReLU MLP: `input -> hidden[0] -> ... -> classes`.
pub fn mlp(input: Layout, hidden: &[usize], classes: usize, seed: u64) -> ModelGraph {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    let mut features = input.size();
    for &h in hidden {
        layers.push(dense(&mut rng, h, features));
        layers.push(LayerSpec::ReLU);
        features = h;
    }
    layers.push(dense(&mut rng, classes, features));
    ModelGraph::new(input, layers, vec![], classes).expect("builder shapes are consistent")
}

/// Small CNN: `[conv (+ batch norm) + relu] x blocks`, global average
/// pooling, dense head. Spatial size is preserved by each conv.
pub fn conv_net(
    input: Layout,
    blocks: &[(usize, usize)],
    with_batch_norm: bool,
    classes: usize,
    seed: u64,
) -> ModelGraph {
    let (mut channels, height, width) = match input {
        Layout::Image { channels, height, width } => (channels, height, width),
        _ => panic!("conv_net requires an image input layout"),
    };
    assert_eq!(height, width, "square inputs keep global pooling simple");
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for &(c_out, kernel) in blocks {
        let fan_in = channels * kernel * kernel;
        let weight: Vec<f64> =
            (0..c_out * channels * kernel * kernel).map(|_| he_normal(&mut rng, fan_in)).collect();
        layers.push(LayerSpec::Conv2D {
            in_channels: channels,
            out_channels: c_out,
            kernel,
            weight,
            bias: vec![0.0; c_out],
        });
        if with_batch_norm {
            layers.push(LayerSpec::BatchNorm2D {
                gamma: vec![1.0; c_out],
                beta: vec![0.0; c_out],
                running_mean: vec![0.0; c_out],
                running_var: vec![1.0; c_out],
                eps: 1e-5,
            });
        }
        layers.push(LayerSpec::ReLU);
        channels = c_out;
    }
    layers.push(LayerSpec::AvgPool2D { pool: height });
    layers.push(dense(&mut rng, classes, channels));
    ModelGraph::new(input, layers, vec![], classes).expect("builder shapes are consistent")
}

/// Token classifier: `blocks` pre-norm FFN blocks followed by a dense head
/// over the flattened token matrix.
pub fn ffn_classifier(
    tokens: usize,
    dim: usize,
    hidden: usize,
    blocks: usize,
    norm: NormKind,
    classes: usize,
    seed: u64,
) -> ModelGraph {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for _ in 0..blocks {
        let w_up: Vec<f64> = (0..dim * hidden).map(|_| he_normal(&mut rng, dim)).collect();
        let w_down: Vec<f64> = (0..hidden * dim).map(|_| he_normal(&mut rng, hidden)).collect();
        layers.push(LayerSpec::FFNBlock {
            norm,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            w_up: DenseMatrix::new(dim, hidden, w_up).unwrap(),
            w_down: DenseMatrix::new(hidden, dim, w_down).unwrap(),
        });
    }
    layers.push(dense(&mut rng, classes, tokens * dim));
    let input = Layout::Tokens { len: tokens, dim };
    ModelGraph::new(input, layers, vec![], classes).expect("builder shapes are consistent")
}
