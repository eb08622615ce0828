//! Small seeded networks standing in for pre-trained models at desk scale.
//!
//! All weights are rounded to `f32` so that the networks survive a trip
//! through the weight file unchanged.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::net::{InputShape, Layer, PretrainedNet};
use crate::seed::rng_for;
use crate::tensor::FilterBank;

fn r32(v: f64) -> f64 {
    v as f32 as f64
}

fn he_bank(rng: &mut ChaCha8Rng, out: usize, inp: usize, k: usize, pad: usize) -> FilterBank {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("positive std");
    let weights = (0..out * inp * k * k).map(|_| r32(normal.sample(rng))).collect();
    let bias = (0..out).map(|_| r32(rng.random_range(-0.05..0.05))).collect();
    FilterBank::new(out, inp, k, k, 1, pad, weights, bias).expect("consistent bank")
}

fn conv_relu(bank: FilterBank) -> [Layer; 2] {
    [Layer::Conv(bank), Layer::Relu]
}

/// VGG-style 6-stage net on 3x16x16 inputs:
/// conv(8) conv(8) pool conv(16) conv(16) pool, 3x3 kernels, padding 1.
pub fn vgg_like(seed: u64) -> PretrainedNet {
    let mut rng = rng_for(seed, "zoo/vgg_like", 0);
    let mut layers = Vec::new();
    layers.extend(conv_relu(he_bank(&mut rng, 8, 3, 3, 1)));
    layers.extend(conv_relu(he_bank(&mut rng, 8, 8, 3, 1)));
    layers.push(Layer::Maxpool);
    layers.extend(conv_relu(he_bank(&mut rng, 16, 8, 3, 1)));
    layers.extend(conv_relu(he_bank(&mut rng, 16, 16, 3, 1)));
    layers.push(Layer::Maxpool);
    PretrainedNet::new(
        "vgg-like",
        InputShape {
            channels: 3,
            height: 16,
            width: 16,
        },
        layers,
    )
    .expect("valid toy net")
}

/// Six stacked 3x3 convs (8 channels) on 3x16x16 inputs; every stage adds
/// the same amount of work, which makes latency ordering easy to observe.
pub fn conv_chain(seed: u64) -> PretrainedNet {
    let mut rng = rng_for(seed, "zoo/conv_chain", 0);
    let mut layers = Vec::new();
    layers.extend(conv_relu(he_bank(&mut rng, 8, 3, 3, 1)));
    for _ in 0..5 {
        layers.extend(conv_relu(he_bank(&mut rng, 8, 8, 3, 1)));
    }
    PretrainedNet::new(
        "conv-chain",
        InputShape {
            channels: 3,
            height: 16,
            width: 16,
        },
        layers,
    )
    .expect("valid toy net")
}

/// Number of label-independent output channels of [`planted_net`].
pub const PLANTED_NOISE_CHANNELS: usize = 8;
/// Total output channels of [`planted_net`].
pub const PLANTED_CHANNELS: usize = 16;

/// One conv stage (3 -> 16, 3x3, padding 1) plus relu and 2x2 pooling, meant
/// for images whose channel 0 carries the class signal and whose channels 1
/// and 2 are label-independent texture (see
/// [`crate::data::SyntheticSpec::planted`]).
///
/// Output channels `0..8` read only the texture channels through a sharp
/// centre tap, so they carry no label information but copy pixels. Channels
/// `8..16` apply near-uniform blurs to channel 0: class evidence with little
/// pixel detail.
pub fn planted_net(seed: u64) -> PretrainedNet {
    let mut rng = rng_for(seed, "zoo/planted", 0);
    let (out, inp, k) = (PLANTED_CHANNELS, 3, 3);
    let mut weights = vec![0.0; out * inp * k * k];
    let idx = |o: usize, i: usize, y: usize, x: usize| ((o * inp + i) * k + y) * k + x;
    for o in 0..PLANTED_NOISE_CHANNELS {
        let src = 1 + o % 2;
        weights[idx(o, src, 1, 1)] = r32(rng.random_range(0.8..1.2));
        for y in 0..k {
            for x in 0..k {
                if (y, x) != (1, 1) {
                    weights[idx(o, src, y, x)] = r32(rng.random_range(-0.05..0.05));
                }
            }
        }
    }
    for o in PLANTED_NOISE_CHANNELS..out {
        let sharpness = rng.random_range(0.0..0.6);
        for y in 0..k {
            for x in 0..k {
                let centre = if (y, x) == (1, 1) { sharpness } else { 0.0 };
                let w = (1.0 + rng.random_range(-0.1..0.1)) / 9.0 + centre;
                weights[idx(o, 0, y, x)] = r32(w / (1.0 + sharpness));
            }
        }
    }
    let bias = vec![0.0; out];
    let bank = FilterBank::new(out, inp, k, k, 1, 1, weights, bias).expect("consistent bank");
    PretrainedNet::new(
        "planted",
        InputShape {
            channels: 3,
            height: 8,
            width: 8,
        },
        vec![Layer::Conv(bank), Layer::Relu, Layer::Maxpool],
    )
    .expect("valid toy net")
}

/// Four-conv net (conv(8) conv(8) pool conv(16) conv(16) pool, 3x3, no
/// biases) on 3x16x16 inputs whose first layer is redundant: filters `2k` and
/// `2k+1` are near-duplicates and layer 2 weights both copies alike. Keeping
/// one filter of each pair roughly halves the downstream activations, the
/// redundancy pattern that makes thinning the first layer cheap.
pub fn redundant_net(seed: u64) -> PretrainedNet {
    let mut rng = rng_for(seed, "zoo/redundant", 0);
    let (k, pairs) = (3, 4);
    let base = he_bank(&mut rng, pairs, 3, k, 1);
    let mut w1 = Vec::with_capacity(2 * pairs * 27);
    for p in 0..pairs {
        for _copy in 0..2 {
            for &v in base.filter(p) {
                w1.push(r32(v * (1.0 + rng.random_range(-0.05..0.05))));
            }
        }
    }
    let c1 = FilterBank::new(2 * pairs, 3, k, k, 1, 1, w1, vec![0.0; 2 * pairs]).unwrap();

    let half = he_bank(&mut rng, 8, pairs, k, 1);
    let mut w2 = Vec::with_capacity(8 * 2 * pairs * 9);
    for o in 0..8 {
        for i in 0..2 * pairs {
            let p = i / 2;
            for t in 0..9 {
                w2.push(r32(0.5 * half.filter(o)[p * 9 + t] * (1.0 + rng.random_range(-0.05..0.05))));
            }
        }
    }
    let c2 = FilterBank::new(8, 2 * pairs, k, k, 1, 1, w2, vec![0.0; 8]).unwrap();
    let mut c3 = he_bank(&mut rng, 16, 8, k, 1);
    c3.bias.iter_mut().for_each(|b| *b = 0.0);
    let mut c4 = he_bank(&mut rng, 16, 16, k, 1);
    c4.bias.iter_mut().for_each(|b| *b = 0.0);

    let mut layers = Vec::new();
    layers.extend(conv_relu(c1));
    layers.extend(conv_relu(c2));
    layers.push(Layer::Maxpool);
    layers.extend(conv_relu(c3));
    layers.extend(conv_relu(c4));
    layers.push(Layer::Maxpool);
    PretrainedNet::new(
        "redundant",
        InputShape {
            channels: 3,
            height: 16,
            width: 16,
        },
        layers,
    )
    .expect("valid toy net")
}

/// Single 1x1 conv copying every input channel.
pub fn identity_net(input: InputShape) -> PretrainedNet {
    let c = input.channels;
    let mut weights = vec![0.0; c * c];
    for i in 0..c {
        weights[i * c + i] = 1.0;
    }
    let bank = FilterBank::new(c, c, 1, 1, 1, 0, weights, vec![0.0; c]).unwrap();
    PretrainedNet::new("identity", input, vec![Layer::Conv(bank)]).unwrap()
}

/// Single 1x1 conv with all-zero weights and biases.
pub fn zero_net(input: InputShape, out_channels: usize) -> PretrainedNet {
    let c = input.channels;
    let bank = FilterBank::new(
        out_channels,
        c,
        1,
        1,
        1,
        0,
        vec![0.0; out_channels * c],
        vec![0.0; out_channels],
    )
    .unwrap();
    PretrainedNet::new("zero", input, vec![Layer::Conv(bank)]).unwrap()
}

/// Looks a toy network up by name.
pub fn by_name(name: &str, seed: u64) -> Option<PretrainedNet> {
    Some(match name {
        "vgg-like" => vgg_like(seed),
        "conv-chain" => conv_chain(seed),
        "planted" => planted_net(seed),
        "redundant" => redundant_net(seed),
        _ => return None,
    })
}

pub const NAMES: &[&str] = &["vgg-like", "conv-chain", "planted", "redundant"];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zoo_nets_validate_and_are_seeded() {
        for name in NAMES {
            let a = by_name(name, 1).unwrap();
            a.validate().unwrap();
            assert_eq!(a, by_name(name, 1).unwrap());
            assert_ne!(a, by_name(name, 2).unwrap());
        }
        assert!(by_name("nope", 0).is_none());
    }

    #[test]
    fn weights_are_f32_exact() {
        for name in NAMES {
            for layer in &by_name(name, 3).unwrap().layers {
                if let Layer::Conv(b) = layer {
                    assert!(b.weights.iter().all(|&v| v == v as f32 as f64));
                }
            }
        }
    }
}
