//! Feature-extraction networks: a prefix of a pre-trained net with channel
//! subsets kept at every conv layer and a final output subset.
//!
//! Dropping an intermediate channel removes its filter, its bias and the
//! matching input slice of the next conv layer. Remaining filters are not
//! rescaled.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::net::{InputShape, Layer, PretrainedNet};
use crate::seed::hash_json;
use crate::tensor::{conv2d, maxpool2x2, relu, FilterBank, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FenConfig {
    /// Stages taken from the source network.
    pub m: usize,
    /// One sorted subset per conv layer in the prefix.
    pub kept_channels: Vec<Vec<usize>>,
    /// Released channels of the last conv layer (`D′ = len`).
    pub output_channels: Vec<usize>,
    pub seed: u64,
}

fn normalize(subset: &[usize]) -> Vec<usize> {
    let mut s = subset.to_vec();
    s.sort_unstable();
    s.dedup();
    s
}

impl FenConfig {
    /// Keeps every channel of the first `m` stages.
    pub fn full(net: &PretrainedNet, m: usize) -> Result<Self> {
        let convs = net.convs_in_prefix(m)?;
        if convs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no conv layer within the first {m} stages"
            )));
        }
        let kept_channels: Vec<Vec<usize>> =
            convs.iter().map(|b| (0..b.out_channels).collect()).collect();
        let output_channels = kept_channels.last().cloned().unwrap_or_default();
        Ok(FenConfig {
            m,
            kept_channels,
            output_channels,
            seed: 0,
        })
    }

    /// Full intermediates, the given output subset.
    pub fn with_output(net: &PretrainedNet, m: usize, output: &[usize]) -> Result<Self> {
        let mut cfg = FenConfig::full(net, m)?;
        cfg.output_channels = normalize(output);
        cfg.validate(net)?;
        Ok(cfg)
    }

    /// Sorts and deduplicates every subset.
    pub fn normalized(mut self) -> Self {
        self.kept_channels = self.kept_channels.iter().map(|s| normalize(s)).collect();
        self.output_channels = normalize(&self.output_channels);
        self
    }

    pub fn d_prime(&self) -> usize {
        self.output_channels.len()
    }

    pub fn validate(&self, net: &PretrainedNet) -> Result<()> {
        let convs = net.convs_in_prefix(self.m)?;
        if convs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no conv layer within the first {} stages",
                self.m
            )));
        }
        if self.kept_channels.len() != convs.len() {
            return Err(Error::InvalidArgument(format!(
                "{} kept-channel subsets for {} conv layers",
                self.kept_channels.len(),
                convs.len()
            )));
        }
        for (l, (subset, bank)) in self.kept_channels.iter().zip(&convs).enumerate() {
            check_subset(subset, bank.out_channels, &format!("conv {l}"))?;
        }
        let last = self.kept_channels.last().expect("non-empty");
        check_subset(&self.output_channels, usize::MAX, "output")?;
        if let Some(bad) = self
            .output_channels
            .iter()
            .find(|c| last.binary_search(c).is_err())
        {
            return Err(Error::InvalidArgument(format!(
                "output channel {bad} is not kept by the last conv layer"
            )));
        }
        Ok(())
    }

    /// Hash binding this configuration to a specific network.
    pub fn config_hash(&self, net: &PretrainedNet) -> u64 {
        hash_json(&(net.checksum(), self))
    }
}

fn check_subset(subset: &[usize], bound: usize, what: &str) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::InvalidArgument(format!("{what} subset is empty")));
    }
    if subset.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument(format!(
            "{what} subset is not strictly increasing"
        )));
    }
    if let Some(&bad) = subset.iter().find(|&&c| c >= bound) {
        return Err(Error::InvalidArgument(format!(
            "{what} subset index {bad} out of range (< {bound})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum FenLayer {
    Conv(FilterBank),
    Maxpool,
    Relu,
}

/// A frozen, sliced network prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct Fen {
    pub source: String,
    pub input: InputShape,
    pub layers: Vec<FenLayer>,
}

pub fn derive_fen(net: &PretrainedNet, cfg: &FenConfig) -> Result<Fen> {
    cfg.validate(net)?;
    let mut prev: Vec<usize> = (0..net.input.channels).collect();
    let mut conv_idx = 0;
    let n_convs = cfg.kept_channels.len();
    let mut layers = Vec::new();
    for layer in net.prefix(cfg.m)? {
        layers.push(match layer {
            Layer::Conv(bank) => {
                let rows = if conv_idx + 1 == n_convs {
                    &cfg.output_channels
                } else {
                    &cfg.kept_channels[conv_idx]
                };
                let sliced = bank.slice(rows, &prev)?;
                prev = rows.clone();
                conv_idx += 1;
                FenLayer::Conv(sliced)
            }
            Layer::Maxpool => FenLayer::Maxpool,
            Layer::Relu => FenLayer::Relu,
        });
    }
    Ok(Fen {
        source: net.name.clone(),
        input: net.input,
        layers,
    })
}

impl Fen {
    pub fn input_channels(&self) -> usize {
        self.input.channels
    }

    fn conv_positions(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, FenLayer::Conv(_)))
            .map(|(i, _)| i)
            .collect()
    }

    /// `D′`, the released channel count.
    pub fn output_channels(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find_map(|l| match l {
                FenLayer::Conv(b) => Some(b.out_channels),
                _ => None,
            })
            .unwrap_or(self.input.channels)
    }

    /// `(c, h, w)` of the representation for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = (self.input.channels, h, w);
        for layer in &self.layers {
            match layer {
                FenLayer::Conv(b) => {
                    let (oh, ow) = b.output_dims(h, w)?;
                    c = b.out_channels;
                    h = oh;
                    w = ow;
                }
                FenLayer::Maxpool => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::DimensionMismatch(format!(
                            "maxpool on odd spatial dims {h}x{w}"
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
                FenLayer::Relu => {}
            }
        }
        Ok((c, h, w))
    }

    /// `t(x; m, f)` for every sample of the batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        self.forward_layers(batch, |_, _| {})
    }

    /// Forward pass calling `observe(layer_index, output)` after every layer.
    pub fn forward_layers(
        &self,
        batch: &Tensor,
        mut observe: impl FnMut(usize, &Tensor),
    ) -> Result<Tensor> {
        if batch.channels() != self.input.channels {
            return Err(Error::DimensionMismatch(format!(
                "batch has {} channels, FEN expects {}",
                batch.channels(),
                self.input.channels
            )));
        }
        let mut x = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                FenLayer::Conv(b) => conv2d(&x, b)?,
                FenLayer::Maxpool => maxpool2x2(&x)?,
                FenLayer::Relu => relu(&x),
            };
            observe(i, &x);
        }
        Ok(x)
    }

    /// Keeps output channels at `positions` (indices into the current output).
    pub fn restrict_outputs(&self, positions: &[usize]) -> Result<Fen> {
        let last = *self
            .conv_positions()
            .last()
            .ok_or_else(|| Error::InvalidArgument("FEN has no conv layer".into()))?;
        self.restrict_conv(last, positions)
    }

    /// Keeps the channels at `positions` of the `k`-th conv layer, removing
    /// the matching input slices downstream.
    pub fn restrict_intermediate(&self, k: usize, positions: &[usize]) -> Result<Fen> {
        let convs = self.conv_positions();
        let idx = *convs.get(k).ok_or_else(|| {
            Error::InvalidArgument(format!("conv index {k} out of range ({} convs)", convs.len()))
        })?;
        self.restrict_conv(idx, positions)
    }

    fn restrict_conv(&self, layer_idx: usize, positions: &[usize]) -> Result<Fen> {
        let positions = normalize(positions);
        if positions.is_empty() {
            return Err(Error::InvalidArgument("empty channel subset".into()));
        }
        let mut out = self.clone();
        let FenLayer::Conv(bank) = &self.layers[layer_idx] else {
            unreachable!("conv position");
        };
        let all_in: Vec<usize> = (0..bank.in_channels).collect();
        out.layers[layer_idx] = FenLayer::Conv(bank.slice(&positions, &all_in)?);
        if let Some(next) = self.conv_positions().into_iter().find(|&p| p > layer_idx) {
            let FenLayer::Conv(nb) = &self.layers[next] else {
                unreachable!("conv position");
            };
            let rows: Vec<usize> = (0..nb.out_channels).collect();
            out.layers[next] = FenLayer::Conv(nb.slice(&rows, &positions)?);
        }
        Ok(out)
    }
}

/// Row `i` is the row-major flattening of channel `j` of sample `i`.
pub fn flatten_channel(reps: &Tensor, j: usize) -> Result<Matrix> {
    let (n, c, h, w) = reps.dims();
    if j >= c {
        return Err(Error::InvalidArgument(format!(
            "channel {j} out of range for {c} channels"
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(n * plane);
    for i in 0..n {
        let start = reps.index(i, j, 0, 0);
        data.extend_from_slice(&reps.data()[start..start + plane]);
    }
    Matrix::from_vec(n, plane, data)
}
