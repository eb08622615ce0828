//! Pre-trained network descriptions and the manifest + blob weight format.
//!
//! A network is a straight chain of conv / maxpool / relu layers. Layer
//! counts (`m`) are measured in *stages*: every conv or maxpool layer opens a
//! stage and any relu layers that follow it belong to that stage, so a
//! "conv + relu" pair is one layer in the usual sense.
//!
//! On disk a network is a JSON manifest plus a blob of little-endian `f32`
//! values. Each conv layer stores its filters `[out][in][kh][kw]` followed by
//! its biases; the manifest records both byte offsets and a 64-bit checksum
//! of the whole blob.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::hash64;
use crate::tensor::FilterBank;

pub const MANIFEST_FORMAT: &str = "fenkit-netspec/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

/// Layer metadata without weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    Maxpool,
    Relu,
}

impl LayerSpec {
    pub fn of(bank: &FilterBank) -> Self {
        LayerSpec::Conv {
            in_channels: bank.in_channels,
            out_channels: bank.out_channels,
            kernel_h: bank.kernel_h,
            kernel_w: bank.kernel_w,
            stride: bank.stride,
            padding: bank.padding,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Maxpool => "maxpool",
            LayerSpec::Relu => "relu",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(FilterBank),
    Maxpool,
    Relu,
}

impl Layer {
    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv(b) => LayerSpec::of(b),
            Layer::Maxpool => LayerSpec::Maxpool,
            Layer::Relu => LayerSpec::Relu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedNet {
    pub name: String,
    pub input: InputShape,
    pub layers: Vec<Layer>,
}

impl PretrainedNet {
    pub fn new(name: impl Into<String>, input: InputShape, layers: Vec<Layer>) -> Result<Self> {
        let net = PretrainedNet {
            name: name.into(),
            input,
            layers,
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks the channel chain, the spatial arithmetic and finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        if !matches!(self.layers[0], Layer::Conv(_) | Layer::Maxpool) {
            return Err(Error::InvalidArgument(
                "first layer must be conv or maxpool".into(),
            ));
        }
        let (mut c, mut h, mut w) = (self.input.channels, self.input.height, self.input.width);
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(bank) => {
                    bank.validate()?;
                    if bank.in_channels != c {
                        return Err(Error::DimensionMismatch(format!(
                            "layer {i}: conv expects {} input channels, previous layer yields {c}",
                            bank.in_channels
                        )));
                    }
                    let (oh, ow) = bank.output_dims(h, w)?;
                    c = bank.out_channels;
                    h = oh;
                    w = ow;
                }
                Layer::Maxpool => {
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(Error::DimensionMismatch(format!(
                            "layer {i}: maxpool on odd spatial dims {h}x{w}"
                        )));
                    }
                    h /= 2;
                    w /= 2;
                }
                Layer::Relu => {}
            }
        }
        Ok(())
    }

    /// Number of stages (conv or maxpool layers).
    pub fn stage_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| !matches!(l, Layer::Relu))
            .count()
    }

    /// Number of raw layers making up the first `m` stages, trailing relus
    /// included.
    pub fn prefix_len(&self, m: usize) -> Result<usize> {
        let total = self.stage_count();
        if m == 0 || m > total {
            return Err(Error::InvalidArgument(format!(
                "layer count m = {m} outside 1..={total}"
            )));
        }
        let mut seen = 0;
        let mut end = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if !matches!(l, Layer::Relu) {
                if seen == m {
                    break;
                }
                seen += 1;
            }
            end = i + 1;
        }
        Ok(end)
    }

    pub fn prefix(&self, m: usize) -> Result<&[Layer]> {
        Ok(&self.layers[..self.prefix_len(m)?])
    }

    /// Conv filter banks in the first `m` stages.
    pub fn convs_in_prefix(&self, m: usize) -> Result<Vec<&FilterBank>> {
        Ok(self
            .prefix(m)?
            .iter()
            .filter_map(|l| match l {
                Layer::Conv(b) => Some(b),
                _ => None,
            })
            .collect())
    }

    /// Output channels `D_r` available after `m` stages.
    pub fn channels_at(&self, m: usize) -> Result<usize> {
        self.convs_in_prefix(m)?
            .last()
            .map(|b| b.out_channels)
            .ok_or_else(|| Error::InvalidArgument(format!("no conv layer within the first {m} stages")))
    }

    /// `(c, h, w)` of the representation after `m` stages with every channel kept.
    pub fn output_shape(&self, m: usize) -> Result<(usize, usize, usize)> {
        let (mut c, mut h, mut w) = (self.input.channels, self.input.height, self.input.width);
        for layer in self.prefix(m)? {
            match layer {
                Layer::Conv(b) => {
                    let (oh, ow) = b.output_dims(h, w)?;
                    c = b.out_channels;
                    h = oh;
                    w = ow;
                }
                Layer::Maxpool => {
                    h /= 2;
                    w /= 2;
                }
                Layer::Relu => {}
            }
        }
        Ok((c, h, w))
    }

    /// Encodes all weights the way the blob stores them.
    pub fn blob_bytes(&self) -> Vec<u8> {
        let mut bytes = Vec::new();
        for layer in &self.layers {
            if let Layer::Conv(b) = layer {
                for &v in b.weights.iter().chain(&b.bias) {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        bytes
    }

    pub fn checksum(&self) -> u64 {
        hash64(&self.blob_bytes())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    format: String,
    name: String,
    input: InputShape,
    blob: String,
    blob_bytes: u64,
    checksum: String,
    layers: Vec<ManifestLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestLayer {
    #[serde(flatten)]
    spec: LayerSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight_offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias_offset: Option<u64>,
}

fn blob_path_for(manifest: &Path) -> PathBuf {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "net".into());
    manifest.with_file_name(format!("{stem}.bin"))
}

/// Writes `manifest_path` and a sibling `<stem>.bin` blob.
///
/// Weights are stored as `f32`; networks whose weights are already
/// `f32`-representable round-trip bit-exactly.
pub fn save_netspec(net: &PretrainedNet, manifest_path: &Path) -> Result<()> {
    net.validate()?;
    let blob = net.blob_bytes();
    let blob_path = blob_path_for(manifest_path);
    let mut offset = 0u64;
    let layers = net
        .layers
        .iter()
        .map(|l| match l {
            Layer::Conv(b) => {
                let weight_offset = offset;
                offset += 4 * b.weights.len() as u64;
                let bias_offset = offset;
                offset += 4 * b.bias.len() as u64;
                ManifestLayer {
                    spec: l.spec(),
                    weight_offset: Some(weight_offset),
                    bias_offset: Some(bias_offset),
                }
            }
            _ => ManifestLayer {
                spec: l.spec(),
                weight_offset: None,
                bias_offset: None,
            },
        })
        .collect();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        name: net.name.clone(),
        input: net.input,
        blob: blob_path
            .file_name()
            .expect("blob path has a file name")
            .to_string_lossy()
            .into_owned(),
        blob_bytes: blob.len() as u64,
        checksum: format!("{:016x}", hash64(&blob)),
        layers,
    };
    fs::write(&blob_path, &blob)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(manifest_path, text)?;
    Ok(())
}

pub fn load_netspec(manifest_path: &Path) -> Result<PretrainedNet> {
    if !manifest_path.exists() {
        return Err(Error::MissingFile(manifest_path.to_path_buf()));
    }
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: manifest_path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Format {
            path: manifest_path.to_path_buf(),
            reason: format!("unknown format tag {:?}", manifest.format),
        });
    }
    let blob_path = manifest_path.with_file_name(&manifest.blob);
    if !blob_path.exists() {
        return Err(Error::MissingFile(blob_path));
    }
    let blob = fs::read(&blob_path)?;
    let expected = u64::from_str_radix(&manifest.checksum, 16).map_err(|_| Error::Format {
        path: manifest_path.to_path_buf(),
        reason: format!("checksum {:?} is not 64-bit hex", manifest.checksum),
    })?;
    let actual = hash64(&blob);
    if actual != expected {
        return Err(Error::ChecksumMismatch {
            path: blob_path,
            expected,
            actual,
        });
    }

    let mut consumed = 0u64;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, ml) in manifest.layers.iter().enumerate() {
        let layer = match ml.spec {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let n_weights = out_channels * in_channels * kernel_h * kernel_w;
                let (Some(wo), Some(bo)) = (ml.weight_offset, ml.bias_offset) else {
                    return Err(Error::Format {
                        path: manifest_path.to_path_buf(),
                        reason: format!("conv layer {i} lacks blob offsets"),
                    });
                };
                let weights = read_f32s(&blob, wo, n_weights, i, "weights")?;
                let bias = read_f32s(&blob, bo, out_channels, i, "bias")?;
                consumed += 4 * (n_weights + out_channels) as u64;
                if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("weights of layer {i}")));
                }
                Layer::Conv(FilterBank {
                    out_channels,
                    in_channels,
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                    weights,
                    bias,
                })
            }
            LayerSpec::Maxpool => Layer::Maxpool,
            LayerSpec::Relu => Layer::Relu,
        };
        layers.push(layer);
    }
    if consumed != blob.len() as u64 || manifest.blob_bytes != blob.len() as u64 {
        return Err(Error::DimensionMismatch(format!(
            "manifest layers account for {consumed} bytes (header says {}), blob has {}",
            manifest.blob_bytes,
            blob.len()
        )));
    }
    PretrainedNet::new(manifest.name, manifest.input, layers)
}

fn read_f32s(blob: &[u8], offset: u64, count: usize, layer: usize, what: &str) -> Result<Vec<f64>> {
    let start = offset as usize;
    let end = start + 4 * count;
    if end > blob.len() {
        return Err(Error::DimensionMismatch(format!(
            "layer {layer} {what}: needs bytes {start}..{end}, blob has {}",
            blob.len()
        )));
    }
    Ok(blob[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}
