//! Dense NCHW tensors and the frozen forward kernels (convolution, 2x2 max
//! pooling, ReLU).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Batch of feature maps stored row-major as `[n][c][h][w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::DimensionMismatch(format!(
                "tensor ({n}, {c}, {h}, {w}) needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("tensor data".into()));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f64) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![value; n * c * h * w],
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    /// Values per sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(n, c, y, x)]
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.data[i * len..(i + 1) * len]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Samples at `indices`, in the given order.
    pub fn select_samples(&self, indices: &[usize]) -> Result<Tensor> {
        let len = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            if i >= self.n {
                return Err(Error::InvalidArgument(format!(
                    "sample index {i} out of range for batch of {}",
                    self.n
                )));
            }
            data.extend_from_slice(self.sample(i));
        }
        Ok(Tensor {
            n: indices.len(),
            data,
            ..*self
        })
    }

    /// Keeps the listed channels of every sample.
    pub fn select_channels(&self, channels: &[usize]) -> Result<Tensor> {
        if let Some(&bad) = channels.iter().find(|&&c| c >= self.c) {
            return Err(Error::InvalidArgument(format!(
                "channel {bad} out of range for {} channels",
                self.c
            )));
        }
        let plane = self.h * self.w;
        let mut data = Vec::with_capacity(self.n * channels.len() * plane);
        for i in 0..self.n {
            for &c in channels {
                let start = self.index(i, c, 0, 0);
                data.extend_from_slice(&self.data[start..start + plane]);
            }
        }
        Ok(Tensor {
            c: channels.len(),
            data,
            ..*self
        })
    }

    /// One row per sample, each the row-major flattening of `[c][h][w]`.
    pub fn to_rows(&self) -> Matrix {
        Matrix::from_vec(self.n, self.sample_len(), self.data.clone())
            .expect("tensor length is n * sample_len")
    }

    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot concatenate zero tensors".into()))?;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if (p.c, p.h, p.w) != (first.c, first.h, first.w) {
                return Err(Error::DimensionMismatch(format!(
                    "concat of ({}, {}, {}) with ({}, {}, {})",
                    first.c, first.h, first.w, p.c, p.h, p.w
                )));
            }
            n += p.n;
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor {
            n,
            data,
            ..*first
        })
    }
}

/// Convolution filters, weights ordered `[out][in][kh][kw]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl FilterBank {
    pub fn new(
        out_channels: usize,
        in_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let bank = FilterBank {
            out_channels,
            in_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            weights,
            bias,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        if self.kernel_h == 0 || self.kernel_w == 0 {
            return Err(Error::InvalidArgument("kernel dims must be >= 1".into()));
        }
        if self.bias.len() != self.out_channels {
            return Err(Error::DimensionMismatch(format!(
                "{} out-channels but {} biases",
                self.out_channels,
                self.bias.len()
            )));
        }
        let expected = self.out_channels * self.in_channels * self.kernel_h * self.kernel_w;
        if self.weights.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "filter bank {}x{}x{}x{} needs {expected} weights, got {}",
                self.out_channels,
                self.in_channels,
                self.kernel_h,
                self.kernel_w,
                self.weights.len()
            )));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("filter bank".into()));
        }
        Ok(())
    }

    pub fn filter_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    /// Weights of output filter `j`, `[in][kh][kw]`.
    pub fn filter(&self, j: usize) -> &[f64] {
        let len = self.filter_len();
        &self.weights[j * len..(j + 1) * len]
    }

    #[inline]
    pub fn weight(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.weights[((o * self.in_channels + i) * self.kernel_h + ky) * self.kernel_w + kx]
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Output spatial dims for an `h x w` input.
    pub fn output_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel_h || pw < self.kernel_w {
            return Err(Error::DimensionMismatch(format!(
                "padded input {ph}x{pw} smaller than kernel {}x{}",
                self.kernel_h, self.kernel_w
            )));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Keeps output filters `rows` and, inside each, input slices `cols`.
    pub fn slice(&self, rows: &[usize], cols: &[usize]) -> Result<FilterBank> {
        if let Some(&bad) = rows.iter().find(|&&r| r >= self.out_channels) {
            return Err(Error::InvalidArgument(format!(
                "output channel {bad} out of range for {} filters",
                self.out_channels
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= self.in_channels) {
            return Err(Error::InvalidArgument(format!(
                "input channel {bad} out of range for {} input channels",
                self.in_channels
            )));
        }
        let plane = self.kernel_h * self.kernel_w;
        let mut weights = Vec::with_capacity(rows.len() * cols.len() * plane);
        for &o in rows {
            for &i in cols {
                let start = (o * self.in_channels + i) * plane;
                weights.extend_from_slice(&self.weights[start..start + plane]);
            }
        }
        Ok(FilterBank {
            out_channels: rows.len(),
            in_channels: cols.len(),
            weights,
            bias: rows.iter().map(|&o| self.bias[o]).collect(),
            ..*self
        })
    }
}

/// Direct convolution with symmetric zero padding.
///
/// Samples are processed in parallel; every output element is accumulated in
/// the same fixed order regardless of scheduling.
pub fn conv2d(input: &Tensor, filters: &FilterBank) -> Result<Tensor> {
    filters.validate()?;
    if input.c != filters.in_channels {
        return Err(Error::DimensionMismatch(format!(
            "input has {} channels, filters expect {}",
            input.c, filters.in_channels
        )));
    }
    if !input.is_finite() {
        return Err(Error::NonFinite("conv2d input".into()));
    }
    let (oh, ow) = filters.output_dims(input.h, input.w)?;
    let mut out = Tensor::zeros(input.n, filters.out_channels, oh, ow);
    let out_len = out.sample_len();
    if out_len == 0 {
        return Ok(out);
    }
    out.data
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(i, dst)| conv_sample(input.sample(i), input.h, input.w, filters, oh, ow, dst));
    Ok(out)
}

fn conv_sample(
    src: &[f64],
    h: usize,
    w: usize,
    f: &FilterBank,
    oh: usize,
    ow: usize,
    dst: &mut [f64],
) {
    let pad = f.padding as isize;
    for o in 0..f.out_channels {
        let filter = f.filter(o);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = f.bias[o];
                let y0 = (oy * f.stride) as isize - pad;
                let x0 = (ox * f.stride) as isize - pad;
                for ic in 0..f.in_channels {
                    let plane = &src[ic * h * w..(ic + 1) * h * w];
                    let kplane = &filter[ic * f.kernel_h * f.kernel_w..];
                    for ky in 0..f.kernel_h {
                        let y = y0 + ky as isize;
                        if y < 0 || y >= h as isize {
                            continue;
                        }
                        let row = &plane[y as usize * w..(y as usize + 1) * w];
                        for kx in 0..f.kernel_w {
                            let x = x0 + kx as isize;
                            if x < 0 || x >= w as isize {
                                continue;
                            }
                            acc += kplane[ky * f.kernel_w + kx] * row[x as usize];
                        }
                    }
                }
                dst[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
}

/// Non-overlapping 2x2 max pooling. Spatial dims must be even.
pub fn maxpool2x2(input: &Tensor) -> Result<Tensor> {
    if input.h % 2 != 0 || input.w % 2 != 0 {
        return Err(Error::DimensionMismatch(format!(
            "maxpool2x2 needs even spatial dims, got {}x{}",
            input.h, input.w
        )));
    }
    let (oh, ow) = (input.h / 2, input.w / 2);
    let mut out = Tensor::zeros(input.n, input.c, oh, ow);
    for i in 0..input.n {
        for c in 0..input.c {
            for y in 0..oh {
                for x in 0..ow {
                    let m = input
                        .get(i, c, 2 * y, 2 * x)
                        .max(input.get(i, c, 2 * y, 2 * x + 1))
                        .max(input.get(i, c, 2 * y + 1, 2 * x))
                        .max(input.get(i, c, 2 * y + 1, 2 * x + 1));
                    let idx = out.index(i, c, y, x);
                    out.data[idx] = m;
                }
            }
        }
    }
    Ok(out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}
