//! Compute, storage and latency costs of a FEN.
//!
//! MACs count one multiply-accumulate per kernel tap; bias adds, relu and
//! pooling are free. Storage is 4 bytes per parameter (weights and biases);
//! activations are not counted.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fen::{derive_fen, Fen, FenConfig, FenLayer};
use crate::net::{LayerSpec, PretrainedNet};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const BYTES_PER_PARAM: u64 = 4;

/// Output `(channels, height, width)` of `spec` applied to `input`.
pub fn layer_output(spec: &LayerSpec, input: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input;
    match *spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
        } => {
            if c != in_channels {
                return Err(Error::DimensionMismatch(format!(
                    "conv expects {in_channels} input channels, got {c}"
                )));
            }
            let (ph, pw) = (h + 2 * padding, w + 2 * padding);
            if stride == 0 || kernel_h == 0 || kernel_w == 0 || kernel_h > ph || kernel_w > pw {
                return Err(Error::DimensionMismatch(format!(
                    "{kernel_h}x{kernel_w} kernel (stride {stride}) on padded {ph}x{pw} input"
                )));
            }
            Ok((out_channels, (ph - kernel_h) / stride + 1, (pw - kernel_w) / stride + 1))
        }
        LayerSpec::Maxpool => {
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::DimensionMismatch(format!("maxpool on odd dims {h}x{w}")));
            }
            Ok((c, h / 2, w / 2))
        }
        LayerSpec::Relu => Ok(input),
    }
}

/// `out_h · out_w · K_h · K_w · D_in · D_out` for a conv layer, 0 otherwise.
pub fn conv_macs(spec: &LayerSpec, input: (usize, usize, usize)) -> Result<u64> {
    let (_, oh, ow) = layer_output(spec, input)?;
    Ok(match *spec {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => (oh * ow * kernel_h * kernel_w * in_channels * out_channels) as u64,
        _ => 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub layer: usize,
    pub kind: String,
    pub output: (usize, usize, usize),
    pub macs: u64,
    pub params: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub batch: usize,
    pub reps: usize,
    /// Whole-forward ms per image.
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub layer_median_ms: Vec<f64>,
    pub layer_iqr_ms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub source: String,
    pub m: usize,
    pub d_prime: usize,
    pub config_hash: String,
    pub layers: Vec<LayerCost>,
    pub total_macs: u64,
    pub params: u64,
    pub bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyStats>,
}

/// Per-layer costs of an already derived FEN.
pub fn fen_layer_costs(fen: &Fen) -> Result<Vec<LayerCost>> {
    let mut dims = (fen.input.channels, fen.input.height, fen.input.width);
    let mut out = Vec::with_capacity(fen.layers.len());
    for (i, layer) in fen.layers.iter().enumerate() {
        let (spec, params) = match layer {
            FenLayer::Conv(b) => (LayerSpec::of(b), b.param_count() as u64),
            FenLayer::Maxpool => (LayerSpec::Maxpool, 0),
            FenLayer::Relu => (LayerSpec::Relu, 0),
        };
        let macs = conv_macs(&spec, dims)?;
        dims = layer_output(&spec, dims)?;
        out.push(LayerCost {
            layer: i,
            kind: spec.name().to_string(),
            output: dims,
            macs,
            params,
            bytes: params * BYTES_PER_PARAM,
        });
    }
    Ok(out)
}

/// Costs of the sliced prefix described by `cfg`.
pub fn fen_cost(net: &PretrainedNet, cfg: &FenConfig) -> Result<CostReport> {
    let fen = derive_fen(net, cfg)?;
    let layers = fen_layer_costs(&fen)?;
    Ok(CostReport {
        source: net.name.clone(),
        m: cfg.m,
        d_prime: cfg.d_prime(),
        config_hash: format!("{:016x}", cfg.config_hash(net)),
        total_macs: layers.iter().map(|l| l.macs).sum(),
        params: layers.iter().map(|l| l.params).sum(),
        bytes: layers.iter().map(|l| l.bytes).sum(),
        layers,
        latency: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdaOverheadParams {
    pub n_lda: u64,
    pub w_out: u64,
    pub h_out: u64,
    pub w_k: u64,
    pub h_k: u64,
    pub d_f: u64,
    pub d_r: u64,
    pub d_prime: u64,
    pub classes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LdaOverhead {
    pub extra_forward: f64,
    pub scatter: f64,
    pub eigensolve: f64,
    pub total: f64,
}

/// Operation counts of supervised channel scoring with unit constants:
/// computing the `D_r − D′` extra channels, accumulating the scatter
/// matrices, and the `(W′H′)³` eigensolve. Order-of-magnitude estimates.
pub fn lda_overhead(p: &LdaOverheadParams) -> Result<LdaOverhead> {
    let all = [p.n_lda, p.w_out, p.h_out, p.w_k, p.h_k, p.d_f, p.d_r, p.d_prime, p.classes];
    if all.contains(&0) || p.d_prime > p.d_r {
        return Err(Error::InvalidArgument(format!(
            "overhead parameters must be positive with D′ <= D_r: {p:?}"
        )));
    }
    let f = |v: u64| v as f64;
    let area = f(p.w_out) * f(p.h_out);
    let extra_forward = f(p.n_lda) * area * f(p.w_k) * f(p.h_k) * f(p.d_f) * f(p.d_r - p.d_prime);
    let scatter = f(p.classes + p.n_lda) * area * area;
    let eigensolve = area * area * area;
    Ok(LdaOverhead {
        extra_forward,
        scatter,
        eigensolve,
        total: extra_forward + scatter + eigensolve,
    })
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Median and interquartile range (linear interpolation between order
/// statistics).
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    (quantile(&s, 0.5), quantile(&s, 0.75) - quantile(&s, 0.25))
}

/// Wall-clock forward time per image over `reps` timed passes after one
/// warm-up pass. Runs on a single thread unless `threaded`.
pub fn profile_latency(fen: &Fen, batch: usize, reps: usize, threaded: bool) -> Result<LatencyStats> {
    if batch == 0 || reps == 0 {
        return Err(Error::InvalidArgument("batch and reps must be >= 1".into()));
    }
    let (c, h, w) = (fen.input.channels, fen.input.height, fen.input.width);
    let mut rng = rng_for(0, "profile/input", 0);
    let input = Tensor::from_vec(
        batch,
        c,
        h,
        w,
        (0..batch * c * h * w).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect(),
    )?;
    let run = || -> Result<LatencyStats> {
        fen.forward(&input)?;
        let mut totals = Vec::with_capacity(reps);
        let mut per_layer = vec![Vec::with_capacity(reps); fen.layers.len()];
        for _ in 0..reps {
            let start = Instant::now();
            let mut last = start;
            fen.forward_layers(&input, |i, _| {
                let now = Instant::now();
                per_layer[i].push((now - last).as_secs_f64() * 1e3 / batch as f64);
                last = now;
            })?;
            totals.push(start.elapsed().as_secs_f64() * 1e3 / batch as f64);
        }
        let (median_ms, iqr_ms) = median_iqr(&totals);
        let (layer_median_ms, layer_iqr_ms) = per_layer.iter().map(|t| median_iqr(t)).unzip();
        Ok(LatencyStats {
            batch,
            reps,
            median_ms,
            iqr_ms,
            layer_median_ms,
            layer_iqr_ms,
        })
    };
    if threaded {
        run()
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?
            .install(run)
    }
}

/// One row per layer with cumulative MACs, then a totals row.
pub fn write_cost_csv<W: Write>(writer: W, reports: &[CostReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "m", "layer", "kind", "macs", "params", "bytes", "cumulative_macs", "ms_median", "ms_iqr",
    ])?;
    for r in reports {
        let mut cum = 0;
        let lat = r.latency.as_ref();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        for l in &r.layers {
            cum += l.macs;
            w.write_record([
                r.m.to_string(),
                l.layer.to_string(),
                l.kind.clone(),
                l.macs.to_string(),
                l.params.to_string(),
                l.bytes.to_string(),
                cum.to_string(),
                fmt(lat.map(|s| s.layer_median_ms[l.layer])),
                fmt(lat.map(|s| s.layer_iqr_ms[l.layer])),
            ])?;
        }
        w.write_record([
            r.m.to_string(),
            "total".into(),
            String::new(),
            r.total_macs.to_string(),
            r.params.to_string(),
            r.bytes.to_string(),
            r.total_macs.to_string(),
            fmt(lat.map(|s| s.median_ms)),
            fmt(lat.map(|s| s.iqr_ms)),
        ])?;
    }
    w.flush()?;
    Ok(())
}
