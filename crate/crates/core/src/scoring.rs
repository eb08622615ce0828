//! Output-channel scoring and pruning.
//!
//! The supervised criterion is Fisher's linear discriminant: for channel `j`
//! with flattened representations `z_i`, `J = max_p (pᵀS_b p)/(pᵀS_w p)`,
//! the largest eigenvalue of `S_w⁻¹S_b`. It is computed by factoring
//! `S_w + εI = LLᵀ` and taking the dominant eigenvalue of the symmetric PSD
//! matrix `L⁻¹S_bL⁻ᵀ`, which has the same spectrum.
//!
//! By default `S_b` sums the class-mean outer products without weighting by
//! class size; [`ScatterWeighting::ClassSize`] gives the textbook weighted
//! form.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fen::flatten_channel;
use crate::linalg::{largest_eigenvalue_psd, Cholesky, Matrix, DEFAULT_EIG_MAX_ITER, DEFAULT_EIG_TOL};
use crate::seed::rng_for;
use crate::tensor::{FilterBank, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterWeighting {
    /// `S_b = Σ_k (z̄_k − z̄)(z̄_k − z̄)ᵀ`.
    #[default]
    Unweighted,
    /// `S_b = Σ_k N_k (z̄_k − z̄)(z̄_k − z̄)ᵀ`.
    ClassSize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterPair {
    pub s_b: Matrix,
    pub s_w: Matrix,
    pub dim: usize,
    pub class_counts: Vec<usize>,
    pub n_total: usize,
}

pub fn class_scatter(
    rows: &Matrix,
    labels: &[usize],
    weighting: ScatterWeighting,
) -> Result<ScatterPair> {
    let (n, dim) = (rows.rows(), rows.cols());
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{n} rows but {} labels",
            labels.len()
        )));
    }
    let k_max = labels.iter().max().map_or(0, |&m| m + 1);
    let mut counts = vec![0usize; k_max];
    let mut class_means = Matrix::zeros(k_max, dim);
    let mut grand = vec![0.0; dim];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (d, (m, g)) in rows.row(i).iter().zip(class_means.row_mut(l).iter_mut().zip(&mut grand)) {
            *m += d;
            *g += d;
        }
    }
    let present: Vec<usize> = (0..k_max).filter(|&k| counts[k] > 0).collect();
    if present.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "Fisher scatter needs at least 2 classes, found {}",
            present.len()
        )));
    }
    for &k in &present {
        let inv = 1.0 / counts[k] as f64;
        class_means.row_mut(k).iter_mut().for_each(|v| *v *= inv);
    }
    grand.iter_mut().for_each(|v| *v /= n as f64);

    let mut s_b = Matrix::zeros(dim, dim);
    for &k in &present {
        let w = match weighting {
            ScatterWeighting::Unweighted => 1.0,
            ScatterWeighting::ClassSize => counts[k] as f64,
        };
        let diff: Vec<f64> = class_means.row(k).iter().zip(&grand).map(|(a, b)| a - b).collect();
        add_outer(&mut s_b, &diff, w);
    }

    let mut centered = Matrix::zeros(n, dim);
    for (i, &l) in labels.iter().enumerate() {
        for (c, (z, m)) in centered
            .row_mut(i)
            .iter_mut()
            .zip(rows.row(i).iter().zip(class_means.row(l)))
        {
            *c = z - m;
        }
    }
    let s_w = centered.gram();

    Ok(ScatterPair {
        s_b,
        s_w,
        dim,
        class_counts: counts,
        n_total: n,
    })
}

fn add_outer(m: &mut Matrix, v: &[f64], w: f64) {
    let n = v.len();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] += w * v[i] * v[j];
        }
    }
}

/// Scale-aware ridge: `1e-6 · trace(S_w)/dim` when there are fewer samples
/// than dimensions (`S_w` is then singular), else 0.
pub fn default_ridge(sp: &ScatterPair) -> f64 {
    if sp.n_total < sp.dim {
        1e-6 * sp.s_w.trace() / sp.dim as f64
    } else {
        0.0
    }
}

/// Largest eigenvalue of `(S_w + εI)⁻¹ S_b`; always `>= 0`.
pub fn fisher_score(sp: &ScatterPair, ridge: f64) -> Result<f64> {
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    if sp.s_b.data().iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    let mut sw = sp.s_w.clone();
    sw.add_diagonal(ridge);
    let chol = Cholesky::factor(&sw).map_err(|e| match e {
        Error::NotPositiveDefinite { pivot, value, .. } => Error::NotPositiveDefinite {
            pivot,
            value,
            hint: format!("within-class scatter is singular at ridge {ridge:e}; use a larger ridge"),
        },
        other => other,
    })?;
    let reduced = chol.whiten(&sp.s_b)?;
    let j = largest_eigenvalue_psd(&reduced, DEFAULT_EIG_TOL, DEFAULT_EIG_MAX_ITER)?;
    Ok(j.max(0.0))
}

/// [`fisher_score`] with [`default_ridge`], falling back to a ridge of
/// `1e-6 · trace(S_w)/dim` (or `1e-12` for an all-zero `S_w`) when the
/// default leaves `S_w` singular.
pub fn fisher_score_auto(sp: &ScatterPair) -> Result<f64> {
    match fisher_score(sp, default_ridge(sp)) {
        Err(Error::NotPositiveDefinite { .. }) => {
            let scale = sp.s_w.trace() / sp.dim as f64;
            let eps = if scale > 0.0 { 1e-6 * scale } else { 1e-12 };
            fisher_score(sp, eps)
        }
        other => other,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    FisherLda,
    WgtFro,
    RepMm,
    RepMs,
    RepMf,
}

impl Criterion {
    pub const ALL: [Criterion; 5] = [
        Criterion::FisherLda,
        Criterion::WgtFro,
        Criterion::RepMm,
        Criterion::RepMs,
        Criterion::RepMf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Criterion::FisherLda => "fisher_lda",
            Criterion::WgtFro => "wgt_fro",
            Criterion::RepMm => "rep_mm",
            Criterion::RepMs => "rep_ms",
            Criterion::RepMf => "rep_mf",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Criterion::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown criterion {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelScore {
    pub channel: usize,
    pub criterion: Criterion,
    pub value: f64,
}

/// Label-free channel criteria. `filter` is the channel's filter weights,
/// `rows` its flattened representations (one row per sample).
pub fn unsupervised_score(
    criterion: Criterion,
    filter: Option<&[f64]>,
    rows: Option<&Matrix>,
) -> Result<f64> {
    if criterion == Criterion::WgtFro {
        let f = filter.ok_or_else(|| Error::InvalidArgument("wgt_fro needs filter weights".into()))?;
        return Ok(f.iter().map(|v| v * v).sum::<f64>().sqrt());
    }
    let rows = rows
        .filter(|r| r.rows() > 0 && r.cols() > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("{} needs non-empty representations", criterion.as_str())))?;
    let per_sample = |i: usize| -> f64 {
        let z = rows.row(i);
        let len = z.len() as f64;
        let mean = z.iter().sum::<f64>() / len;
        match criterion {
            Criterion::RepMm => mean,
            Criterion::RepMs => (z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len).sqrt(),
            Criterion::RepMf => z.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Criterion::FisherLda | Criterion::WgtFro => unreachable!(),
        }
    };
    match criterion {
        Criterion::FisherLda => Err(Error::InvalidArgument(
            "fisher_lda is supervised; use fisher_score".into(),
        )),
        _ => Ok((0..rows.rows()).map(per_sample).sum::<f64>() / rows.rows() as f64),
    }
}

/// Scores every channel of `reps` under `criterion`.
///
/// `filters` is the bank producing `reps` (needed for `wgt_fro`), `labels`
/// are needed for `fisher_lda`. Channels are scored in parallel; the result
/// is in channel order and identical to a sequential run.
pub fn score_channels(
    reps: &Tensor,
    labels: Option<&[usize]>,
    filters: Option<&FilterBank>,
    criterion: Criterion,
    weighting: ScatterWeighting,
) -> Result<Vec<ChannelScore>> {
    if criterion == Criterion::WgtFro {
        let bank = filters.ok_or_else(|| Error::InvalidArgument("wgt_fro needs filters".into()))?;
        return (0..bank.out_channels)
            .map(|j| {
                Ok(ChannelScore {
                    channel: j,
                    criterion,
                    value: unsupervised_score(criterion, Some(bank.filter(j)), None)?,
                })
            })
            .collect();
    }
    (0..reps.channels())
        .into_par_iter()
        .map(|j| {
            let rows = flatten_channel(reps, j)?;
            let value = match criterion {
                Criterion::FisherLda => {
                    let labels = labels
                        .ok_or_else(|| Error::InvalidArgument("fisher_lda needs labels".into()))?;
                    fisher_score_auto(&class_scatter(&rows, labels, weighting)?)?
                }
                _ => unsupervised_score(criterion, None, Some(&rows))?,
            };
            Ok(ChannelScore {
                channel: j,
                criterion,
                value,
            })
        })
        .collect()
}

/// Channels ordered by ascending score, ties by ascending index.
pub fn rank_channels(scores: &[ChannelScore]) -> Result<Vec<usize>> {
    if let Some(first) = scores.first() {
        if scores.iter().any(|s| s.criterion != first.criterion) {
            return Err(Error::InvalidArgument("scores mix criteria".into()));
        }
    }
    let mut seen = BTreeSet::new();
    for s in scores {
        if !seen.insert(s.channel) {
            return Err(Error::InvalidArgument(format!("duplicate channel {}", s.channel)));
        }
        if !s.value.is_finite() {
            return Err(Error::NonFinite(format!("score of channel {}", s.channel)));
        }
    }
    let mut sorted: Vec<&ChannelScore> = scores.iter().collect();
    sorted.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.channel.cmp(&b.channel)));
    Ok(sorted.into_iter().map(|s| s.channel).collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub pruned_utility: Vec<usize>,
    pub pruned_privacy: Vec<usize>,
    pub remaining: Vec<usize>,
    pub selected: Vec<usize>,
    pub seed: u64,
}

/// Prunes the `n_prune_utility` first channels of `utility_order` (worst
/// first) and the `n_prune_privacy` channels with the highest PSNR in
/// `privacy_psnr` (indexed by channel), then samples `d_prime` channels
/// uniformly from the rest. A channel in both pruned sets is counted in the
/// utility set.
pub fn prune_and_select(
    utility_order: &[usize],
    privacy_psnr: &[f64],
    n_prune_utility: usize,
    n_prune_privacy: usize,
    d_prime: usize,
    seed: u64,
) -> Result<PruneDecision> {
    let n = utility_order.len();
    let all: BTreeSet<usize> = utility_order.iter().copied().collect();
    if all.len() != n || all.iter().next_back().is_some_and(|&m| m >= n) {
        return Err(Error::InvalidArgument(
            "utility order must be a permutation of 0..channels".into(),
        ));
    }
    if n_prune_privacy > 0 && privacy_psnr.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "privacy table has {} channels, utility order {n}",
            privacy_psnr.len()
        )));
    }
    if n_prune_utility + n_prune_privacy >= n {
        return Err(Error::InvalidArgument(format!(
            "pruning {n_prune_utility} + {n_prune_privacy} channels leaves none of {n}"
        )));
    }
    if d_prime == 0 {
        return Err(Error::InvalidArgument("D′ must be >= 1".into()));
    }
    let pruned_u: BTreeSet<usize> = utility_order[..n_prune_utility].iter().copied().collect();
    let mut by_psnr: Vec<usize> = (0..privacy_psnr.len()).collect();
    by_psnr.sort_by(|&a, &b| privacy_psnr[b].total_cmp(&privacy_psnr[a]).then(a.cmp(&b)));
    let pruned_p: BTreeSet<usize> = by_psnr
        .into_iter()
        .take(n_prune_privacy)
        .filter(|c| !pruned_u.contains(c))
        .collect();
    let remaining: Vec<usize> = all
        .iter()
        .copied()
        .filter(|c| !pruned_u.contains(c) && !pruned_p.contains(c))
        .collect();
    if d_prime > remaining.len() {
        return Err(Error::InvalidArgument(format!(
            "D′ = {d_prime} exceeds the {} channels left after pruning",
            remaining.len()
        )));
    }
    let mut rng = rng_for(seed, "prune/select", 0);
    let mut selected: Vec<usize> = index::sample(&mut rng, remaining.len(), d_prime)
        .into_iter()
        .map(|i| remaining[i])
        .collect();
    selected.sort_unstable();
    Ok(PruneDecision {
        pruned_utility: pruned_u.into_iter().collect(),
        pruned_privacy: pruned_p.into_iter().collect(),
        remaining,
        selected,
        seed,
    })
}

pub fn write_scores_csv<W: Write>(writer: W, scores: &[ChannelScore]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["channel", "criterion", "value"])?;
    for s in scores {
        w.write_record([
            s.channel.to_string(),
            s.criterion.as_str().to_string(),
            format!("{:?}", s.value),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv<R: Read>(reader: R) -> Result<Vec<ChannelScore>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        out.push(ChannelScore {
            channel: field(0)
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad channel {:?}", field(0))))?,
            criterion: Criterion::parse(field(1))?,
            value: field(2)
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad score {:?}", field(2))))?,
        });
    }
    Ok(out)
}
