//! Characterization tables and FEN topology planning.
//!
//! A characterization table maps `(m, D′)` to the mean and spread of utility
//! and PSNR over random output subsets, plus per-channel measurements. The
//! planner picks `(m, D′)` from the table under privacy and cost budgets,
//! scores the channels at `m` with Fisher's criterion, prunes and samples the
//! released subset.
//!
//! Topology rule: when the PSNR budget is below the pivot (a strict privacy
//! requirement) the deepest feasible `m` is taken, otherwise the shallowest;
//! in both cases the largest feasible `D′` at that depth follows.

use std::io::Write;

use log::warn;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{fen_cost, CostReport};
use crate::data::SplitDataset;
use crate::error::{Error, Result};
use crate::eval::{evaluate_representations, EvalHyper, Evaluation};
use crate::fen::{derive_fen, FenConfig};
use crate::net::PretrainedNet;
use crate::scoring::{prune_and_select, rank_channels, score_channels, ChannelScore, Criterion, PruneDecision, ScatterWeighting};
use crate::seed::{hash_json, rng_for, sub_seed};
use crate::tensor::Tensor;

pub const DEFAULT_PIVOT_DB: f64 = 22.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub m: usize,
    pub d_prime: usize,
    pub utility_mean: f64,
    pub utility_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub macs: u64,
    pub bytes: u64,
    pub trials: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelEntry {
    pub m: usize,
    pub channel: usize,
    pub utility: f64,
    pub psnr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub net: String,
    pub net_checksum: String,
    pub dataset_id: String,
    pub seed: u64,
    pub seeds_per_cell: usize,
    pub hyper: EvalHyper,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationTable {
    pub provenance: Provenance,
    pub grid: Vec<GridEntry>,
    pub channels: Vec<ChannelEntry>,
}

impl CharacterizationTable {
    pub fn entry(&self, m: usize, d_prime: usize) -> Option<&GridEntry> {
        self.grid.iter().find(|e| e.m == m && e.d_prime == d_prime)
    }

    /// Per-channel PSNR at `m`, indexed by channel; `None` unless every
    /// channel `0..d_r` is present.
    pub fn channel_psnr(&self, m: usize, d_r: usize) -> Option<Vec<f64>> {
        let mut out = vec![f64::NAN; d_r];
        for e in self.channels.iter().filter(|e| e.m == m) {
            if e.channel < d_r {
                out[e.channel] = e.psnr;
            }
        }
        out.iter().all(|v| !v.is_nan()).then_some(out)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |u: f64, p: f64| (0.0..=1.0).contains(&u) && p >= 0.0 && p.is_finite();
        for e in &self.grid {
            if !ok(e.utility_mean, e.psnr_mean) || e.d_prime == 0 || e.m == 0 {
                return Err(Error::InvalidArgument(format!("invalid grid entry {e:?}")));
            }
        }
        for e in &self.channels {
            if !ok(e.utility, e.psnr) {
                return Err(Error::InvalidArgument(format!("invalid channel entry {e:?}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharacterizeOptions {
    pub m_list: Vec<usize>,
    pub d_list: Vec<usize>,
    pub seeds_per_cell: usize,
    /// Stages at which every channel is evaluated on its own.
    #[serde(default)]
    pub per_channel: Vec<usize>,
    pub seed: u64,
    pub hyper: EvalHyper,
}

/// Mean and sample standard deviation (0 for a single value), two-pass.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Training and test representations of the full prefix at `m`.
pub fn full_representations(net: &PretrainedNet, dataset: &SplitDataset, m: usize) -> Result<(Tensor, Tensor)> {
    let fen = derive_fen(net, &FenConfig::full(net, m)?)?;
    Ok((fen.forward(&dataset.train.images)?, fen.forward(&dataset.test.images)?))
}

/// Output subset evaluated for trial `s` of grid cell `(m, d_prime)`.
pub fn cell_subset(seed: u64, m: usize, d_r: usize, d_prime: usize, s: usize) -> Vec<usize> {
    let label = format!("grid/subset/{m}/{d_prime}");
    let mut idx = index::sample(&mut rng_for(seed, &label, s as u64), d_r, d_prime).into_vec();
    idx.sort_unstable();
    idx
}

/// Evaluation hyper-parameters for job `label`/`index`: the training seed is
/// derived from the global seed so parallel schedules give the same numbers.
pub fn job_hyper(hyper: &EvalHyper, seed: u64, label: &str, index: u64) -> EvalHyper {
    let mut h = hyper.clone();
    h.train.seed = sub_seed(seed, label, index);
    h
}

fn cell_label(m: usize, d: usize) -> String {
    format!("grid/eval/{m}/{d}")
}

pub fn characterize_grid(
    net: &PretrainedNet,
    dataset: &SplitDataset,
    opts: &CharacterizeOptions,
) -> Result<CharacterizationTable> {
    if opts.seeds_per_cell == 0 {
        return Err(Error::InvalidArgument("seeds per cell must be >= 1".into()));
    }
    let mut ms: Vec<usize> = opts.m_list.iter().chain(&opts.per_channel).copied().collect();
    ms.sort_unstable();
    ms.dedup();
    let mut grid = Vec::new();
    let mut channels = Vec::new();
    for m in ms {
        let d_r = net.channels_at(m)?;
        let (train, test) = full_representations(net, dataset, m)?;
        if opts.m_list.contains(&m) {
            let mut jobs = Vec::new();
            for &d in &opts.d_list {
                if d == 0 || d > d_r {
                    warn!("skipping cell m={m}, D'={d}: {d_r} channels available");
                    continue;
                }
                for s in 0..opts.seeds_per_cell {
                    jobs.push((d, s));
                }
            }
            let results: Vec<Evaluation> = jobs
                .par_iter()
                .map(|&(d, s)| {
                    let subset = cell_subset(opts.seed, m, d_r, d, s);
                    let hyper = job_hyper(&opts.hyper, opts.seed, &cell_label(m, d), s as u64);
                    evaluate_representations(
                        &train.select_channels(&subset)?,
                        &test.select_channels(&subset)?,
                        dataset,
                        &hyper,
                    )
                })
                .collect::<Result<_>>()?;
            for (k, chunk) in results.chunks(opts.seeds_per_cell).enumerate() {
                let d = jobs[k * opts.seeds_per_cell].0;
                let (utility_mean, utility_std) = mean_std(&chunk.iter().map(|e| e.utility).collect::<Vec<_>>());
                let (psnr_mean, psnr_std) = mean_std(&chunk.iter().map(|e| e.privacy).collect::<Vec<_>>());
                let cost = fen_cost(net, &FenConfig::with_output(net, m, &(0..d).collect::<Vec<_>>())?)?;
                grid.push(GridEntry {
                    m,
                    d_prime: d,
                    utility_mean,
                    utility_std,
                    psnr_mean,
                    psnr_std,
                    macs: cost.total_macs,
                    bytes: cost.bytes,
                    trials: chunk.len(),
                });
            }
        }
        if opts.per_channel.contains(&m) {
            channels.extend(per_channel_entries(&train, &test, dataset, m, &opts.hyper, opts.seed)?);
        }
    }
    Ok(CharacterizationTable {
        provenance: Provenance {
            net: net.name.clone(),
            net_checksum: format!("{:016x}", net.checksum()),
            dataset_id: dataset.id.clone(),
            seed: opts.seed,
            seeds_per_cell: opts.seeds_per_cell,
            hyper: opts.hyper.clone(),
        },
        grid,
        channels,
    })
}

/// Every channel at `m` released on its own.
pub fn per_channel_entries(
    train: &Tensor,
    test: &Tensor,
    dataset: &SplitDataset,
    m: usize,
    hyper: &EvalHyper,
    seed: u64,
) -> Result<Vec<ChannelEntry>> {
    (0..train.channels())
        .into_par_iter()
        .map(|j| {
            let h = job_hyper(hyper, seed, &format!("channel/eval/{m}"), j as u64);
            let ev = evaluate_representations(&train.select_channels(&[j])?, &test.select_channels(&[j])?, dataset, &h)?;
            Ok(ChannelEntry {
                m,
                channel: j,
                utility: ev.utility,
                psnr: ev.privacy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub psnr_budget_db: f64,
    #[serde(default)]
    pub mac_budget: Option<u64>,
    #[serde(default)]
    pub byte_budget: Option<u64>,
    #[serde(default = "default_pivot")]
    pub pivot_db: f64,
}

fn default_pivot() -> f64 {
    DEFAULT_PIVOT_DB
}

impl ConstraintSet {
    pub fn psnr_only(psnr_budget_db: f64) -> Self {
        ConstraintSet {
            psnr_budget_db,
            mac_budget: None,
            byte_budget: None,
            pivot_db: DEFAULT_PIVOT_DB,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.psnr_budget_db) || !positive(self.pivot_db) {
            return Err(Error::InvalidArgument("PSNR budget and pivot must be positive".into()));
        }
        if self.mac_budget == Some(0) || self.byte_budget == Some(0) {
            return Err(Error::InvalidArgument("cost budgets must be positive".into()));
        }
        Ok(())
    }

    pub fn high_privacy(&self) -> bool {
        self.psnr_budget_db < self.pivot_db
    }

    fn cost_ok(&self, macs: u64, bytes: u64) -> bool {
        self.mac_budget.is_none_or(|b| macs <= b) && self.byte_budget.is_none_or(|b| bytes <= b)
    }

    pub fn admits(&self, e: &GridEntry) -> bool {
        e.psnr_mean <= self.psnr_budget_db && self.cost_ok(e.macs, e.bytes)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub m: usize,
    pub d_prime: usize,
}

pub fn choose_topology(table: &CharacterizationTable, constraints: &ConstraintSet) -> Result<Topology> {
    constraints.validate()?;
    if table.grid.is_empty() {
        return Err(Error::InvalidArgument("characterization table has no grid entries".into()));
    }
    let feasible: Vec<&GridEntry> = table.grid.iter().filter(|e| constraints.admits(e)).collect();
    let m = if constraints.high_privacy() {
        feasible.iter().map(|e| e.m).max()
    } else {
        feasible.iter().map(|e| e.m).min()
    };
    let Some(m) = m else {
        let mut misses: Vec<&GridEntry> = table.grid.iter().collect();
        let excess = |e: &GridEntry| e.psnr_mean - constraints.psnr_budget_db;
        misses.sort_by(|a, b| excess(a).total_cmp(&excess(b)).then((a.m, a.d_prime).cmp(&(b.m, b.d_prime))));
        return Err(Error::Infeasible {
            message: format!(
                "no cell meets PSNR <= {} dB within the cost budgets",
                constraints.psnr_budget_db
            ),
            nearest: misses
                .iter()
                .take(3)
                .map(|e| {
                    format!(
                        "m={} D'={}: {:.2} dB, {} MACs, {} bytes",
                        e.m, e.d_prime, e.psnr_mean, e.macs, e.bytes
                    )
                })
                .collect(),
        });
    };
    let d_prime = feasible
        .iter()
        .filter(|e| e.m == m)
        .map(|e| e.d_prime)
        .max()
        .expect("m comes from the feasible set");
    Ok(Topology { m, d_prime })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PruneCounts {
    pub n_utility: usize,
    pub n_privacy: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOptions {
    pub prune: PruneCounts,
    #[serde(default)]
    pub d_prime_override: Option<usize>,
    pub seed: u64,
    /// Samples used for Fisher scoring (all training samples if `None`).
    #[serde(default)]
    pub lda_samples: Option<usize>,
    #[serde(default)]
    pub weighting: ScatterWeighting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub topology: Topology,
    pub decision: PruneDecision,
    pub fen_config: FenConfig,
    pub predicted: Option<GridEntry>,
    pub cost: CostReport,
    pub utility_scores: Vec<ChannelScore>,
    pub table_dataset_id: String,
}

/// Fisher scores of every channel at `m` on (a prefix of) the training split.
pub fn fisher_scores_at(
    net: &PretrainedNet,
    dataset: &SplitDataset,
    m: usize,
    samples: Option<usize>,
    weighting: ScatterWeighting,
) -> Result<Vec<ChannelScore>> {
    let train = match samples {
        Some(n) => dataset.train.truncate(n)?,
        None => dataset.train.clone(),
    };
    let reps = derive_fen(net, &FenConfig::full(net, m)?)?.forward(&train.images)?;
    score_channels(&reps, Some(&train.labels), None, Criterion::FisherLda, weighting)
}

pub fn plan(
    net: &PretrainedNet,
    dataset: Option<&SplitDataset>,
    table: &CharacterizationTable,
    constraints: &ConstraintSet,
    opts: &PlanOptions,
) -> Result<Plan> {
    let chosen = choose_topology(table, constraints)?;
    let m = chosen.m;
    let d_prime = opts.d_prime_override.unwrap_or(chosen.d_prime);
    let d_r = net.channels_at(m)?;
    if let Some(ds) = dataset {
        if ds.id != table.provenance.dataset_id {
            warn!(
                "table was built on {} but planning uses {}",
                table.provenance.dataset_id, ds.id
            );
        }
    }
    let (order, utility_scores) = if opts.prune.n_utility > 0 {
        let ds = dataset.ok_or_else(|| {
            Error::InvalidArgument("utility pruning needs a labeled dataset".into())
        })?;
        let scores = fisher_scores_at(net, ds, m, opts.lda_samples, opts.weighting)?;
        (rank_channels(&scores)?, scores)
    } else {
        ((0..d_r).collect(), Vec::new())
    };
    let psnr = if opts.prune.n_privacy > 0 {
        table.channel_psnr(m, d_r).ok_or_else(|| {
            Error::MissingCharacterization(format!("per-channel PSNR for all {d_r} channels at m={m}"))
        })?
    } else {
        Vec::new()
    };
    let decision = prune_and_select(
        &order,
        &psnr,
        opts.prune.n_utility,
        opts.prune.n_privacy,
        d_prime,
        sub_seed(opts.seed, "plan/select", 0),
    )?;
    let mut fen_config = FenConfig::with_output(net, m, &decision.selected)?;
    fen_config.seed = opts.seed;
    let cost = fen_cost(net, &fen_config)?;
    if !constraints.cost_ok(cost.total_macs, cost.bytes) {
        return Err(Error::Infeasible {
            message: format!(
                "sliced FEN needs {} MACs and {} bytes, over budget",
                cost.total_macs, cost.bytes
            ),
            nearest: Vec::new(),
        });
    }
    Ok(Plan {
        topology: Topology { m, d_prime },
        predicted: table.entry(m, d_prime).cloned(),
        decision,
        fen_config,
        cost,
        utility_scores,
        table_dataset_id: table.provenance.dataset_id.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingResult {
    pub setting: usize,
    pub name: String,
    pub utility_mean: f64,
    pub utility_std: f64,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub trials: Vec<Evaluation>,
    pub selections: Vec<Vec<usize>>,
    pub pool: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingsReport {
    pub m: usize,
    pub d_prime: usize,
    pub prune: PruneCounts,
    pub n_trials: usize,
    pub seed: u64,
    pub settings: Vec<SettingResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareOptions {
    pub m: usize,
    pub d_prime: usize,
    pub prune: PruneCounts,
    pub n_trials: usize,
    pub seed: u64,
    pub hyper: EvalHyper,
    #[serde(default)]
    pub lda_samples: Option<usize>,
}

/// Random selection without pruning, after privacy pruning, and after
/// privacy plus Fisher pruning. Trial `t` shares its training seed across
/// the three settings.
pub fn compare_settings(
    net: &PretrainedNet,
    dataset: &SplitDataset,
    privacy_psnr: &[f64],
    opts: &CompareOptions,
) -> Result<SettingsReport> {
    if opts.n_trials == 0 {
        return Err(Error::InvalidArgument("n_trials must be >= 1".into()));
    }
    let d_r = net.channels_at(opts.m)?;
    if privacy_psnr.len() != d_r {
        return Err(Error::DimensionMismatch(format!(
            "privacy table has {} channels, m={} has {d_r}",
            privacy_psnr.len(),
            opts.m
        )));
    }
    let scores = fisher_scores_at(net, dataset, opts.m, opts.lda_samples, ScatterWeighting::Unweighted)?;
    let lda_order = rank_channels(&scores)?;
    let identity: Vec<usize> = (0..d_r).collect();
    let setups = [
        ("random", &identity, PruneCounts::default()),
        ("privacy_pruning", &identity, PruneCounts { n_utility: 0, n_privacy: opts.prune.n_privacy }),
        ("lda_privacy_pruning", &lda_order, opts.prune),
    ];
    let (train, test) = full_representations(net, dataset, opts.m)?;
    let mut settings = Vec::new();
    for (k, (name, order, counts)) in setups.into_iter().enumerate() {
        let decisions: Vec<PruneDecision> = (0..opts.n_trials)
            .map(|t| {
                prune_and_select(
                    order,
                    privacy_psnr,
                    counts.n_utility,
                    counts.n_privacy,
                    opts.d_prime,
                    sub_seed(opts.seed, "compare/select", t as u64),
                )
            })
            .collect::<Result<_>>()?;
        let trials: Vec<Evaluation> = decisions
            .par_iter()
            .enumerate()
            .map(|(t, d)| {
                let hyper = job_hyper(&opts.hyper, opts.seed, "compare/eval", t as u64);
                evaluate_representations(
                    &train.select_channels(&d.selected)?,
                    &test.select_channels(&d.selected)?,
                    dataset,
                    &hyper,
                )
            })
            .collect::<Result<_>>()?;
        let (utility_mean, utility_std) = mean_std(&trials.iter().map(|e| e.utility).collect::<Vec<_>>());
        let (psnr_mean, psnr_std) = mean_std(&trials.iter().map(|e| e.privacy).collect::<Vec<_>>());
        settings.push(SettingResult {
            setting: k + 1,
            name: name.to_string(),
            utility_mean,
            utility_std,
            psnr_mean,
            psnr_std,
            trials,
            pool: decisions[0].remaining.clone(),
            selections: decisions.into_iter().map(|d| d.selected).collect(),
        });
    }
    Ok(SettingsReport {
        m: opts.m,
        d_prime: opts.d_prime,
        prune: opts.prune,
        n_trials: opts.n_trials,
        seed: opts.seed,
        settings,
    })
}

/// Metric rows by setting columns.
pub fn write_settings_csv<W: Write>(writer: W, report: &SettingsReport) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["metric".to_string()];
    header.extend(report.settings.iter().map(|s| format!("setting_{}", s.setting)));
    w.write_record(&header)?;
    let rows: [(&str, fn(&SettingResult) -> f64); 4] = [
        ("utility_mean", |s| s.utility_mean),
        ("utility_std", |s| s.utility_std),
        ("psnr_mean", |s| s.psnr_mean),
        ("psnr_std", |s| s.psnr_std),
    ];
    for (name, get) in rows {
        let mut rec = vec![name.to_string()];
        rec.extend(report.settings.iter().map(|s| format!("{:?}", get(s))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Cache key for a characterization run.
pub fn characterization_key(net: &PretrainedNet, dataset_id: &str, opts: &CharacterizeOptions) -> u64 {
    hash_json(&(net.checksum(), dataset_id, opts))
}

/// Grid in the layout of a PSNR-vs-`D′` plot: one row per `(m, D′)`.
pub fn write_grid_csv<W: Write>(writer: W, table: &CharacterizationTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["m", "d_prime", "utility_mean", "utility_std", "psnr_mean", "psnr_std", "macs", "bytes"])?;
    for e in &table.grid {
        w.write_record([
            e.m.to_string(),
            e.d_prime.to_string(),
            format!("{:?}", e.utility_mean),
            format!("{:?}", e.utility_std),
            format!("{:?}", e.psnr_mean),
            format!("{:?}", e.psnr_std),
            e.macs.to_string(),
            e.bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
