use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fenkit::cost::{fen_cost, profile_latency, write_cost_csv};
use fenkit::data::{DatasetSource, SplitDataset, SyntheticSpec};
use fenkit::eval::{EvalHyper, TrainHyper};
use fenkit::fen::{derive_fen, FenConfig, FenLayer};
use fenkit::net::{load_netspec, save_netspec, PretrainedNet};
use fenkit::planner::{
    characterization_key, characterize_grid, compare_settings, full_representations, per_channel_entries, plan,
    write_grid_csv, write_settings_csv, CharacterizationTable, CharacterizeOptions, CompareOptions, ConstraintSet,
    PlanOptions, PruneCounts,
};
use fenkit::repr::write_representations;
use fenkit::scoring::{prune_and_select, rank_channels, score_channels, write_scores_csv, Criterion, ScatterWeighting};
use fenkit::{zoo, Error};
use log::{info, warn};
use serde::Serialize;

mod manifest;

use manifest::{manifest_path, RunRecorder};

pub const CACHE_ENV: &str = "FENKIT_CACHE_DIR";

#[derive(Parser)]
#[command(name = "fenkit", version, about = "Derive, characterize and plan feature-extraction networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one of the built-in toy networks as a netspec.
    MakeToyNet(MakeToyNetArgs),
    /// Write a synthetic dataset descriptor.
    MakeDataset(MakeDatasetArgs),
    /// Per-layer MACs, parameters, storage and latency for each prefix.
    Profile(ProfileArgs),
    /// Build a characterization table over (m, D') and per channel.
    Characterize(CharacterizeArgs),
    /// Score the output channels at one stage.
    Score(ScoreArgs),
    /// Choose a topology and channel subset under budgets.
    Plan(PlanArgs),
    /// Run a FEN over a dataset split and write the representations.
    Extract(ExtractArgs),
    /// Compare random selection with and without supervised pruning.
    CompareSettings(CompareArgs),
}

/// Integer list given as `a-b` or `a,b,c`.
#[derive(Clone, Serialize)]
#[serde(transparent)]
struct IntList(Vec<usize>);

fn parse_list(s: &str) -> Result<IntList, String> {
    parse_ints(s).map(IntList)
}

fn parse_ints(s: &str) -> Result<Vec<usize>, String> {
    if let Some((a, b)) = s.split_once('-') {
        let (a, b): (usize, usize) = (
            a.trim().parse().map_err(|_| format!("bad range start {a:?}"))?,
            b.trim().parse().map_err(|_| format!("bad range end {b:?}"))?,
        );
        if a > b {
            return Err(format!("empty range {s}"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| format!("bad integer {v:?}")))
        .collect()
}

#[derive(Args, Serialize, Clone)]
struct EvalArgs {
    /// Classifier training epochs.
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    /// Classifier learning rate.
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
    /// Classifier mini-batch size.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    /// Width of an optional classifier hidden layer.
    #[arg(long)]
    hidden: Option<usize>,
    /// Ridge penalty of the reconstructor.
    #[arg(long, default_value_t = 1e-3)]
    lambda: f64,
    /// PSNR reported for a perfect reconstruction.
    #[arg(long, default_value_t = fenkit::eval::DEFAULT_PSNR_CAP)]
    psnr_cap: f64,
    /// Pixel peak value.
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

impl EvalArgs {
    fn hyper(&self) -> EvalHyper {
        EvalHyper {
            train: TrainHyper {
                epochs: self.epochs,
                rate: self.rate,
                batch: self.batch_size,
                seed: 0,
                hidden: self.hidden,
            },
            lambda: self.lambda,
            psnr_cap: self.psnr_cap,
            peak: self.peak,
        }
    }
}

#[derive(Args, Serialize)]
struct MakeToyNetArgs {
    #[arg(long, value_parser = zoo::NAMES.to_vec())]
    name: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Manifest path; weights go to the sibling `<stem>.bin`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum Preset {
    Blobs,
    Planted,
}

#[derive(Args, Serialize)]
struct MakeDatasetArgs {
    #[arg(long, value_enum)]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ProfileArgs {
    #[arg(long)]
    netspec: PathBuf,
    /// Stages to profile, `a-b` or a comma list (default: all).
    #[arg(long, value_parser = parse_list)]
    m_range: Option<IntList>,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Timed repetitions; 0 skips timing.
    #[arg(long, default_value_t = 5)]
    reps: usize,
    /// Let the timed forward pass use all threads.
    #[arg(long)]
    threaded: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also write the reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct CharacterizeArgs {
    #[arg(long)]
    netspec: PathBuf,
    /// Dataset descriptor JSON.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_parser = parse_list)]
    m_list: IntList,
    #[arg(long, value_parser = parse_list)]
    d_list: IntList,
    /// Random subsets per (m, D') cell.
    #[arg(long, default_value_t = 1)]
    seeds: usize,
    /// Also evaluate every channel on its own at each m.
    #[arg(long)]
    per_channel: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    eval: EvalArgs,
    #[arg(long)]
    out: PathBuf,
    /// Also write the grid as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Cache directory (default: $FENKIT_CACHE_DIR, no cache if unset).
    #[arg(long)]
    cache_dir: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ScoreArgs {
    #[arg(long)]
    netspec: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    m: usize,
    #[arg(long, default_value = "fisher_lda", value_parser = ["fisher_lda", "wgt_fro", "rep_mm", "rep_ms", "rep_mf"])]
    criterion: String,
    /// Training samples used for scoring (default: all).
    #[arg(long)]
    samples: Option<usize>,
    /// Weight the between-class scatter by class size.
    #[arg(long)]
    weighted: bool,
    #[arg(long)]
    out: PathBuf,
    /// Also prune and select, writing the decision JSON here.
    #[arg(long)]
    decision: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    prune_utility: usize,
    #[arg(long, default_value_t = 0)]
    prune_privacy: usize,
    /// Table with per-channel PSNR (needed for privacy pruning).
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    d_prime: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize)]
struct PlanArgs {
    #[arg(long)]
    netspec: PathBuf,
    #[arg(long)]
    table: PathBuf,
    /// JSON with psnr_budget_db and optional mac_budget, byte_budget, pivot_db.
    #[arg(long)]
    constraints: PathBuf,
    /// Dataset descriptor, needed for utility pruning.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    prune_utility: usize,
    #[arg(long, default_value_t = 0)]
    prune_privacy: usize,
    /// Released channel count instead of the table's choice.
    #[arg(long)]
    d_prime: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lda_samples: Option<usize>,
    #[arg(long)]
    weighted: bool,
    /// Measure missing per-channel PSNR instead of failing.
    #[arg(long)]
    characterize_on_miss: bool,
    #[command(flatten)]
    eval: EvalArgs,
    /// Output directory for plan.json, fen_config.json and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
enum Split {
    Train,
    Test,
}

#[derive(Args, Serialize)]
struct ExtractArgs {
    #[arg(long)]
    netspec: PathBuf,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct CompareArgs {
    #[arg(long)]
    netspec: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    /// Table with per-channel PSNR at m (measured if absent).
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    d_prime: usize,
    #[arg(long, default_value_t = 0)]
    prune_utility: usize,
    #[arg(long, default_value_t = 0)]
    prune_privacy: usize,
    #[arg(long, default_value_t = 20)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    lda_samples: Option<usize>,
    #[command(flatten)]
    eval: EvalArgs,
    /// Settings table as CSV.
    #[arg(long)]
    out: PathBuf,
    /// Full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()).into());
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        }
        .into()
    })
}

fn load_net(path: &Path, rec: &mut RunRecorder) -> Result<PretrainedNet> {
    let net = load_netspec(path)?;
    rec.input(path)?;
    Ok(net)
}

fn load_dataset(path: &Path, rec: &mut RunRecorder) -> Result<SplitDataset> {
    let ds = DatasetSource::from_file(path)?.load()?;
    rec.input(path)?;
    Ok(ds)
}

fn make_toy_net(a: &MakeToyNetArgs) -> Result<()> {
    let rec = RunRecorder::start("make-toy-net", a, vec![a.seed]);
    let net = zoo::by_name(&a.name, a.seed).expect("validated by clap");
    save_netspec(&net, &a.out)?;
    let blob = a.out.with_extension("bin");
    rec.finish(&[&a.out, &blob], &manifest_path(&a.out))
}

fn make_dataset(a: &MakeDatasetArgs) -> Result<()> {
    let rec = RunRecorder::start("make-dataset", a, vec![a.seed]);
    let mut spec = match a.preset {
        Preset::Blobs => SyntheticSpec::blobs(a.seed),
        Preset::Planted => SyntheticSpec::planted(a.seed),
    };
    spec.n_train = a.n_train.unwrap_or(spec.n_train);
    spec.n_test = a.n_test.unwrap_or(spec.n_test);
    spec.validate()?;
    write_json(&a.out, &DatasetSource::Synthetic(spec))?;
    rec.finish(&[&a.out], &manifest_path(&a.out))
}

fn profile(a: &ProfileArgs) -> Result<()> {
    let mut rec = RunRecorder::start("profile", a, vec![]);
    let net = load_net(&a.netspec, &mut rec)?;
    let ms = a.m_range.clone().map(|l| l.0).unwrap_or_else(|| (1..=net.stage_count()).collect());
    let mut reports = Vec::new();
    for m in ms {
        let cfg = match FenConfig::full(&net, m) {
            Ok(c) => c,
            Err(Error::InvalidArgument(msg)) => {
                warn!("skipping m={m}: {msg}");
                continue;
            }
            Err(e) => return Err(e.into()),
        };
        let mut report = fen_cost(&net, &cfg)?;
        if a.reps > 0 {
            let fen = derive_fen(&net, &cfg)?;
            report.latency = Some(profile_latency(&fen, a.batch, a.reps, a.threaded)?);
        }
        reports.push(report);
    }
    let mut buf = Vec::new();
    write_cost_csv(&mut buf, &reports)?;
    fs::write(&a.out, buf)?;
    let mut outs = vec![a.out.as_path()];
    if let Some(j) = &a.json {
        write_json(j, &reports)?;
        outs.push(j);
    }
    rec.finish(&outs, &manifest_path(&a.out))
}

fn characterize(a: &CharacterizeArgs) -> Result<()> {
    let mut rec = RunRecorder::start("characterize", a, vec![a.seed]);
    let net = load_net(&a.netspec, &mut rec)?;
    let ds = load_dataset(&a.dataset, &mut rec)?;
    let opts = CharacterizeOptions {
        m_list: a.m_list.0.clone(),
        d_list: a.d_list.0.clone(),
        seeds_per_cell: a.seeds,
        per_channel: if a.per_channel { a.m_list.0.clone() } else { Vec::new() },
        seed: a.seed,
        hyper: a.eval.hyper(),
    };
    let cache_dir = a.cache_dir.clone().or_else(|| std::env::var_os(CACHE_ENV).map(PathBuf::from));
    let key = characterization_key(&net, &ds.id, &opts);
    let cached = cache_dir.as_ref().map(|d| d.join(format!("characterize-{key:016x}.json")));
    let table: CharacterizationTable = match cached.as_ref().filter(|p| p.exists()) {
        Some(p) => {
            info!("cache hit {}", p.display());
            let t: CharacterizationTable = read_json(p)?;
            t.validate()?;
            t
        }
        None => {
            let t = characterize_grid(&net, &ds, &opts)?;
            if let Some(p) = &cached {
                fs::create_dir_all(p.parent().expect("cache file has a parent"))?;
                write_json(p, &t)?;
            }
            t
        }
    };
    if table.grid.is_empty() {
        warn!("no feasible (m, D') cell was evaluated");
    }
    write_json(&a.out, &table)?;
    let mut outs = vec![a.out.as_path()];
    if let Some(c) = &a.csv {
        let mut buf = Vec::new();
        write_grid_csv(&mut buf, &table)?;
        fs::write(c, buf)?;
        outs.push(c);
    }
    rec.finish(&outs, &manifest_path(&a.out))
}

fn score(a: &ScoreArgs) -> Result<()> {
    let mut rec = RunRecorder::start("score", a, vec![a.seed]);
    let net = load_net(&a.netspec, &mut rec)?;
    let ds = load_dataset(&a.dataset, &mut rec)?;
    let criterion = Criterion::parse(&a.criterion)?;
    let train = match a.samples {
        Some(n) => ds.train.truncate(n)?,
        None => ds.train.clone(),
    };
    let fen = derive_fen(&net, &FenConfig::full(&net, a.m)?)?;
    let bank = fen.layers.iter().rev().find_map(|l| match l {
        FenLayer::Conv(b) => Some(b),
        _ => None,
    });
    let reps = fen.forward(&train.images)?;
    let weighting = if a.weighted { ScatterWeighting::ClassSize } else { ScatterWeighting::Unweighted };
    let scores = score_channels(&reps, Some(&train.labels), bank, criterion, weighting)?;
    let mut buf = Vec::new();
    write_scores_csv(&mut buf, &scores)?;
    fs::write(&a.out, buf)?;
    let mut outs = vec![a.out.as_path()];
    if let Some(path) = &a.decision {
        let d_r = reps.channels();
        let psnr = match &a.table {
            Some(t) => {
                rec.input(t)?;
                let table: CharacterizationTable = read_json(t)?;
                table.channel_psnr(a.m, d_r).unwrap_or_default()
            }
            None => Vec::new(),
        };
        if a.prune_privacy > 0 && psnr.is_empty() {
            return Err(Error::MissingCharacterization(format!("per-channel PSNR at m={}", a.m)).into());
        }
        let d_prime = a.d_prime.unwrap_or(d_r - a.prune_utility - a.prune_privacy.min(d_r));
        let decision = prune_and_select(&rank_channels(&scores)?, &psnr, a.prune_utility, a.prune_privacy, d_prime, a.seed)?;
        write_json(path, &decision)?;
        outs.push(path);
    }
    rec.finish(&outs, &manifest_path(&a.out))
}

fn run_plan(a: &PlanArgs) -> Result<()> {
    let mut rec = RunRecorder::start("plan", a, vec![a.seed]);
    let net = load_net(&a.netspec, &mut rec)?;
    let mut table: CharacterizationTable = read_json(&a.table)?;
    rec.input(&a.table)?;
    table.validate()?;
    let constraints: ConstraintSet = read_json(&a.constraints)?;
    rec.input(&a.constraints)?;
    let ds = a.dataset.as_ref().map(|p| load_dataset(p, &mut rec)).transpose()?;
    let opts = PlanOptions {
        prune: PruneCounts {
            n_utility: a.prune_utility,
            n_privacy: a.prune_privacy,
        },
        d_prime_override: a.d_prime,
        seed: a.seed,
        lda_samples: a.lda_samples,
        weighting: if a.weighted { ScatterWeighting::ClassSize } else { ScatterWeighting::Unweighted },
    };
    let result = match plan(&net, ds.as_ref(), &table, &constraints, &opts) {
        Err(Error::MissingCharacterization(what)) if a.characterize_on_miss => {
            let ds = ds.as_ref().context("--characterize-on-miss needs --dataset")?;
            let m = fenkit::planner::choose_topology(&table, &constraints)?.m;
            warn!("measuring missing {what}");
            let (train, test) = full_representations(&net, ds, m)?;
            let hyper = a.eval.hyper();
            table.channels.retain(|e| e.m != m);
            table.channels.extend(per_channel_entries(&train, &test, ds, m, &hyper, a.seed)?);
            plan(&net, Some(ds), &table, &constraints, &opts)
        }
        other => other,
    };
    let p = result?;
    fs::create_dir_all(&a.out)?;
    let plan_path = a.out.join("plan.json");
    let cfg_path = a.out.join("fen_config.json");
    write_json(&plan_path, &p)?;
    write_json(&cfg_path, &p.fen_config)?;
    println!(
        "m={} D'={} channels {:?} ({} MACs, {} bytes)",
        p.topology.m, p.topology.d_prime, p.decision.selected, p.cost.total_macs, p.cost.bytes
    );
    rec.finish(&[&plan_path, &cfg_path], &a.out.join("manifest.json"))
}

fn extract(a: &ExtractArgs) -> Result<()> {
    let mut rec = RunRecorder::start("extract", a, vec![]);
    let net = load_net(&a.netspec, &mut rec)?;
    let cfg: FenConfig = read_json(&a.config)?;
    rec.input(&a.config)?;
    let ds = load_dataset(&a.dataset, &mut rec)?;
    let fen = derive_fen(&net, &cfg)?;
    let split = match a.split {
        Split::Train => &ds.train,
        Split::Test => &ds.test,
    };
    let reps = if split.is_empty() {
        let (c, h, w) = fen.output_dims(net.input.height, net.input.width)?;
        fenkit::tensor::Tensor::zeros(0, c, h, w)
    } else {
        fen.forward(&split.images)?
    };
    let sidecar = write_representations(&a.out, &reps, &split.labels, cfg.config_hash(&net))?;
    rec.finish(&[&a.out, &sidecar], &manifest_path(&a.out))
}

fn compare(a: &CompareArgs) -> Result<()> {
    let mut rec = RunRecorder::start("compare-settings", a, vec![a.seed]);
    let net = load_net(&a.netspec, &mut rec)?;
    let ds = load_dataset(&a.dataset, &mut rec)?;
    let hyper = a.eval.hyper();
    let d_r = net.channels_at(a.m)?;
    let from_table = match &a.table {
        Some(t) => {
            rec.input(t)?;
            read_json::<CharacterizationTable>(t)?.channel_psnr(a.m, d_r)
        }
        None => None,
    };
    let psnr = match from_table {
        Some(p) => p,
        None => {
            warn!("no per-channel PSNR at m={} in a table; measuring it", a.m);
            let (train, test) = full_representations(&net, &ds, a.m)?;
            per_channel_entries(&train, &test, &ds, a.m, &hyper, a.seed)?
                .into_iter()
                .map(|e| e.psnr)
                .collect()
        }
    };
    let opts = CompareOptions {
        m: a.m,
        d_prime: a.d_prime,
        prune: PruneCounts {
            n_utility: a.prune_utility,
            n_privacy: a.prune_privacy,
        },
        n_trials: a.trials,
        seed: a.seed,
        hyper,
        lda_samples: a.lda_samples,
    };
    let report = compare_settings(&net, &ds, &psnr, &opts)?;
    let mut buf = Vec::new();
    write_settings_csv(&mut buf, &report)?;
    fs::write(&a.out, buf)?;
    let mut outs = vec![a.out.as_path()];
    if let Some(j) = &a.json {
        write_json(j, &report)?;
        outs.push(j);
    }
    rec.finish(&outs, &manifest_path(&a.out))
}

/// 2 for an infeasible budget, 3 for numerical failure, 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Infeasible { .. }) => 2,
        Some(e) if e.is_numeric() => 3,
        _ => 1,
    }
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeToyNet(a) => make_toy_net(a),
        Command::MakeDataset(a) => make_dataset(a),
        Command::Profile(a) => profile(a),
        Command::Characterize(a) => {
            if a.m_list.0.is_empty() || a.d_list.0.is_empty() {
                bail!("--m-list and --d-list must not be empty");
            }
            characterize(a)
        }
        Command::Score(a) => score(a),
        Command::Plan(a) => run_plan(a),
        Command::Extract(a) => extract(a),
        Command::CompareSettings(a) => compare(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(Error::Infeasible { nearest, .. }) = e.downcast_ref::<Error>() {
                for n in nearest {
                    eprintln!("  nearest miss: {n}");
                }
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
