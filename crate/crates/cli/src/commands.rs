use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;
use stem_core::propagation::toy_input;
use stem_core::{
    compare_sam_oam, cost_decay, cost_report, dense_attention, dense_complexity, equal_segments,
    run_validation, save_tensor, segment_sensitivity, stem_forward, truncation_bound, PruneMode,
    Segment, SegmentBudget, ToyTransformer,
};

use crate::config::{FileConfig, RunArgs, RunConfig, SeedRange};
use crate::error::CliError;
use crate::inputs::{file_names, generate, heads};
use crate::report::{comment_line, emit, line_chart, stdout, to_json, write_file, Series};

fn reject_input(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    if cfg.input.is_some() {
        return Err(CliError::Usage(format!(
            "`{command}` draws a fresh input per seed; --input is not supported"
        )));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Write {
        path: dir.to_path_buf(),
        source,
    })
}

#[derive(Args, Debug)]
pub struct GenArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Directory for the q_h{h}/k_h{h}/v_h{h} tensor files (config key `output`)
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct HeadFiles {
    head: usize,
    seed: u64,
    q: String,
    k: String,
    v: String,
}

#[derive(Serialize)]
struct Manifest {
    n: usize,
    d: usize,
    heads: usize,
    dtype: &'static str,
    generator: crate::config::Generator,
    files: Vec<HeadFiles>,
}

pub fn gen(args: &GenArgs) -> Result<(), CliError> {
    let (cfg, file) = args.run.resolve()?;
    reject_input(&cfg, "gen")?;
    let out_dir = args
        .out_dir
        .clone()
        .or(file.output)
        .ok_or_else(|| CliError::Usage("--out-dir is required".into()))?;
    create_dir(&out_dir)?;
    let (cfg, qkv) = heads(&cfg)?;
    let mut files = Vec::new();
    for (h, head) in qkv.iter().enumerate() {
        let names = file_names(h);
        for (name, m) in names.iter().zip([&head.q, &head.k, &head.v]) {
            save_tensor(m, &out_dir.join(name))?;
        }
        let [q, k, v] = names;
        files.push(HeadFiles {
            head: h,
            seed: cfg.seed.wrapping_add(h as u64),
            q,
            k,
            v,
        });
    }
    let manifest = Manifest {
        n: cfg.n,
        d: cfg.d,
        heads: cfg.heads,
        dtype: "f32",
        generator: cfg.generator,
        files,
    };
    stdout(&format!("{}\n", to_json(&manifest)));
    Ok(())
}

#[derive(Args, Debug)]
pub struct RunCmdArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Write each head's sparse output as o_h{h}.stt into this directory (config key `output`)
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
}

#[derive(Serialize)]
struct HeadRun {
    head: usize,
    realized_budget_fraction: f64,
    realized_budget_blocks: usize,
    admissible_blocks: usize,
    k_avg: f64,
    estimated_flops: f64,
    dense_flops: f64,
    mse_vs_dense: f64,
    max_abs_vs_dense: f64,
    guard_overage: usize,
}

#[derive(Serialize)]
struct RunSummary {
    config: RunConfig,
    block_budgets: Vec<usize>,
    heads: Vec<HeadRun>,
    mean_mse_vs_dense: f64,
    realized_budget_fraction: f64,
    estimated_flops: f64,
}

pub fn run(args: &RunCmdArgs) -> Result<(), CliError> {
    let (cfg, file) = args.run.resolve()?;
    let out_dir = args.out_dir.clone().or(file.output);
    let (cfg, qkv) = heads(&cfg)?;
    let sched = cfg.schedule()?;
    let metric = cfg.metric()?;
    let results = qkv
        .par_iter()
        .map(|h| {
            let (o, stats) = stem_forward(&h.q, &h.k, &h.v, &sched, &metric)?;
            let (dense, _) = dense_attention(&h.q, &h.k, &h.v)?;
            Ok((o.mse(&dense)?, o.max_abs_diff(&dense)?, o, stats))
        })
        .collect::<Result<Vec<_>, stem_core::StemError>>()?;
    if let Some(dir) = &out_dir {
        create_dir(dir)?;
        for (h, (_, _, o, _)) in results.iter().enumerate() {
            save_tensor(o, &dir.join(format!("o_h{h}.stt")))?;
        }
    }
    let heads: Vec<HeadRun> = results
        .into_iter()
        .enumerate()
        .map(|(head, (mse, max_abs, _, s))| HeadRun {
            head,
            realized_budget_fraction: s.realized_budget_fraction,
            realized_budget_blocks: s.realized_budget_blocks,
            admissible_blocks: s.admissible_blocks,
            k_avg: s.k_avg,
            estimated_flops: s.estimated_flops,
            dense_flops: dense_complexity(cfg.n, cfg.d),
            mse_vs_dense: mse,
            max_abs_vs_dense: max_abs,
            guard_overage: s.guard_overage,
        })
        .collect();
    let count = heads.len() as f64;
    let summary = RunSummary {
        block_budgets: sched.block_budgets()?,
        mean_mse_vs_dense: heads.iter().map(|h| h.mse_vs_dense).sum::<f64>() / count,
        realized_budget_fraction: heads.iter().map(|h| h.realized_budget_fraction).sum::<f64>() / count,
        estimated_flops: heads.iter().map(|h| h.estimated_flops).sum(),
        heads,
        config: cfg,
    };
    stdout(&format!("{}\n", to_json(&summary)));
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MetricArg {
    Sam,
    Oam,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated per-row token budgets [default: 16]
    #[arg(long, value_delimiter = ',', default_value = "16")]
    pub budgets: Vec<usize>,
    /// Metrics to report [default: sam,oam]
    #[arg(long, value_enum, value_delimiter = ',', default_value = "sam,oam")]
    pub metrics: Vec<MetricArg>,
    /// Seed range, e.g. 0..20 [default: 0..20]
    #[arg(long, default_value = "0..20")]
    pub seeds: SeedRange,
    /// CSV output file [default: stdout]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Also write the summary JSON here
    #[arg(long, value_name = "PATH")]
    pub summary: Option<PathBuf>,
}

#[derive(Serialize)]
struct CompareRow {
    seed: u64,
    budget: usize,
    metric: MetricArg,
    beta: f64,
    mse_dense_sparse: f64,
    bound: f64,
}

#[derive(Serialize)]
struct CompareMean {
    budget: usize,
    metric: MetricArg,
    mean_mse: f64,
    mean_bound: f64,
}

#[derive(Serialize)]
struct CompareSummary {
    config: RunConfig,
    seeds: String,
    means: Vec<CompareMean>,
    /// `bound_oam <= bound_sam` on every (seed, budget); null unless both
    /// metrics were requested.
    oam_bound_never_worse: Option<bool>,
}

pub fn compare(args: &CompareArgs) -> Result<(), CliError> {
    let (mut cfg, _) = args.run.resolve()?;
    reject_input(&cfg, "compare")?;
    cfg.heads = 1;
    let mut budgets = args.budgets.clone();
    budgets.sort_unstable();
    budgets.dedup();
    if budgets.is_empty() || args.metrics.is_empty() {
        return Err(CliError::Usage("need at least one budget and one metric".into()));
    }
    if let Some(&b) = budgets.iter().find(|&&b| b == 0 || b > cfg.n) {
        return Err(CliError::field("budgets", &format!("{b} is outside 1..={}", cfg.n)));
    }
    let mut metrics = args.metrics.clone();
    metrics.sort_by_key(|m| *m as u8);
    metrics.dedup();
    let seeds = args.seeds.seeds();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let qkv = generate(&cfg, seed)?;
            budgets
                .iter()
                .map(|&b| Ok((seed, b, compare_sam_oam(&qkv.q, &qkv.k, &qkv.v, b, cfg.beta)?)))
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut rows = Vec::new();
    let mut never_worse = true;
    for (seed, budget, r) in per_seed.into_iter().flatten() {
        never_worse &= r.bound_oam <= r.bound_sam;
        for &metric in &metrics {
            let (mse, bound) = match metric {
                MetricArg::Sam => (r.mse_sam, r.bound_sam),
                MetricArg::Oam => (r.mse_oam, r.bound_oam),
            };
            rows.push(CompareRow {
                seed,
                budget,
                metric,
                beta: cfg.beta,
                mse_dense_sparse: mse,
                bound,
            });
        }
    }
    let mut means = Vec::new();
    for &budget in &budgets {
        for &metric in &metrics {
            let sel: Vec<&CompareRow> = rows
                .iter()
                .filter(|r| r.budget == budget && r.metric == metric)
                .collect();
            let k = sel.len() as f64;
            means.push(CompareMean {
                budget,
                metric,
                mean_mse: sel.iter().map(|r| r.mse_dense_sparse).sum::<f64>() / k,
                mean_bound: sel.iter().map(|r| r.bound).sum::<f64>() / k,
            });
        }
    }
    let summary = CompareSummary {
        config: cfg,
        seeds: args.seeds.to_string(),
        means,
        oam_bound_never_worse: (metrics.len() == 2).then_some(never_worse),
    };
    emit("compare", &rows, &summary, args.out.as_deref(), args.summary.as_deref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Mu,
    Beta,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Parameter to sweep
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated grid [default: 0.5..1.0 step 0.1 for mu, 0..0.5 step 0.1 for beta]
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Seed range [default: 0..5]
    #[arg(long, default_value = "0..5")]
    pub seeds: SeedRange,
    /// CSV output file [default: stdout]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Also write the summary JSON here
    #[arg(long, value_name = "PATH")]
    pub summary: Option<PathBuf>,
    /// Write an SVG line chart of the per-value means
    #[arg(long, value_name = "PATH")]
    pub svg: Option<PathBuf>,
}

#[derive(Serialize)]
struct SweepRow {
    seed: u64,
    param: SweepParam,
    value: f64,
    mse_dense_sparse: f64,
    bound: f64,
    realized_budget_fraction: f64,
    estimated_flops: f64,
    decay_cost: f64,
}

#[derive(Serialize)]
struct SweepMean {
    value: f64,
    mean_mse: f64,
    mean_bound: f64,
    realized_budget_fraction: f64,
    decay_cost: f64,
}

#[derive(Serialize)]
struct SweepSummary {
    config: RunConfig,
    param: SweepParam,
    seeds: String,
    means: Vec<SweepMean>,
}

fn default_grid(param: SweepParam) -> Vec<f64> {
    match param {
        SweepParam::Mu => vec![0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
        SweepParam::Beta => vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
    }
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let (mut cfg, _) = args.run.resolve()?;
    reject_input(&cfg, "sweep")?;
    cfg.heads = 1;
    let grid = args.grid.clone().unwrap_or_else(|| default_grid(args.param));
    if grid.is_empty() {
        return Err(CliError::field("grid", "must not be empty"));
    }
    for &x in &grid {
        let ok = match args.param {
            SweepParam::Mu => x > 0.0 && x <= 1.0,
            SweepParam::Beta => x.is_finite() && x >= 0.0,
        };
        if !ok {
            return Err(CliError::field(
                "grid",
                &format!("{x} is out of range for {:?}", args.param),
            ));
        }
    }
    let seeds = args.seeds.seeds();
    let per_seed = seeds
        .par_iter()
        .map(|&seed| {
            let qkv = generate(&cfg, seed)?;
            let (dense, p) = dense_attention(&qkv.q, &qkv.k, &qkv.v)?;
            grid.iter()
                .map(|&value| {
                    let (mu, beta) = match args.param {
                        SweepParam::Mu => (value, cfg.beta),
                        SweepParam::Beta => (cfg.mu, value),
                    };
                    let sched = cfg.schedule_with_mu(mu)?;
                    let mut metric = cfg.metric()?;
                    metric.beta = beta;
                    let (o, stats) = stem_forward(&qkv.q, &qkv.k, &qkv.v, &sched, &metric)?;
                    let keep = stats.selection.keep_sets(cfg.n, cfg.block_size)?;
                    let k_tokens = sched.k_start_tokens().clamp(1.0, cfg.n as f64);
                    Ok(SweepRow {
                        seed,
                        param: args.param,
                        value,
                        mse_dense_sparse: o.mse(&dense)?,
                        bound: truncation_bound(&p, &qkv.v, &keep)?,
                        realized_budget_fraction: stats.realized_budget_fraction,
                        estimated_flops: stats.estimated_flops,
                        decay_cost: cost_decay(cfg.n, k_tokens, mu)?.cost,
                    })
                })
                .collect::<Result<Vec<_>, CliError>>()
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let rows: Vec<SweepRow> = per_seed.into_iter().flatten().collect();
    let means: Vec<SweepMean> = grid
        .iter()
        .enumerate()
        .map(|(g, &value)| {
            let sel: Vec<&SweepRow> = rows.iter().skip(g).step_by(grid.len()).collect();
            let k = sel.len() as f64;
            SweepMean {
                value,
                mean_mse: sel.iter().map(|r| r.mse_dense_sparse).sum::<f64>() / k,
                mean_bound: sel.iter().map(|r| r.bound).sum::<f64>() / k,
                realized_budget_fraction: sel.iter().map(|r| r.realized_budget_fraction).sum::<f64>() / k,
                decay_cost: sel[0].decay_cost,
            }
        })
        .collect();
    if let Some(path) = &args.svg {
        let name = match args.param {
            SweepParam::Mu => "mu",
            SweepParam::Beta => "beta",
        };
        let svg = line_chart(
            &format!("sweep over {name}"),
            name,
            &[
                Series {
                    label: "mean mse",
                    colour: "#1f77b4",
                    points: means.iter().map(|m| (m.value, m.mean_mse)).collect(),
                },
                Series {
                    label: "budget fraction",
                    colour: "#d62728",
                    points: means.iter().map(|m| (m.value, m.realized_budget_fraction)).collect(),
                },
            ],
        );
        write_file(path, &svg)?;
    }
    let summary = SweepSummary {
        config: cfg,
        param: args.param,
        seeds: args.seeds.to_string(),
        means,
    };
    emit("sweep", &rows, &summary, args.out.as_deref(), args.summary.as_deref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    DropColumns,
    DropColumnsRenorm,
    SparseSam,
    SparseOam,
}

#[derive(Args, Debug)]
pub struct PropagateArgs {
    /// Flat JSON file (keys n, d, layers, d_ff, layer, segments, beta); flags override it
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Sequence length [default: 128]
    #[arg(long)]
    pub n: Option<usize>,
    /// Model width [default: 32]
    #[arg(long)]
    pub d: Option<usize>,
    /// Number of layers [default: 4]
    #[arg(long)]
    pub layers: Option<usize>,
    /// Feed-forward width [default: 64]
    #[arg(long)]
    pub d_ff: Option<usize>,
    /// Layer whose attention is pruned [default: 0]
    #[arg(long)]
    pub layer: Option<usize>,
    /// Number of equal-width segments [default: 4]
    #[arg(long)]
    pub segments: Option<usize>,
    /// How the segment is pruned
    #[arg(long, value_enum, default_value = "drop-columns")]
    pub mode: ModeArg,
    /// Sparse modes: fixed number of segment keys kept per row
    #[arg(long, conflicts_with = "ratio")]
    pub budget: Option<usize>,
    /// Sparse modes: fraction of visible segment keys kept per row [default: 0.25]
    #[arg(long)]
    pub ratio: Option<f64>,
    /// Sparse OAM magnitude weight [default: 0.2]
    #[arg(long)]
    pub beta: Option<f64>,
    /// Seed range; each seed builds its own model and input [default: 0..20]
    #[arg(long, default_value = "0..20")]
    pub seeds: SeedRange,
    /// Add a row that prunes every token
    #[arg(long)]
    pub include_all: bool,
    /// CSV output file [default: stdout]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    /// Also write the summary JSON here
    #[arg(long, value_name = "PATH")]
    pub summary: Option<PathBuf>,
}

#[derive(Serialize)]
struct PropagateConfig {
    n: usize,
    d: usize,
    layers: usize,
    d_ff: usize,
    layer: usize,
    segments: usize,
    mode: PruneMode,
}

#[derive(Serialize)]
struct SeedAsymmetry {
    seed: u64,
    initial_mse: f64,
    final_mse: f64,
    ratio: f64,
    initial_exceeds_final: bool,
}

#[derive(Serialize)]
struct PropagateSummary {
    config: PropagateConfig,
    seeds: String,
    pass_rate: f64,
    per_seed: Vec<SeedAsymmetry>,
}

#[derive(Serialize)]
struct PropagateRow {
    seed: u64,
    layer: usize,
    label: String,
    start: usize,
    end: usize,
    mode: &'static str,
    final_mse: f64,
}

fn prune_mode(args: &PropagateArgs, beta: f64) -> PruneMode {
    let budget = match args.budget {
        Some(c) => SegmentBudget::Fixed(c),
        None => SegmentBudget::Ratio(args.ratio.unwrap_or(0.25)),
    };
    match args.mode {
        ModeArg::DropColumns => PruneMode::DropColumns { renormalize: false },
        ModeArg::DropColumnsRenorm => PruneMode::DropColumns { renormalize: true },
        ModeArg::SparseSam => PruneMode::SparseSam { budget },
        ModeArg::SparseOam => PruneMode::SparseOam { budget, beta },
    }
}

pub fn propagate(args: &PropagateArgs) -> Result<(), CliError> {
    let file = FileConfig::load(args.config.as_deref())?;
    let beta = args.beta.or(file.beta).unwrap_or(stem_core::metric::DEFAULT_BETA);
    let cfg = PropagateConfig {
        n: args.n.or(file.n).unwrap_or(128),
        d: args.d.or(file.d).unwrap_or(32),
        layers: args.layers.or(file.layers).unwrap_or(4),
        d_ff: args.d_ff.or(file.d_ff).unwrap_or(64),
        layer: args.layer.or(file.layer).unwrap_or(0),
        segments: args.segments.or(file.segments).unwrap_or(4),
        mode: prune_mode(args, beta),
    };
    if cfg.layer >= cfg.layers {
        return Err(CliError::field("layer", &format!("must be < layers ({})", cfg.layers)));
    }
    if cfg.segments < 2 {
        return Err(CliError::field("segments", "need at least 2 to compare initial and final"));
    }
    let mut segments = vec![Segment {
        start: 0,
        end: cfg.n,
        mode: PruneMode::Control,
    }];
    segments.extend(equal_segments(cfg.n, cfg.segments, cfg.mode)?);
    if args.include_all {
        segments.push(Segment {
            start: 0,
            end: cfg.n,
            mode: cfg.mode,
        });
    }
    let seeds = args.seeds.seeds();
    let reports = seeds
        .par_iter()
        .map(|&seed| {
            let model = ToyTransformer::<f32>::build(cfg.layers, cfg.d, cfg.d_ff, seed)?;
            let x = toy_input::<f32>(cfg.n, cfg.d, seed)?;
            Ok((seed, segment_sensitivity(&model, &[x], cfg.layer, &segments)?))
        })
        .collect::<Result<Vec<_>, stem_core::StemError>>()?;

    let mut header: Vec<String> = ["seed", "layer", "label", "start", "end", "mode", "final_mse"]
        .map(String::from)
        .to_vec();
    header.extend((0..cfg.layers).map(|l| format!("mse_layer_{l}")));
    let mut records = vec![header];
    let mut per_seed = Vec::new();
    for (seed, report) in &reports {
        for (idx, seg) in report.segments.iter().enumerate() {
            let label = if idx == 0 {
                "control".to_string()
            } else if idx <= cfg.segments {
                format!("segment_{}", idx - 1)
            } else {
                "all".to_string()
            };
            let row = PropagateRow {
                seed: *seed,
                layer: cfg.layer,
                label,
                start: seg.start,
                end: seg.end,
                mode: seg.mode.label(),
                final_mse: seg.final_mse,
            };
            let mut rec = vec![
                row.seed.to_string(),
                row.layer.to_string(),
                row.label,
                row.start.to_string(),
                row.end.to_string(),
                row.mode.to_string(),
                row.final_mse.to_string(),
            ];
            rec.extend(seg.layer_mse.iter().map(|m| m.to_string()));
            records.push(rec);
        }
        let initial = report.segments[1].final_mse;
        let last = report.segments[cfg.segments].final_mse;
        per_seed.push(SeedAsymmetry {
            seed: *seed,
            initial_mse: initial,
            final_mse: last,
            ratio: initial / last,
            initial_exceeds_final: initial > last,
        });
    }
    let pass_rate = per_seed.iter().filter(|s| s.initial_exceeds_final).count() as f64 / per_seed.len() as f64;
    let summary = PropagateSummary {
        config: cfg,
        seeds: args.seeds.to_string(),
        pass_rate,
        per_seed,
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &records {
        w.write_record(r)
            .map_err(|e| CliError::Usage(format!("csv encoding failed: {e}")))?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?)
        .expect("csv output is utf-8");
    let text = format!("{}{body}", comment_line("propagate"));
    let json = to_json(&summary);
    if let Some(p) = &args.summary {
        write_file(p, &format!("{json}\n"))?;
    }
    match &args.out {
        Some(p) => {
            write_file(p, &text)?;
            stdout(&format!("{json}\n"));
        }
        None => stdout(&text),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct CostArgs {
    /// Sequence length
    #[arg(long)]
    pub n: usize,
    /// Head dimension [default: 64]
    #[arg(long, default_value_t = 64)]
    pub d: usize,
    /// Block size B [default: 128]
    #[arg(long, default_value_t = 128)]
    pub block_size: usize,
    /// Initial budget in tokens, at most n
    #[arg(long)]
    pub k_start: f64,
    /// Budget decay ratio μ in (0, 1] [default: 0.7]
    #[arg(long, default_value_t = 0.7)]
    pub mu: f64,
}

#[derive(Serialize)]
struct CostOutput {
    n: usize,
    d: usize,
    block_size: usize,
    k_start: f64,
    mu: f64,
    uniform_cost: f64,
    decay_cost: f64,
    savings: f64,
    enumerated_cost: f64,
    drift: f64,
    drift_within_n: bool,
    k_avg: f64,
    stem_complexity: f64,
    dense_complexity: f64,
    speedup_vs_dense: f64,
}

pub fn cost(args: &CostArgs) -> Result<(), CliError> {
    if !(args.k_start >= 1.0 && args.k_start <= args.n as f64) {
        return Err(CliError::field(
            "k_start",
            &format!("must lie in [1, n={}], got {}", args.n, args.k_start),
        ));
    }
    let r = cost_report(args.n, args.d, args.block_size, args.k_start, args.mu)?;
    let dense = dense_complexity(args.n, args.d);
    let out = CostOutput {
        n: args.n,
        d: args.d,
        block_size: args.block_size,
        k_start: args.k_start,
        mu: args.mu,
        uniform_cost: r.uniform_cost,
        decay_cost: r.decay_cost,
        savings: r.decay_savings,
        enumerated_cost: r.enumerated_cost,
        drift: r.drift(),
        drift_within_n: r.drift() <= args.n as f64,
        k_avg: r.enumerated_cost / args.n as f64,
        stem_complexity: r.stem_flops,
        dense_complexity: dense,
        speedup_vs_dense: dense / r.stem_flops,
    };
    stdout(&format!("{}\n", to_json(&out)));
    Ok(())
}

#[derive(Args, Debug)]
pub struct ValidateArgs {
    /// Seed for the generated cases [default: 0]
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output file [default: stdout]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

pub fn validate(args: &ValidateArgs) -> Result<(), CliError> {
    let report = run_validation(args.seed)?;
    let text = format!("{}{}", comment_line("validate"), report.to_csv());
    match &args.out {
        Some(p) => write_file(p, &text)?,
        None => stdout(&text),
    }
    let failed: Vec<&str> = report.failures().map(|c| c.check).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(failed.join(", ")))
    }
}
