//! Command-line front end: dataset generation, training, evaluation,
//! RTG sweeps, latency benchmarks and the full reproduction matrix.

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use seqctl::data::{load_dataset, save_dataset, TrajectoryDataset};
use seqctl::envs::{EnvKind, EnvSpec, Variant};
use seqctl::evaluator::{
    bench_inference, eval_suite, export_phase_portrait, latency_csv_row, pd_takeover_rollout,
    rtg_sweep, Agent, EvalReport,
};
use seqctl::experts::{generate_dataset, ControllerParams, DatasetQuality};
use seqctl::kernel::checkpoint;
use seqctl::models::{init_parameters, Manifest, ModelConfig, ModelVariant, Policy};
use seqctl::trainer::{train, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "seqctl", version, about = "Offline-RL workbench for pendulum control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a trajectory dataset from a scripted controller.
    GenData(GenDataArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained run over seeded episodes.
    Eval(EvalArgs),
    /// Sweep the evaluation target RTG and report rank correlation.
    Sweep(SweepArgs),
    /// Benchmark single-step inference latency.
    Bench(BenchArgs),
    /// Run the full desk-scale experiment matrix.
    Reproduce(ReproduceArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Environment: pendulum, cartpole or furuta.
    #[arg(long)]
    env: String,
    /// Task variant: stabilize or swing-up.
    #[arg(long)]
    variant: String,
    /// Behavior quality: expert, medium, random or replay.
    #[arg(long)]
    quality: String,
    /// Number of trajectories.
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Output path; defaults to data/<env>-<variant>-<quality>.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Model variant: dt, dlstm or bc.
    #[arg(long)]
    model: String,
    /// Dataset file produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON run-config file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory name under the runs root.
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    context_len: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    /// DLSTM ablation: one summed token per timestep.
    #[arg(long)]
    fused_tokens: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory containing manifest.json and best.ckpt.
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 30)]
    episodes: usize,
    /// Conditioning return; defaults to the dataset's best return.
    #[arg(long)]
    target_rtg: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also export a phase-portrait CSV.
    #[arg(long)]
    phase_portrait: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    run: PathBuf,
    /// Comma-separated multiples of the dataset's best return.
    #[arg(long, default_value = "0.25,0.5,1.0,1.5")]
    rtg: String,
    #[arg(long, default_value_t = 30)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long, default_value_t = 1000)]
    repeat: usize,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    /// Optional context length override (fresh parameters; latency
    /// does not depend on trained weights).
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args)]
struct ReproduceArgs {
    /// Output directory; defaults to <runs root>/reproduce.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Restore full-scale dataset and schedule sizes.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    trajectories: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    /// Evaluation episodes per cell.
    #[arg(long)]
    episodes: Option<usize>,
    /// Worker threads for the cell pool.
    #[arg(long)]
    workers: Option<usize>,
    /// Comma-separated task filter, e.g. "furuta-stabilize".
    #[arg(long)]
    tasks: Option<String>,
}

/// A usage error exits with code 2; everything else with 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(UsageError(msg.into()))
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Reproduce(a) => cmd_reproduce(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        let code = if e.is::<UsageError>() { 2 } else { 1 };
        std::process::exit(code);
    }
}

fn runs_root() -> PathBuf {
    std::env::var_os("SEQCTL_RUNS_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn parse_env_kind(s: &str) -> Result<EnvKind> {
    match s {
        "pendulum" => Ok(EnvKind::Pendulum),
        "cartpole" => Ok(EnvKind::CartPole),
        "furuta" => Ok(EnvKind::Furuta),
        other => Err(usage(format!(
            "unknown env '{other}' (expected pendulum, cartpole or furuta)"
        ))),
    }
}

fn parse_variant(s: &str) -> Result<Variant> {
    match s {
        "stabilize" => Ok(Variant::Stabilize),
        "swing-up" | "swingup" => Ok(Variant::SwingUp),
        other => Err(usage(format!(
            "unknown variant '{other}' (expected stabilize or swing-up)"
        ))),
    }
}

fn spec_from_meta(env_name: &str) -> Result<EnvSpec> {
    let (env, variant) = env_name
        .split_once('-')
        .ok_or_else(|| anyhow!("malformed env name '{env_name}' in dataset"))?;
    Ok(EnvSpec::new(parse_env_kind(env)?, parse_variant(variant)?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

// -------------------------------------------------------------------
// gen-data
// -------------------------------------------------------------------

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    if a.n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let kind = parse_env_kind(&a.env)?;
    let variant = parse_variant(&a.variant)?;
    let quality = DatasetQuality::parse(&a.quality)
        .ok_or_else(|| usage(format!("unknown quality '{}'", a.quality)))?;
    let spec = EnvSpec::new(kind, variant);
    let name = format!("{}-{}", spec.name, quality.tag());
    let out = a
        .out
        .unwrap_or_else(|| PathBuf::from("data").join(format!("{name}.jsonl")));
    if let Some(dir) = out.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let dataset = generate_dataset(&name, &spec, quality, a.n, a.seed)?;
    save_dataset(&dataset, &out)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'a str,
        env: &'a EnvSpec,
        quality: &'a str,
        n: usize,
        seed: u64,
        out: &'a Path,
    }
    write_json(
        &out.with_extension("config.json"),
        &Resolved {
            command: "gen-data",
            env: &spec,
            quality: quality.tag(),
            n: a.n,
            seed: a.seed,
            out: &out,
        },
    )?;
    // Reload to report the on-disk metadata including the checksum.
    let meta = &load_dataset(&out)?.meta;
    println!("{}", serde_json::to_string_pretty(meta)?);
    Ok(())
}

// -------------------------------------------------------------------
// train
// -------------------------------------------------------------------

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfigFile {
    model: ModelOverrides,
    train: TrainOverrides,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ModelOverrides {
    context_len: Option<usize>,
    n_layers: Option<usize>,
    hidden: Option<usize>,
    n_heads: Option<usize>,
    dropout: Option<f64>,
    fused_tokens: Option<bool>,
}

#[derive(Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainOverrides {
    steps_per_epoch: Option<usize>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    grad_clip: Option<f64>,
    probe_episodes: Option<usize>,
    patience: Option<usize>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct ResolvedTrainConfig<'a> {
    command: &'a str,
    dataset: &'a Path,
    env: &'a EnvSpec,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn load_run_dataset(path: &Path) -> Result<(TrajectoryDataset, EnvSpec)> {
    if !path.exists() {
        return Err(usage(format!("dataset not found: {}", path.display())));
    }
    let dataset = load_dataset(path).with_context(|| format!("loading {}", path.display()))?;
    let spec = spec_from_meta(&dataset.meta.env)?;
    Ok((dataset, spec))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let variant = ModelVariant::parse(&a.model)
        .ok_or_else(|| usage(format!("unknown model '{}' (expected dt, dlstm or bc)", a.model)))?;
    let (dataset, spec) = load_run_dataset(&a.data)?;

    let file: RunConfigFile = match &a.config {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfigFile::default(),
    };

    let mut mcfg = ModelConfig::defaults(variant, &spec);
    let m = &file.model;
    mcfg.context_len = a.context_len.or(m.context_len).unwrap_or(mcfg.context_len);
    mcfg.n_layers = a.layers.or(m.n_layers).unwrap_or(mcfg.n_layers);
    mcfg.hidden = a.hidden.or(m.hidden).unwrap_or(mcfg.hidden);
    mcfg.dropout = a.dropout.or(m.dropout).unwrap_or(mcfg.dropout);
    if variant == ModelVariant::Dt {
        mcfg.n_heads = a.heads.or(m.n_heads).or(mcfg.n_heads);
    }
    mcfg.fused_tokens = a.fused_tokens || m.fused_tokens.unwrap_or(false);
    mcfg.validate()?;
    if mcfg.state_dim != dataset.obs_dim() {
        bail!(
            "dataset '{}' has observation dim {} but model expects {}",
            dataset.meta.name,
            dataset.obs_dim(),
            mcfg.state_dim
        );
    }

    let mut tcfg = TrainConfig::defaults(variant);
    let t = &file.train;
    tcfg.steps_per_epoch = a.steps_per_epoch.or(t.steps_per_epoch).unwrap_or(tcfg.steps_per_epoch);
    tcfg.epochs = a.epochs.or(t.epochs).unwrap_or(tcfg.epochs);
    tcfg.batch_size = a.batch_size.or(t.batch_size).unwrap_or(tcfg.batch_size);
    tcfg.lr = a.lr.or(t.lr).unwrap_or(tcfg.lr);
    tcfg.grad_clip = a.grad_clip.or(t.grad_clip).unwrap_or(tcfg.grad_clip);
    tcfg.probe_episodes = t.probe_episodes.unwrap_or(tcfg.probe_episodes);
    tcfg.patience = t.patience.unwrap_or(tcfg.patience);
    tcfg.seed = a.seed.or(t.seed).unwrap_or(tcfg.seed);

    let run_id = a.run_id.unwrap_or_else(|| {
        format!("{}-{}-s{}", variant.tag(), dataset.meta.name, tcfg.seed)
    });
    let run_dir = runs_root().join(&run_id);
    std::fs::create_dir_all(&run_dir)?;
    write_json(
        &run_dir.join("config.json"),
        &ResolvedTrainConfig {
            command: "train",
            dataset: &a.data,
            env: &spec,
            model: &mcfg,
            train: &tcfg,
        },
    )?;

    let mut model = init_parameters(&mcfg, tcfg.seed)?;
    println!(
        "training {} on {} ({} parameters) -> {}",
        variant.tag(),
        dataset.meta.name,
        model.param_count(),
        run_dir.display()
    );
    let log = train(&mut model, &dataset, &spec, &tcfg, Some(&run_dir))?;
    if let Some(msg) = &log.aborted {
        eprintln!("warning: {msg}");
    }
    println!(
        "best epoch {} with probe return {:.4}",
        log.best_epoch, log.best_probe_mean
    );
    Ok(())
}

// -------------------------------------------------------------------
// eval / sweep / bench
// -------------------------------------------------------------------

struct LoadedRun {
    manifest: Manifest,
    policy: Policy,
    spec: EnvSpec,
    run_dir: PathBuf,
}

fn load_run(run: &Path) -> Result<LoadedRun> {
    let manifest_path = run.join("manifest.json");
    if !manifest_path.exists() {
        return Err(usage(format!("no manifest.json in {}", run.display())));
    }
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)
            .with_context(|| format!("parsing {}", manifest_path.display()))?;
    let mut model = init_parameters(&manifest.config, manifest.seed)?;
    let values = checkpoint::load(&run.join("best.ckpt"))
        .with_context(|| format!("loading checkpoint from {}", run.display()))?;
    model.store.load_values(&values)?;
    let policy = Policy {
        model,
        state_mean: manifest.state_mean.clone(),
        state_std: manifest.state_std.clone(),
    };
    let spec = manifest.env.clone();
    Ok(LoadedRun {
        manifest,
        policy,
        spec,
        run_dir: run.to_path_buf(),
    })
}

fn report_csv(report: &EvalReport) -> String {
    let mut out = String::from("episode,return\n");
    for (i, r) in report.returns.iter().enumerate() {
        out.push_str(&format!("{i},{r:.12}\n"));
    }
    out
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let target = a.target_rtg.unwrap_or(run.manifest.dataset_max_return);
    let eval_dir = run.run_dir.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'a str,
        run: &'a Path,
        episodes: usize,
        target_rtg: f64,
        seed: u64,
    }
    write_json(
        &eval_dir.join("config.json"),
        &Resolved {
            command: "eval",
            run: &a.run,
            episodes: a.episodes,
            target_rtg: target,
            seed: a.seed,
        },
    )?;
    let report = eval_suite(
        &Agent::Learned(&run.policy),
        &run.spec,
        a.episodes,
        target,
        a.seed,
        run.manifest.config.variant.tag(),
        a.phase_portrait,
    )?;
    write_json(&eval_dir.join("report.json"), &report)?;
    std::fs::write(eval_dir.join("returns.csv"), report_csv(&report))?;
    if a.phase_portrait {
        export_phase_portrait(&report, &run.spec, &eval_dir.join("phase_portrait.csv"))?;
    }
    println!(
        "{} on {}: {:.4} +/- {:.4} over {} episodes (target RTG {:.4})",
        report.model_tag, report.env, report.mean, report.std, a.episodes, target
    );
    Ok(())
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let multiples: Vec<f64> = a
        .rtg
        .split(',')
        .map(|s| s.trim().parse::<f64>().map_err(|_| usage(format!("bad RTG value '{s}'"))))
        .collect::<Result<_>>()?;
    if multiples.is_empty() {
        return Err(usage("--rtg needs at least one value"));
    }
    let base = run.manifest.dataset_max_return;
    let targets: Vec<f64> = multiples.iter().map(|m| m * base).collect();
    let table = rtg_sweep(
        &Agent::Learned(&run.policy),
        &run.spec,
        &targets,
        a.episodes,
        a.seed,
        run.manifest.config.variant.tag(),
    )?;
    let eval_dir = run.run_dir.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    write_json(&eval_dir.join("sweep.json"), &table)?;
    let mut csv = String::from("rtg,mean,std\n");
    for row in &table.rows {
        csv.push_str(&format!("{:.12},{:.12},{:.12}\n", row.rtg, row.mean, row.std));
    }
    std::fs::write(eval_dir.join("sweep.csv"), csv)?;
    for row in &table.rows {
        println!("rtg {:>12.4}: {:.4} +/- {:.4}", row.rtg, row.mean, row.std);
    }
    println!("spearman rho = {:.4}", table.spearman_rho);
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let run = load_run(&a.run)?;
    let (policy, k) = match a.k {
        Some(k) => {
            let mut cfg = run.manifest.config.clone();
            cfg.context_len = k;
            (
                Policy {
                    model: init_parameters(&cfg, run.manifest.seed)?,
                    state_mean: run.policy.state_mean.clone(),
                    state_std: run.policy.state_std.clone(),
                },
                k,
            )
        }
        None => (run.policy, run.manifest.config.context_len),
    };
    let stats = bench_inference(&policy, &run.spec, a.repeat, a.warmup, None)?;
    let eval_dir = run.run_dir.join("eval");
    std::fs::create_dir_all(&eval_dir)?;
    let csv = String::from("model,k,mean_s,p95_s,max_s,budget_s\n")
        + &latency_csv_row(run.manifest.config.variant.tag(), k, &stats);
    std::fs::write(eval_dir.join(format!("latency_k{k}.csv")), &csv)?;
    println!(
        "{} K={k}: mean {:.6}s p95 {:.6}s max {:.6}s (budget {:.3}s, timer resolution {:.1e}s)",
        run.manifest.config.variant.tag(),
        stats.mean_s,
        stats.p95_s,
        stats.max_s,
        stats.budget_s,
        stats.resolution_s
    );
    Ok(())
}

// -------------------------------------------------------------------
// reproduce
// -------------------------------------------------------------------

#[derive(Clone, Copy)]
struct Task {
    kind: EnvKind,
    variant: Variant,
}

const TASKS: [Task; 4] = [
    Task { kind: EnvKind::CartPole, variant: Variant::Stabilize },
    Task { kind: EnvKind::Pendulum, variant: Variant::SwingUp },
    Task { kind: EnvKind::Furuta, variant: Variant::Stabilize },
    Task { kind: EnvKind::Furuta, variant: Variant::SwingUp },
];

#[derive(Clone, Serialize)]
struct Scale {
    trajectories: usize,
    epochs: usize,
    steps_per_epoch: usize,
    batch_size: usize,
    lr: f64,
    hidden: usize,
    episodes: usize,
}

impl Scale {
    /// Desk-scale profile: smaller width, shorter schedule and a
    /// faster learning rate so the whole matrix finishes in minutes.
    fn reduced() -> Self {
        Scale {
            trajectories: 250,
            epochs: 5,
            steps_per_epoch: 200,
            batch_size: 32,
            lr: 1e-3,
            hidden: 64,
            episodes: 30,
        }
    }

    fn paper() -> Self {
        Scale {
            trajectories: 500,
            epochs: 10,
            steps_per_epoch: 3000,
            batch_size: 64,
            lr: 3e-5,
            hidden: 128,
            episodes: 30,
        }
    }
}

struct CellResult {
    mean: f64,
    std: f64,
}

fn run_cell(
    dataset: &TrajectoryDataset,
    spec: &EnvSpec,
    variant: ModelVariant,
    scale: &Scale,
    seed: u64,
    out_dir: &Path,
) -> Result<(CellResult, Policy)> {
    let mut mcfg = ModelConfig::defaults(variant, spec);
    mcfg.hidden = if variant == ModelVariant::Bc { 2 * scale.hidden } else { scale.hidden };
    let mut tcfg = TrainConfig::defaults(variant);
    tcfg.epochs = scale.epochs;
    tcfg.steps_per_epoch = scale.steps_per_epoch;
    tcfg.batch_size = if variant == ModelVariant::Bc { 2 * scale.batch_size } else { scale.batch_size };
    tcfg.lr = scale.lr;
    tcfg.seed = seed;
    let run_dir = out_dir.join(format!("{}-{}", variant.tag(), dataset.meta.name));
    let mut model = init_parameters(&mcfg, seed)?;
    train(&mut model, dataset, spec, &tcfg, Some(&run_dir))?;
    let policy = Policy {
        model,
        state_mean: dataset.state_mean.clone(),
        state_std: dataset.state_std.clone(),
    };
    let report = eval_suite(
        &Agent::Learned(&policy),
        spec,
        scale.episodes,
        dataset.meta.max_return,
        seed,
        variant.tag(),
        false,
    )?;
    Ok((CellResult { mean: report.mean, std: report.std }, policy))
}

fn cmd_reproduce(a: ReproduceArgs) -> Result<()> {
    let mut scale = if a.paper_scale { Scale::paper() } else { Scale::reduced() };
    if let Some(n) = a.trajectories {
        scale.trajectories = n;
    }
    if let Some(n) = a.epochs {
        scale.epochs = n;
    }
    if let Some(n) = a.steps_per_epoch {
        scale.steps_per_epoch = n;
    }
    if let Some(n) = a.episodes {
        scale.episodes = n;
    }
    let out_dir = a.out.unwrap_or_else(|| runs_root().join("reproduce"));
    std::fs::create_dir_all(&out_dir)?;
    if let Some(workers) = a.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .ok();
    }

    let filter: Option<Vec<String>> = a
        .tasks
        .map(|s| s.split(',').map(|x| x.trim().to_string()).collect());
    let tasks: Vec<Task> = TASKS
        .iter()
        .copied()
        .filter(|t| {
            let name = EnvSpec::new(t.kind, t.variant).name;
            filter.as_ref().map_or(true, |f| f.iter().any(|x| x == &name))
        })
        .collect();
    if tasks.is_empty() {
        return Err(usage("--tasks matched no known task"));
    }

    #[derive(Serialize)]
    struct Resolved<'a> {
        command: &'a str,
        seed: u64,
        paper_scale: bool,
        scale: &'a Scale,
        tasks: Vec<String>,
    }
    write_json(
        &out_dir.join("config.json"),
        &Resolved {
            command: "reproduce",
            seed: a.seed,
            paper_scale: a.paper_scale,
            scale: &scale,
            tasks: tasks
                .iter()
                .map(|t| EnvSpec::new(t.kind, t.variant).name)
                .collect(),
        },
    )?;

    // Datasets first (cheap, sequential, deterministic).
    let mut rows: Vec<(EnvSpec, TrajectoryDataset)> = Vec::new();
    for task in &tasks {
        let spec = EnvSpec::new(task.kind, task.variant);
        for quality in [DatasetQuality::Expert, DatasetQuality::Replay] {
            let name = format!("{}-{}", spec.name, quality.tag());
            println!("generating dataset {name} ({} trajectories)", scale.trajectories);
            let ds = generate_dataset(&name, &spec, quality, scale.trajectories, a.seed)?;
            rows.push((spec.clone(), ds));
        }
    }

    // Training cells across the worker pool; failures are recorded,
    // never fatal.
    use rayon::prelude::*;
    let variants = [ModelVariant::Dt, ModelVariant::Dlstm, ModelVariant::Bc];
    let cells: Vec<(usize, ModelVariant)> = rows
        .iter()
        .enumerate()
        .flat_map(|(i, _)| variants.iter().map(move |&v| (i, v)))
        .collect();
    let results: Vec<((usize, ModelVariant), Result<(CellResult, Policy)>)> = cells
        .par_iter()
        .map(|&(i, v)| {
            let (spec, ds) = &rows[i];
            println!("training {} on {}", v.tag(), ds.meta.name);
            ((i, v), run_cell(ds, spec, v, &scale, a.seed, &out_dir))
        })
        .collect();

    let cell = |i: usize, v: ModelVariant| -> String {
        match results.iter().find(|((ri, rv), _)| *ri == i && *rv == v) {
            Some((_, Ok((r, _)))) => format!("{:.4} ± {:.4}", r.mean, r.std),
            Some((_, Err(e))) => format!("failed ({e:#})"),
            None => "—".into(),
        }
    };

    let mut table = String::new();
    table.push_str("# Reproduction results\n\n");
    table.push_str(&format!(
        "Seed {}, {} trajectories per dataset, {} episodes per evaluation.\n\n",
        a.seed, scale.trajectories, scale.episodes
    ));
    table.push_str("| Task | Dataset | Dataset mean | DT | DLSTM | BC |\n");
    table.push_str("|---|---|---|---|---|---|\n");
    for (i, (spec, ds)) in rows.iter().enumerate() {
        table.push_str(&format!(
            "| {} | {} (TQ {:.2}) | {:.4} | {} | {} | {} |\n",
            spec.name,
            ds.meta.policy,
            ds.meta.tq,
            ds.meta.mean_return,
            cell(i, ModelVariant::Dt),
            cell(i, ModelVariant::Dlstm),
            cell(i, ModelVariant::Bc),
        ));
    }

    // PD-takeover row: DLSTM on Furuta swing-up expert data with a PD
    // stabilizer taking over near the upright.
    if let Some(i) = rows.iter().position(|(spec, ds)| {
        spec.kind == EnvKind::Furuta
            && spec.variant == Variant::SwingUp
            && ds.meta.policy == "expert"
    }) {
        if let Some((_, Ok((_, policy)))) = results
            .iter()
            .find(|((ri, rv), _)| *ri == i && *rv == ModelVariant::Dlstm)
        {
            let (spec, ds) = &rows[i];
            let pd = ControllerParams::defaults(spec.kind);
            let returns: Vec<f64> = (0..scale.episodes as u64)
                .map(|s| {
                    pd_takeover_rollout(
                        policy, spec, &pd, 0.2, 12.0, ds.meta.max_return, a.seed, s,
                    )
                    .map(|(o, _)| o.episode_return)
                })
                .collect::<Result<_, _>>()?;
            let (m, sd) = seqctl::evaluator::mean_std(&returns);
            table.push_str(&format!(
                "| furuta-swingup + PD takeover | expert | {:.4} | — | {:.4} ± {:.4} | — |\n",
                ds.meta.mean_return, m, sd
            ));
        }
    }

    std::fs::write(out_dir.join("results.md"), &table)?;
    println!("\n{table}");
    println!("results written to {}", out_dir.display());
    Ok(())
}
