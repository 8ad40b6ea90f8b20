//! `heml`: train, evaluate and ablate HE-loss models on synthetic data.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use heml_core::encoder::EncoderParams;
use heml_core::evaluator::EvalOptions;
use heml_core::experiment::{evaluate_encoder, experiment_data, run_experiment, split_dataset};
use heml_core::synth::Dataset;
use heml_core::trainer::{metric_loss, optimal_lr_for_size, stream_rng, LossKind, TrainConfig, Trainer};
use heml_core::types::EmbeddingMatrix;
use log::{info, warn};
use rand::Rng;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "heml", version, about = "HE-loss metric learning experiments on synthetic identities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config key; may be repeated. Applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, then write metrics.jsonl, checkpoint.mrck, eval.json and
    /// config.conf into out_dir.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the held-out split of the configured data.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also write a per-query CSV here.
        #[arg(long)]
        per_query: Option<PathBuf>,
    },
    /// One training run per value of a single setting; CSV summary.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        dimension: Dimension,
        /// Comma-separated grid; each dimension has a default.
        #[arg(long)]
        values: Option<String>,
        /// CSV path; defaults to out_dir/ablate_<dimension>.csv.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Reference learning rate for a dataset of SIZE samples.
    Lr { size: f64 },
    /// Wall time of each loss against dictionary size, as CSV on stdout.
    BenchLoss {
        #[arg(long, default_value = "he,tri_hard,tri_all,npair,ranked_list,infonce_out")]
        losses: String,
        #[arg(long, default_value = "256,1024,4096,8192")]
        dict_sizes: String,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 64)]
        queries: usize,
        #[arg(long, default_value_t = 15)]
        positives: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum Dimension {
    DictSize,
    Momentum,
    BatchShape,
    Loss,
    PastPositives,
    Metric,
}

impl Dimension {
    fn key(self) -> &'static str {
        match self {
            Dimension::DictSize => "dict_size",
            Dimension::Momentum => "momentum",
            Dimension::BatchShape => "batch_shape",
            Dimension::Loss => "loss",
            Dimension::PastPositives => "past_positives",
            Dimension::Metric => "metric",
        }
    }

    fn default_values(self) -> &'static str {
        match self {
            Dimension::DictSize => "256,512,1024",
            Dimension::Momentum => "0,0.9,0.99,0.997",
            Dimension::BatchShape => "4x16,8x8,16x4",
            Dimension::Loss => "he,tri_hard,tri_all,npair,ranked_list,infonce_out",
            Dimension::PastPositives => "false,true",
            Dimension::Metric => "euclidean,neg_cosine",
        }
    }

    /// Config assignments for one grid value.
    fn assignments(self, value: &str) -> Result<Vec<(&'static str, String)>, String> {
        Ok(match self {
            Dimension::DictSize => vec![("dict_capacity", value.into())],
            Dimension::Momentum => vec![("ema_momentum", value.into())],
            Dimension::Loss => vec![("loss", value.into())],
            Dimension::PastPositives => vec![("include_past_positives", value.into())],
            Dimension::Metric => vec![("metric", value.into())],
            Dimension::BatchShape => {
                let (c, n) = value.split_once('x').ok_or_else(|| format!("batch shape '{value}' is not CxN"))?;
                vec![("groups", c.into()), ("per_group", n.into())]
            }
        })
    }
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match setup_threads().and_then(|()| run(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}

fn setup_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("HEML_THREADS") else { return Ok(()) };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| usage(format!("HEML_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Failure::Runtime(anyhow!(e)))
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Train(args) => cmd_train(&load(&args)?),
        Command::Eval { cfg, checkpoint, per_query } => cmd_eval(&load(&cfg)?, &checkpoint, per_query.as_deref()),
        Command::Ablate { cfg, dimension, values, output } => {
            cmd_ablate(&load(&cfg)?, dimension, values.as_deref(), output)
        }
        Command::Lr { size } => {
            let lr = optimal_lr_for_size(size).map_err(usage)?;
            println!("{lr}");
            Ok(())
        }
        Command::BenchLoss { losses, dict_sizes, dim, queries, positives, repeats, seed } => {
            cmd_bench(&losses, &dict_sizes, dim, queries, positives, repeats, seed)
        }
    }
}

fn load(args: &ConfigArgs) -> Result<RunConfig, Failure> {
    RunConfig::load(args.config.as_deref(), &args.overrides).map_err(usage)
}

/// Data split and a fresh trainer; every failure here is a configuration problem.
fn prepare(cfg: &RunConfig) -> Result<(Dataset, Dataset, Trainer), Failure> {
    let exp = &cfg.experiment;
    let data = experiment_data(exp).map_err(usage)?;
    let (train, eval) = split_dataset(&data, exp.eval_split).map_err(usage)?;
    let trainer = Trainer::new(exp.train.clone(), train.inputs.dim(), train.num_ids, train.len()).map_err(usage)?;
    let t = &exp.train;
    let eligible = train.rows_by_identity().iter().filter(|rows| rows.len() >= t.per_group).count();
    if eligible < t.groups {
        return Err(usage(format!(
            "batches need {} identities with {} training samples each, only {eligible} qualify",
            t.groups, t.per_group
        )));
    }
    Ok((train, eval, trainer))
}

fn eval_options(cfg: &RunConfig) -> EvalOptions {
    EvalOptions { metric: cfg.experiment.train.metric, exclude_self: true }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("cannot create {}", path.display()))?))
}

fn cmd_train(cfg: &RunConfig) -> Result<(), Failure> {
    let (train, eval, mut trainer) = prepare(cfg)?;
    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    fs::write(dir.join("config.conf"), cfg.to_text()).context("cannot write config.conf")?;

    let started = Instant::now();
    let mut metrics = create(&dir.join("metrics.jsonl"))?;
    let mut write_err = None;
    trainer
        .run(&train, |m| {
            if write_err.is_none() {
                write_err = writeln!(metrics, "{}", m.to_json_line()).err();
            }
        })
        .context("training failed")?;
    if let Some(e) = write_err {
        return Err(anyhow!(e).context("cannot write metrics.jsonl").into());
    }
    metrics.flush().context("cannot write metrics.jsonl")?;
    info!("{} steps in {:.1}s", trainer.total_steps(), started.elapsed().as_secs_f64());

    let mut ckpt = create(&dir.join("checkpoint.mrck"))?;
    trainer.main.write_checkpoint(&mut ckpt).context("cannot write checkpoint")?;
    let result = evaluate_encoder(&trainer.main, &eval, &eval_options(cfg)).context("evaluation failed")?;
    let summary = serde_json::to_string_pretty(&result.summary_json()).context("cannot encode eval summary")?;
    fs::write(dir.join("eval.json"), format!("{summary}\n")).context("cannot write eval.json")?;
    println!("map {:.4} rank1 {:.4} -> {}", result.map, result.rank1, dir.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, per_query: Option<&Path>) -> Result<(), Failure> {
    let exp = &cfg.experiment;
    let data = experiment_data(exp).map_err(usage)?;
    let (_, eval) = split_dataset(&data, exp.eval_split).map_err(usage)?;
    let file = File::open(checkpoint).map_err(|e| usage(format!("cannot open {}: {e}", checkpoint.display())))?;
    let encoder = EncoderParams::read_checkpoint(std::io::BufReader::new(file)).map_err(usage)?;
    if encoder.input_dim() != eval.inputs.dim() {
        return Err(usage(format!(
            "checkpoint expects {}-wide inputs, config generates {}",
            encoder.input_dim(),
            eval.inputs.dim()
        )));
    }
    let result = evaluate_encoder(&encoder, &eval, &eval_options(cfg)).context("evaluation failed")?;
    if let Some(p) = per_query {
        let mut w = create(p)?;
        result.write_per_query_csv(&mut w).context("cannot write per-query CSV")?;
        w.flush().context("cannot write per-query CSV")?;
    }
    println!("{}", result.summary_json());
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, dim: Dimension, values: Option<&str>, output: Option<PathBuf>) -> Result<(), Failure> {
    let grid: Vec<&str> = values.unwrap_or(dim.default_values()).split(',').map(str::trim).collect();
    let mut points = Vec::with_capacity(grid.len());
    for v in &grid {
        let mut point = cfg.clone();
        for (k, val) in dim.assignments(v).map_err(usage)? {
            point.set(k, &val).map_err(usage)?;
        }
        points.push((v.to_string(), point));
    }
    let path = output.unwrap_or_else(|| cfg.out_dir.join(format!("ablate_{}.csv", dim.key())));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("cannot create {}", parent.display()))?;
    }
    let mut csv = create(&path)?;
    writeln!(csv, "setting,map,rank1,final_loss,error").context("cannot write CSV")?;
    let mut failures = 0;
    for (setting, point) in &points {
        info!("{}={setting}", dim.key());
        match run_experiment(&point.experiment, |_| {}) {
            Ok(out) => writeln!(csv, "{setting},{},{},{},", out.retrieval.map, out.retrieval.rank1, out.final_loss()),
            Err(e) => {
                warn!("{}={setting} failed: {e}", dim.key());
                failures += 1;
                writeln!(csv, "{setting},,,,\"{}\"", e.to_string().replace('"', "'"))
            }
        }
        .context("cannot write CSV")?;
    }
    csv.flush().context("cannot write CSV")?;
    println!("{}", path.display());
    if failures == points.len() {
        return Err(anyhow!("every grid point failed").into());
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(what: &str, s: &str) -> Result<Vec<T>, Failure>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(|v| v.trim().parse().map_err(|e| usage(format!("bad {what} '{v}': {e}")))).collect()
}

fn random_matrix(rows: usize, dim: usize, rng: &mut impl Rng) -> EmbeddingMatrix {
    EmbeddingMatrix::new(rows, dim, (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("finite random matrix")
}

fn cmd_bench(
    losses: &str,
    dict_sizes: &str,
    dim: usize,
    queries: usize,
    positives: usize,
    repeats: usize,
    seed: u64,
) -> Result<(), Failure> {
    let losses: Vec<LossKind> = parse_list("loss", losses)?;
    let sizes: Vec<usize> = parse_list("dictionary size", dict_sizes)?;
    if dim == 0 || queries == 0 || positives == 0 || repeats == 0 {
        return Err(usage("dim, queries, positives and repeats must be positive"));
    }
    if let Some(&d) = sizes.iter().find(|&&d| d <= positives) {
        return Err(usage(format!("dictionary size {d} leaves no negatives for {positives} positives")));
    }
    let mut rng = stream_rng(seed, 0);
    let mut out = std::io::stdout().lock();
    writeln!(out, "loss,dict_size,queries,seconds,us_per_query").context("stdout")?;
    for &d in &sizes {
        let q = random_matrix(queries, dim, &mut rng);
        let pos = random_matrix(positives, dim, &mut rng);
        let neg = random_matrix(d - positives, dim, &mut rng);
        for &loss in &losses {
            let cfg = TrainConfig { loss, ..TrainConfig::default() };
            let mut best = f64::INFINITY;
            for _ in 0..repeats {
                let start = Instant::now();
                for i in 0..queries {
                    std::hint::black_box(metric_loss(&cfg, q.row(i), &pos, &neg).context("loss evaluation")?);
                }
                best = best.min(start.elapsed().as_secs_f64());
            }
            writeln!(out, "{loss},{d},{queries},{best:.6},{:.2}", best * 1e6 / queries as f64).context("stdout")?;
        }
    }
    Ok(())
}
