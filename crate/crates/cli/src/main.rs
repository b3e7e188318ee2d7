//! `fel`: data generation, training, refinement, sampling, evaluation and
//! benchmarks for the edit-transfer laboratory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fel_core::cache::feature_similarity_map;
use fel_core::conditioning::{null_text, sequence_for};
use fel_core::config::RunConfig;
use fel_core::experiments::{self, AblationLadder};
use fel_core::flow::linear_schedule;
use fel_core::metrics::{bench_csv, bench_scaling, calibrate_tau, loglog_slope, BenchVariant};
use fel_core::model::{checkpoint, Model};
use fel_core::par::Exec;
use fel_core::rng;
use fel_core::synthbench::{self, Category, Quadruple};
use fel_core::tensor::Real;
use fel_core::trainer::{self, EvalOptions, EvalText, Stage};
use fel_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fel", version, about = "In-context edit-transfer laboratory")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root (images/, reports/, manifests/, checkpoints/).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seeds per item (eval, sample).
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Stage-1 training with pseudo text (text-coupled baseline).
    #[arg(long, global = true)]
    text_coupled: bool,
    #[arg(long, global = true)]
    no_cache: bool,
    #[arg(long, global = true)]
    no_compress: bool,
    /// Bench resolutions, comma separated.
    #[arg(long, global = true, value_delimiter = ',')]
    resolutions: Option<Vec<usize>>,
    /// Sampler steps T.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Generate the synthetic benchmark (train and test splits).
    GenData,
    /// Stage-1 training.
    Train,
    /// Candidate generation, ranking and stage-2 refinement.
    Refine,
    /// Write generated B' images for a split.
    Sample,
    /// Evaluate a checkpoint on a split.
    Eval,
    /// Wall-clock and memory scaling across resolutions.
    BenchScaling,
    /// Condition/target feature similarity across timesteps.
    CacheSim,
    /// Paired text on/off evaluation of two checkpoints.
    TextDominance,
    /// Train and evaluate the ablation ladder.
    Ablation,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Refine => "refine",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::BenchScaling => "bench-scaling",
            Command::CacheSim => "cache-sim",
            Command::TextDominance => "text-dominance",
            Command::Ablation => "ablation",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
enum Precision {
    F32,
    F64check,
}

fn precision() -> Result<Precision> {
    match std::env::var("FEL_PRECISION").as_deref() {
        Err(_) | Ok("") | Ok("f32") => Ok(Precision::F32),
        Ok("f64check") => Ok(Precision::F64check),
        Ok(other) => Err(Error::config("FEL_PRECISION", format!("expected f32 or f64check, got {other:?}"))),
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    precision: Precision,
    config: &'a RunConfig,
}

fn resolve(common: &Common, cmd: Command) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => {
            if !p.is_file() {
                return Err(Error::config("--config", format!("{} does not exist", p.display())));
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.data.seed = s;
        cfg.train.seed = s;
        cfg.flow.base_seed = s;
    }
    if let Some(o) = &common.out {
        cfg.paths.out = o.clone();
    }
    if let Some(k) = common.seeds {
        cfg.flow.seeds = k;
    }
    if common.text_coupled {
        cfg.train.stage = Stage::S1TextCoupled;
    }
    if common.no_cache {
        cfg.flow.cached = false;
    }
    if common.no_compress {
        cfg.flow.compress = false;
    }
    if let Some(r) = &common.resolutions {
        cfg.bench.resolutions = r.clone();
    }
    if let Some(t) = common.steps {
        cfg.flow.steps = t;
        cfg.bench.steps = t;
    }
    if let Some(c) = &common.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    if let Some(d) = &common.data {
        cfg.paths.data = Some(d.clone());
    }
    if cmd == Command::Refine {
        cfg.train.stage = Stage::S2;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(cfg: &RunConfig, cmd: Command, prec: Precision) -> Result<()> {
    let m = Manifest {
        command: cmd.name(),
        version: env!("CARGO_PKG_VERSION"),
        precision: prec,
        config: cfg,
    };
    let text = toml::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
    write(&cfg.paths.out.join("manifests").join(format!("{}.toml", cmd.name())), &text)
}

fn load_split(cfg: &RunConfig, split: &str) -> Result<Vec<Quadruple>> {
    let items = synthbench::load_split(&cfg.split_dir(split)?)?;
    if items.is_empty() {
        return Err(Error::config("paths.data", format!("split {split} is empty")));
    }
    Ok(items)
}

fn load_model<F: Real>(path: &Path, cfg: &RunConfig) -> Result<Model<F>> {
    let m = checkpoint::load::<F>(path)?;
    if m.cfg.image_hw != cfg.data.hw {
        return Err(Error::config(
            "paths.checkpoint",
            format!("checkpoint expects {:?} images, data.hw is {:?}", m.cfg.image_hw, cfg.data.hw),
        ));
    }
    Ok(m)
}

/// Held-out split: same recipe, derived seed, a quarter of the items.
fn test_data(cfg: &RunConfig) -> synthbench::BenchmarkConfig {
    synthbench::BenchmarkConfig {
        per_category: cfg.data.per_category.div_ceil(4),
        seed: rng::derive(cfg.data.seed, 0x74657374),
        ..cfg.data.clone()
    }
}

fn run<F: Real>(cmd: Command, cfg: &RunConfig) -> Result<()> {
    let exec = Exec::best();
    let out = &cfg.paths.out;
    let reports = out.join("reports");
    match cmd {
        Command::GenData => {
            let dir = cfg.data_dir();
            let train = synthbench::make_benchmark(&cfg.data, &dir.join("train"))?;
            let test = synthbench::make_benchmark(&test_data(cfg), &dir.join("test"))?;
            let rate = calibrate_tau(&train, cfg.flow.tau);
            let text = format!(
                "train = {}\ntest = {}\ntau = {}\nground_truth_pass_rate = {rate:.4}\n",
                train.len(),
                test.len(),
                cfg.flow.tau
            );
            write(&reports.join("gen_data.toml"), &text)?;
        }
        Command::Train => {
            let coupled = cfg.train.stage == Stage::S1TextCoupled;
            let items = load_split(cfg, "train")?;
            let prepared = trainer::prepare_items::<F>(&items, &cfg.model, cfg.flow.compress, coupled)?;
            let (model, log) = trainer::train_stage1(&prepared, &cfg.model, &cfg.train, exec)?;
            let name = if coupled { "stage1_coupled" } else { "stage1" };
            write(&reports.join(format!("{name}_loss.csv")), &trainer::log_csv(&log))?;
            checkpoint::save(&model, &out.join("checkpoints").join(format!("{name}.fel")), serde_json::to_value(&cfg.train)?)?;
        }
        Command::Refine => {
            let base = load_model::<F>(cfg.checkpoint()?, cfg)?;
            let items = load_split(cfg, "train")?;
            let subset = trainer::refine_subset(&items, cfg.train.refine_items);
            let data = trainer::build_contrastive_dataset(
                &base,
                &subset,
                cfg.flow.compress,
                cfg.train.r_candidates,
                cfg.train.seed,
                cfg.train.lambda,
                &linear_schedule(cfg.flow.steps)?,
                exec,
            )?;
            let mut csv = String::from("item,best,worst,score_best,score_worst\n");
            for it in &data.items {
                let r = &it.ranking;
                let _ = writeln!(csv, "{},{},{},{:.6},{:.6}", subset[it.index].id, r.best, r.worst, r.scores[r.best], r.scores[r.worst]);
            }
            write(&reports.join("contrastive.csv"), &csv)?;
            let (model, log) = trainer::train_stage2(&base, &data, &cfg.train, exec)?;
            write(&reports.join("refine_loss.csv"), &trainer::log_csv(&log))?;
            checkpoint::save(&model, &out.join("checkpoints").join("refined.fel"), serde_json::to_value(&cfg.train)?)?;
        }
        Command::Sample => {
            let model = load_model::<F>(cfg.checkpoint()?, cfg)?;
            let items = load_split(cfg, &cfg.paths.split)?;
            let jobs: Vec<(usize, u64)> = (0..items.len())
                .flat_map(|i| (0..cfg.flow.seeds as u64).map(move |s| (i, s)))
                .collect();
            let images = exec.try_map(&jobs, |&(i, s)| trainer::generate_one(&model, &items[i], cfg.flow.base_seed + s, &cfg.flow))?;
            let dir = out.join("images");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for ((i, s), img) in jobs.iter().zip(&images) {
                img.save_png(&dir.join(format!("{}_s{}.png", items[*i].id, cfg.flow.base_seed + s)))?;
            }
        }
        Command::Eval => {
            let model = load_model::<F>(cfg.checkpoint()?, cfg)?;
            let items = load_split(cfg, &cfg.paths.split)?;
            let report = trainer::evaluate(&model, &items, &cfg.flow, exec)?;
            write(&reports.join("eval.csv"), &report.to_csv())?;
            write(&reports.join("eval_summary.toml"), &report.summary()?)?;
        }
        Command::BenchScaling => {
            let rows = bench_scaling(&cfg.model, &cfg.bench);
            write(&reports.join("bench_scaling.csv"), &bench_csv(&rows))?;
            let mut summary = String::new();
            for v in BenchVariant::ALL {
                let pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter(|r| r.config == v)
                    .filter_map(|r| Some((r.tokens as f64, r.ms_median?)))
                    .collect();
                if let Some(s) = loglog_slope(&pts) {
                    let _ = writeln!(summary, "{}_loglog_slope = {s:.4}", v.name().replace('+', "_"));
                }
            }
            write(&reports.join("bench_summary.toml"), &summary)?;
            if let Some(r) = rows.iter().find(|r| r.error.is_some()) {
                return Err(Error::Generation(format!(
                    "bench {} at {}: {}",
                    r.config.name(),
                    r.res,
                    r.error.as_deref().unwrap_or_default()
                )));
            }
        }
        Command::CacheSim => {
            let model = load_model::<F>(cfg.checkpoint()?, cfg)?;
            let items = load_split(cfg, &cfg.paths.split)?;
            let seq = sequence_for::<F>(&items[0], &model.cfg, cfg.flow.compress, null_text())?;
            let maps = feature_similarity_map(&model, &seq, cfg.flow.base_seed, &linear_schedule(cfg.flow.steps)?)?;
            let mut summary = String::new();
            for (role, _) in &maps.roles {
                let name = format!("{role:?}").to_lowercase();
                if let Some(csv) = maps.to_csv(*role) {
                    write(&reports.join(format!("cache_sim_{name}.csv")), &csv)?;
                }
                let _ = writeln!(summary, "{name}_min_similarity = {:.6}", maps.min(*role).unwrap_or(f64::NAN));
            }
            write(&reports.join("cache_sim_summary.toml"), &summary)?;
        }
        Command::TextDominance => {
            let coupled = load_model::<F>(cfg.checkpoint()?, cfg)?;
            let other = cfg
                .paths
                .checkpoint_b
                .as_deref()
                .ok_or_else(|| Error::config("paths.checkpoint_b", "not set"))?;
            if !other.is_file() {
                return Err(Error::config("paths.checkpoint_b", format!("{} does not exist", other.display())));
            }
            let decoupled = load_model::<F>(other, cfg)?;
            let items = load_split(cfg, &cfg.paths.split)?;
            let mut csv = String::from("model,text,category,count,oracle_sr,sr,cds\n");
            for (name, model) in [("coupled", &coupled), ("decoupled", &decoupled)] {
                for (tname, text) in [("pseudo", EvalText::Pseudo), ("null", EvalText::Null)] {
                    let opts = EvalOptions { text, ..cfg.flow };
                    let rep = trainer::evaluate(model, &items, &opts, exec)?;
                    for c in Category::ALL {
                        if let Ok(a) = rep.category(c) {
                            let _ = writeln!(csv, "{name},{tname},{},{},{:.4},{:.4},{:.6}", c.name(), a.count, a.oracle_sr, a.sr, a.cds);
                        }
                    }
                }
            }
            write(&reports.join("text_dominance.csv"), &csv)?;
        }
        Command::Ablation => {
            let train = load_split(cfg, "train")?;
            let test = load_split(cfg, &cfg.paths.split)?;
            experiments::run_ablation(cfg, &AblationLadder::standard(), &train, &test, Some(out), exec)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cmd = cli.cmd;
    let result = (|| -> Result<()> {
        let prec = precision()?;
        let cfg = resolve(&cli.common, cmd)?;
        if cmd == Command::Ablation && prec != Precision::F32 {
            return Err(Error::config("FEL_PRECISION", "the ablation ladder runs in f32"));
        }
        fs::create_dir_all(&cfg.paths.out).map_err(|e| Error::io(&cfg.paths.out, e))?;
        match prec {
            Precision::F32 => run::<f32>(cmd, &cfg)?,
            Precision::F64check => run::<f64>(cmd, &cfg)?,
        }
        write_manifest(&cfg, cmd, prec)
    })();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fel {}: {e}", cmd.name());
            match e {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}
