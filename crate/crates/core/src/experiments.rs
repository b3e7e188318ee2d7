//! Ablation ladder: text-coupled base, then text decoupling, refinement,
//! condition compression and condition reuse, one toggle per rung.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::linear_schedule;
use crate::metrics::{attention_flops, EvalReport};
use crate::model::checkpoint;
use crate::model::Model;
use crate::par::Exec;
use crate::synthbench::Quadruple;
use crate::trainer::{self, EvalOptions, EvalText, Stage, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rung {
    Mb,
    M1,
    M2,
    M3,
    M4,
}

impl Rung {
    pub const ALL: [Rung; 5] = [Rung::Mb, Rung::M1, Rung::M2, Rung::M3, Rung::M4];

    pub fn name(self) -> &'static str {
        match self {
            Rung::Mb => "Mb",
            Rung::M1 => "M1",
            Rung::M2 => "M2",
            Rung::M3 => "M3",
            Rung::M4 => "M4",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.name().eq_ignore_ascii_case(s))
    }
}

/// Toggles defining one rung.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RungSpec {
    pub rung: Rung,
    pub text_coupled: bool,
    pub refine: bool,
    pub compress: bool,
    pub cache: bool,
}

impl RungSpec {
    fn toggles(&self) -> [bool; 4] {
        [self.text_coupled, self.refine, self.compress, self.cache]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationLadder {
    pub rungs: Vec<RungSpec>,
}

impl AblationLadder {
    pub fn standard() -> Self {
        let r = |rung, text_coupled, refine, compress, cache| RungSpec {
            rung,
            text_coupled,
            refine,
            compress,
            cache,
        };
        Self {
            rungs: vec![
                r(Rung::Mb, true, false, false, false),
                r(Rung::M1, false, false, false, false),
                r(Rung::M2, false, true, false, false),
                r(Rung::M3, false, true, true, false),
                r(Rung::M4, false, true, true, true),
            ],
        }
    }

    /// Only the listed rungs, in ladder order (must be contiguous to validate).
    pub fn subset(rungs: &[Rung]) -> Self {
        Self {
            rungs: Self::standard().rungs.into_iter().filter(|s| rungs.contains(&s.rung)).collect(),
        }
    }

    /// Every rung differs from its predecessor by exactly one toggle.
    pub fn validate(&self) -> Result<()> {
        for w in self.rungs.windows(2) {
            let changed = w[0].toggles().iter().zip(w[1].toggles()).filter(|(a, b)| **a != *b).count();
            if changed != 1 {
                return Err(Error::invalid(format!(
                    "{} -> {} changes {changed} toggles",
                    w[0].rung.name(),
                    w[1].rung.name()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RungRow {
    pub rung: Rung,
    pub ds: f64,
    pub cds: f64,
    pub var: f64,
    pub sr: f64,
    pub oracle_sr: f64,
    /// Median wall-clock per generated sample.
    pub ms: f64,
    /// Attention FLOPs per generated sample (all steps).
    pub flops: u64,
    pub error: Option<String>,
}

pub const LADDER_HEADER: &str = "# rung: Mb text-coupled base; M1 +text decoupling; M2 +refinement; M3 +condition compression; M4 +condition reuse\n# ds: masked RMSE outside the edit region (lower is better); cds: direction score; var: per-item seed variance of cds; sr: fraction with cds >= tau; oracle_sr: synthetic oracle success; ms: median ms per sample; flops: attention FLOPs per sample\n";

pub fn ladder_csv(rows: &[RungRow]) -> String {
    let mut s = String::from(LADDER_HEADER);
    s.push_str("rung,ds,cds,var,sr,oracle_sr,ms,flops,error\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6e},{:.4},{:.4},{:.2},{},{}",
            r.rung.name(),
            r.ds,
            r.cds,
            r.var,
            r.sr,
            r.oracle_sr,
            r.ms,
            r.flops,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    s
}

/// Attention FLOPs of one full sample for `model` on `q`.
pub fn sample_flops(model: &Model<f32>, q: &Quadruple, opts: &EvalOptions) -> Result<u64> {
    let seq = crate::conditioning::sequence_for::<f32>(q, &model.cfg, opts.compress, crate::conditioning::null_text())?;
    let c = &model.cfg;
    let per_step = attention_flops(
        seq.len() as u64,
        seq.live_len() as u64,
        c.head_dim() as u64,
        c.n_heads as u64,
        c.n_layers as u64,
        opts.cached,
    );
    let build = if opts.cached {
        attention_flops(seq.cond_len() as u64, seq.cond_len() as u64, c.head_dim() as u64, c.n_heads as u64, c.n_layers as u64, false)
    } else {
        0
    };
    Ok(per_step * opts.steps as u64 + build)
}

/// Median single-threaded wall-clock (ms) of one sample over `probe`.
pub fn sample_ms(model: &Model<f32>, probe: &[Quadruple], opts: &EvalOptions) -> Result<f64> {
    if probe.is_empty() {
        return Err(Error::invalid("empty timing probe"));
    }
    trainer::generate_one(model, &probe[0], opts.base_seed, opts)?;
    let mut ms = Vec::with_capacity(probe.len());
    for q in probe {
        let t0 = Instant::now();
        trainer::generate_one(model, q, opts.base_seed, opts)?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    ms.sort_by(f64::total_cmp);
    Ok(ms[ms.len() / 2])
}

/// Outputs of a ladder run.
#[derive(Debug, Clone)]
pub struct LadderRun {
    pub rows: Vec<RungRow>,
    pub reports: Vec<(Rung, EvalReport)>,
    pub models: HashMap<Rung, Model<f32>>,
}

/// Trains and evaluates every rung of `ladder` with shared seeds. Models
/// are shared between rungs whose training toggles agree. Evaluation uses
/// null text (visual prompt only). A failed rung is recorded and the
/// ladder continues.
pub fn run_ablation(
    base: &RunConfig,
    ladder: &AblationLadder,
    train_items: &[Quadruple],
    eval_items: &[Quadruple],
    out: Option<&Path>,
    exec: Exec,
) -> Result<LadderRun> {
    ladder.validate()?;
    base.validate()?;
    if train_items.is_empty() || eval_items.is_empty() {
        return Err(Error::invalid("ladder needs training and evaluation items"));
    }
    let mut stage1: HashMap<(bool, bool), Model<f32>> = HashMap::new();
    let mut refined: HashMap<bool, Model<f32>> = HashMap::new();
    let mut run = LadderRun {
        rows: Vec::new(),
        reports: Vec::new(),
        models: HashMap::new(),
    };
    if let Some(dir) = out {
        for sub in ["checkpoints", "reports"] {
            fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
        }
    }
    for spec in &ladder.rungs {
        let opts = EvalOptions {
            compress: spec.compress,
            cached: spec.cache,
            text: EvalText::Null,
            ..base.flow
        };
        let result = (|| -> Result<(Model<f32>, EvalReport, f64, u64)> {
            let key = (spec.text_coupled, spec.compress);
            if let Entry::Vacant(e) = stage1.entry(key) {
                let cfg = TrainConfig {
                    stage: if spec.text_coupled { Stage::S1TextCoupled } else { Stage::S1 },
                    ..base.train.clone()
                };
                let items = trainer::prepare_items::<f32>(train_items, &base.model, spec.compress, spec.text_coupled)?;
                let (m, log) = trainer::train_stage1(&items, &base.model, &cfg, exec)?;
                if let Some(dir) = out {
                    let tag = format!("s1_{}{}", if spec.text_coupled { "coupled" } else { "decoupled" }, if spec.compress { "_compressed" } else { "" });
                    write(&dir.join("reports").join(format!("{tag}_loss.csv")), &trainer::log_csv(&log))?;
                }
                e.insert(m);
            }
            let model = if spec.refine {
                if let Entry::Vacant(e) = refined.entry(spec.compress) {
                    let s1 = &stage1[&key];
                    let schedule = linear_schedule(base.flow.steps)?;
                    let subset = trainer::refine_subset(train_items, base.train.refine_items);
                    let data = trainer::build_contrastive_dataset(
                        s1,
                        &subset,
                        spec.compress,
                        base.train.r_candidates,
                        base.train.seed,
                        base.train.lambda,
                        &schedule,
                        exec,
                    )?;
                    let cfg = TrainConfig {
                        stage: Stage::S2,
                        ..base.train.clone()
                    };
                    let (m, log) = trainer::train_stage2(s1, &data, &cfg, exec)?;
                    if let Some(dir) = out {
                        let tag = if spec.compress { "s2_compressed" } else { "s2" };
                        write(&dir.join("reports").join(format!("{tag}_loss.csv")), &trainer::log_csv(&log))?;
                    }
                    e.insert(m);
                }
                refined[&spec.compress].clone()
            } else {
                stage1[&key].clone()
            };
            let report = trainer::evaluate(&model, eval_items, &opts, exec)?;
            let probe = &eval_items[..eval_items.len().min(8)];
            let ms = sample_ms(&model, probe, &opts)?;
            let flops = sample_flops(&model, &eval_items[0], &opts)?;
            Ok((model, report, ms, flops))
        })();
        match result {
            Ok((model, report, ms, flops)) => {
                let a = report.aggregate()?;
                if let Some(dir) = out {
                    checkpoint::save(&model, &dir.join("checkpoints").join(format!("{}.fel", spec.rung.name())), serde_json::to_value(spec)?)?;
                    write(&dir.join("reports").join(format!("{}_eval.csv", spec.rung.name())), &report.to_csv())?;
                }
                run.rows.push(RungRow {
                    rung: spec.rung,
                    ds: a.ds,
                    cds: a.cds,
                    var: a.var,
                    sr: a.sr,
                    oracle_sr: a.oracle_sr,
                    ms,
                    flops,
                    error: None,
                });
                run.reports.push((spec.rung, report));
                run.models.insert(spec.rung, model);
            }
            Err(e) => {
                log::warn!("rung {} failed: {e}", spec.rung.name());
                run.rows.push(RungRow {
                    rung: spec.rung,
                    ds: f64::NAN,
                    cds: f64::NAN,
                    var: f64::NAN,
                    sr: f64::NAN,
                    oracle_sr: f64::NAN,
                    ms: f64::NAN,
                    flops: 0,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    if let Some(dir) = out {
        write(&dir.join("reports").join("ablation.csv"), &ladder_csv(&run.rows))?;
    }
    Ok(run)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
