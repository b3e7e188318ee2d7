//! Progressive training: stage-1 flow matching (text-decoupled or
//! text-coupled), candidate generation and ranking, and stage-2 best–worst
//! contrastive refinement of LoRA adapters.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::cache::sample_edit;
use crate::conditioning::{null_text, pseudo_text_ids, sequence_for, TextCondition};
use crate::error::{Error, Result};
use crate::flow::{self, contrastive_velocity, interpolate, linear_schedule, oracle_velocity, ContrastivePair, Schedule};
use crate::image::{decode_latent, encode_latent, Image};
use crate::metrics::{direction_score, EvalReport, SampleEval};
use crate::model::{is_lora, FwdOpts, Model, ModelConfig, TokenSequence};
use crate::par::Exec;
use crate::rng::{self, SplitMix64};
use crate::synthbench::{oracle_rmse, Quadruple};
use crate::tensor::{DTensor, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    S1,
    S1TextCoupled,
    S2,
}

/// Which clean latent anchors `z_t` in the contrastive objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    #[default]
    Best,
    Worst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub stage: Stage,
    /// Candidates per item for refinement.
    pub r_candidates: usize,
    pub lambda: f64,
    pub anchor: Anchor,
    /// Training items used to build the contrastive dataset (0 = all).
    pub refine_items: usize,
    /// Iterations of stage 2.
    pub refine_iterations: usize,
    /// Learning rate of stage 2.
    pub refine_lr: f64,
    pub log_every: usize,
    /// Cosine decay of the learning rate to zero over `iterations`.
    pub cosine_decay: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 8000,
            batch_size: 8,
            lr: 2e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            stage: Stage::S1,
            r_candidates: 4,
            lambda: 0.2,
            anchor: Anchor::Best,
            refine_items: 64,
            refine_iterations: 200,
            refine_lr: 1e-4,
            log_every: 1,
            cosine_decay: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::config(format!("train.{k}"), m));
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if !(self.lr > 0.0) {
            return bad("lr", "must be > 0");
        }
        if !(self.refine_lr > 0.0) {
            return bad("refine_lr", "must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1", "betas must be in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be > 0");
        }
        if !(self.lambda > 0.0) {
            return bad("lambda", "must be > 0");
        }
        if self.stage == Stage::S2 && self.r_candidates < 2 {
            return bad("r_candidates", "refinement needs at least 2 candidates");
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam with bias correction.
#[derive(Debug, Clone)]
pub struct AdamW<F: Real> {
    m: Vec<DTensor<F>>,
    v: Vec<DTensor<F>>,
    t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<F: Real> AdamW<F> {
    pub fn new(shapes: &[&DTensor<F>], cfg: &TrainConfig) -> Self {
        Self {
            m: shapes.iter().map(|s| DTensor::zeros(s.shape())).collect(),
            v: shapes.iter().map(|s| DTensor::zeros(s.shape())).collect(),
            t: 0,
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of `params` (same order as at construction).
    pub fn step(&mut self, params: &mut [&mut DTensor<F>], grads: &[DTensor<F>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2) = (self.beta1, self.beta2);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j].f64();
                let mj = b1 * m[j].f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].f64() + (1.0 - b2) * gj * gj;
                m[j] = F::c(mj);
                v[j] = F::c(vj);
                let upd = (mj / bc1) / ((vj / bc2).sqrt() + self.eps);
                let wj = w.f64();
                *w = F::c(wj - self.lr * (upd + self.weight_decay * wj));
            }
        }
    }
}

/// One training example: sequence with a zero TARGET block and the clean
/// TARGET latent.
#[derive(Debug, Clone)]
pub struct TrainItem<F: Real> {
    pub seq: TokenSequence<F>,
    pub z0: DTensor<F>,
}

/// Text condition for an item under a stage.
pub fn text_for(q: &Quadruple, coupled: bool, vocab: usize) -> Result<TextCondition> {
    if coupled {
        pseudo_text_ids(q.edit.instruction_ids(), vocab)
    } else {
        Ok(null_text())
    }
}

pub fn prepare_items<F: Real>(
    items: &[Quadruple],
    cfg: &ModelConfig,
    compress: bool,
    coupled: bool,
) -> Result<Vec<TrainItem<F>>> {
    items
        .iter()
        .map(|q| {
            let seq = sequence_for(q, cfg, compress, text_for(q, coupled, cfg.text_vocab)?)?;
            let (z0, _) = encode_latent(&q.b_prime, cfg.patch_size)?;
            Ok(TrainItem { seq, z0 })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("step,loss,lr,wall_ms\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.8},{:e},{:.1}", r.step, r.loss, r.lr, r.wall_ms);
    }
    s
}

/// Per-example regression target and model input at one step.
struct Example<'a, F: Real> {
    seq: &'a TokenSequence<F>,
    z_t: DTensor<F>,
    target: DTensor<F>,
    t: f64,
}

/// Minimizes the mean per-example MSE over `iterations` steps. `make`
/// builds the example for `(step, slot)`; parameters accepted by
/// `trainable` are updated.
fn optimize<'a, F: Real>(
    model: &mut Model<F>,
    cfg: &TrainConfig,
    trainable: impl Fn(&str) -> bool + Sync,
    make: impl Fn(usize, usize) -> Result<Example<'a, F>> + Sync,
    exec: Exec,
) -> Result<Vec<LogRow>> {
    let names: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).filter(|k| trainable(k)).collect();
    if names.is_empty() {
        return Err(Error::invalid("no trainable parameters"));
    }
    let mut opt = {
        let shapes: Vec<&DTensor<F>> = names.iter().map(|n| model.params.get(n).expect("listed")).collect();
        AdamW::new(&shapes, cfg)
    };
    let start = Instant::now();
    let mut log = Vec::with_capacity(cfg.iterations);
    for step in 0..cfg.iterations {
        let per_item = exec.try_map_range(cfg.batch_size, |slot| -> Result<(f64, Vec<DTensor<F>>)> {
            let ex = make(step, slot)?;
            if !ex.z_t.is_finite() || !ex.target.is_finite() {
                return Err(Error::Diverged {
                    step,
                    msg: "non-finite regression input".into(),
                });
            }
            let mut g = Graph::new();
            let p = model.bind(&mut g, &trainable);
            let seq = ex.seq.with_target(&ex.z_t)?;
            let out = model.forward_graph(&mut g, &p, &seq, ex.t, FwdOpts::default())?;
            let loss = flow::regression_loss(&mut g, out.velocity, &ex.target)?;
            let value = g.value(loss).data()[0].f64();
            let mut grads = g.backward(loss)?;
            let gs = names
                .iter()
                .map(|n| {
                    let v = p.get(n)?;
                    Ok(grads.take(v).unwrap_or_else(|| DTensor::zeros(g.value(v).shape())))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((value, gs))
        })?;
        let losses: Vec<f64> = per_item.iter().map(|(l, _)| *l).collect();
        let loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("loss = {loss}"),
            });
        }
        let mut total = crate::autodiff::sum_in_order(per_item.into_iter().map(|(_, g)| g).collect())
            .expect("batch is non-empty");
        let inv = F::c(1.0 / cfg.batch_size as f64);
        for g in &mut total {
            for x in g.data_mut() {
                *x *= inv;
            }
        }
        if total.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                msg: "non-finite gradient".into(),
            });
        }
        let lr = if cfg.cosine_decay {
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.iterations as f64).cos())
        } else {
            cfg.lr
        };
        opt.lr = lr;
        {
            let mut refs: Vec<&mut DTensor<F>> = Vec::with_capacity(names.len());
            let mut rest: Vec<(&String, &mut DTensor<F>)> = model.params.iter_mut().filter(|(k, _)| trainable(k)).collect();
            for n in &names {
                let i = rest.iter().position(|(k, _)| *k == n).expect("listed");
                refs.push(rest.swap_remove(i).1);
            }
            opt.step(&mut refs, &total);
        }
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.iterations) {
            log.push(LogRow {
                step,
                loss,
                lr,
                wall_ms: start.elapsed().as_secs_f64() * 1e3,
            });
        }
    }
    if !model.params.all_finite() {
        return Err(Error::Diverged {
            step: cfg.iterations,
            msg: "non-finite weights".into(),
        });
    }
    Ok(log)
}

fn step_rng(seed: u64, step: usize, slot: usize, label: u64) -> SplitMix64 {
    SplitMix64::stream(rng::derive(rng::derive(seed, step as u64), slot as u64), label)
}

/// Stage 1 from random initialization: `t ~ U(0,1)`, `z_1 ~ N(0, I)`,
/// regress `z_1 − z_0` at `z_t`. Text conditioning is whatever `items`
/// carry (null for the decoupled stage, pseudo text for the coupled one).
pub fn train_stage1<F: Real>(
    items: &[TrainItem<F>],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Model<F>, Vec<LogRow>)> {
    cfg.validate()?;
    if cfg.stage == Stage::S2 {
        return Err(Error::config("train.stage", "stage 1 training called with stage s2"));
    }
    let coupled = cfg.stage == Stage::S1TextCoupled;
    if items.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    if items.iter().any(|it| it.seq.text.is_null() == coupled) {
        return Err(Error::invalid("item text conditioning does not match the stage"));
    }
    let mut model = Model::init(&ModelConfig {
        init_seed: cfg.seed,
        ..model_cfg.clone()
    })?;
    let make = |step: usize, slot: usize| -> Result<Example<'_, F>> {
        let mut r = step_rng(cfg.seed, step, slot, 0x7374616765);
        let item = &items[r.below(items.len() as u64) as usize];
        let t = r.next_open01();
        let z1 = flow::noise::<F>(item.z0.shape(), r.next_u64());
        Ok(Example {
            seq: &item.seq,
            z_t: interpolate(&item.z0, &z1, t)?,
            target: oracle_velocity(&item.z0, &z1)?,
            t,
        })
    };
    let log = optimize(&mut model, cfg, |_| true, make, exec)?;
    Ok((model, log))
}

/// `R` samples with seeds `base_seed..base_seed+R`, decoded to images.
pub fn generate_candidates<F: Real>(
    model: &Model<F>,
    seq: &TokenSequence<F>,
    r: usize,
    base_seed: u64,
    schedule: &Schedule,
    cached: bool,
) -> Result<Vec<Image>> {
    (0..r as u64)
        .map(|i| {
            let z = sample_edit(model, seq, base_seed + i, schedule, cached)?;
            decode_latent(&z, seq.target_grid, model.cfg.patch_size)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    pub best: usize,
    pub worst: usize,
    pub scores: Vec<f64>,
}

/// Best = highest direction score (ties: lower oracle RMSE, then lower
/// index); worst = lowest score (ties: higher oracle RMSE, then lower index).
pub fn rank_candidates(q: &Quadruple, candidates: &[Image]) -> Result<Ranking> {
    if candidates.len() < 2 {
        return Err(Error::invalid("ranking needs at least 2 candidates"));
    }
    if candidates.iter().all(|c| c == &candidates[0]) {
        return Err(Error::Degenerate("degenerate candidate set: all candidates identical".into()));
    }
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| direction_score(&q.a, &q.a_prime, &q.b, c).value)
        .collect();
    if scores.iter().all(|s| !s.is_finite()) {
        return Err(Error::NonFinite("all candidate scores".into()));
    }
    let errs: Vec<f64> = candidates.iter().map(|c| oracle_rmse(q, c)).collect();
    let key = |i: usize| if scores[i].is_finite() { scores[i] } else { f64::NEG_INFINITY };
    let mut best = 0;
    let mut worst = 0;
    for i in 1..candidates.len() {
        let (s, b, w) = (key(i), key(best), key(worst));
        if s > b || (s == b && errs[i] < errs[best]) {
            best = i;
        }
        if s < w || (s == w && errs[i] > errs[worst]) {
            worst = i;
        }
    }
    if best == worst {
        return Err(Error::Degenerate("degenerate candidate set: best equals worst".into()));
    }
    Ok(Ranking { best, worst, scores })
}

#[derive(Debug, Clone)]
pub struct ContrastiveItem<F: Real> {
    pub index: usize,
    pub seq: TokenSequence<F>,
    pub pair: ContrastivePair<F>,
    pub ranking: Ranking,
}

#[derive(Debug, Clone)]
pub struct ContrastiveDataset<F: Real> {
    pub items: Vec<ContrastiveItem<F>>,
    pub skipped: usize,
}

/// `n` items evenly strided over `items` (all of them when `n` is 0 or
/// covers the list), so every category contributes to refinement.
pub fn refine_subset(items: &[Quadruple], n: usize) -> Vec<Quadruple> {
    if n == 0 || n >= items.len() {
        return items.to_vec();
    }
    (0..n).map(|k| items[k * items.len() / n].clone()).collect()
}

/// Generates, ranks and encodes best/worst candidates for every item; each
/// item gets its own shared noise draw.
#[allow(clippy::too_many_arguments)]
pub fn build_contrastive_dataset<F: Real>(
    model: &Model<F>,
    items: &[Quadruple],
    compress: bool,
    r: usize,
    seed: u64,
    lambda: f64,
    schedule: &Schedule,
    exec: Exec,
) -> Result<ContrastiveDataset<F>> {
    if items.is_empty() {
        return Err(Error::invalid("empty item list"));
    }
    let cached = model.cfg.cond_attention.is_causal();
    let built = exec.try_map_range(items.len(), |i| -> Result<Option<ContrastiveItem<F>>> {
        let q = &items[i];
        let seq = sequence_for::<F>(q, &model.cfg, compress, null_text())?;
        let base = rng::derive(seed, i as u64);
        let cands = generate_candidates(model, &seq, r, base, schedule, cached)?;
        let ranking = match rank_candidates(q, &cands) {
            Ok(rk) if rk.scores[rk.best] > rk.scores[rk.worst] => rk,
            Ok(_) | Err(Error::Degenerate(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        let p = model.cfg.patch_size;
        let (zb, _) = encode_latent::<F>(&cands[ranking.best], p)?;
        let (zw, _) = encode_latent::<F>(&cands[ranking.worst], p)?;
        let noise = flow::noise::<F>(zb.shape(), rng::derive(seed ^ 0x6e6f697365, i as u64));
        Ok(Some(ContrastiveItem {
            index: i,
            seq,
            pair: ContrastivePair::new(zb, zw, noise, lambda)?,
            ranking,
        }))
    })?;
    let skipped = built.iter().filter(|b| b.is_none()).count();
    if skipped * 2 > items.len() {
        return Err(Error::Degenerate(format!(
            "{skipped} of {} items had degenerate candidate sets",
            items.len()
        )));
    }
    if skipped > 0 {
        log::info!("contrastive dataset: skipped {skipped} degenerate item(s)");
    }
    Ok(ContrastiveDataset {
        items: built.into_iter().flatten().collect(),
        skipped,
    })
}

/// Stage 2: frozen base, fresh LoRA adapters on every attention projection,
/// regress `(z0_best − z0_worst)/λ` at `z_t` built from the anchor latent
/// and the pair's shared noise. Text is null throughout. Runs
/// `refine_iterations` steps at `refine_lr`.
pub fn train_stage2<F: Real>(
    base: &Model<F>,
    data: &ContrastiveDataset<F>,
    cfg: &TrainConfig,
    exec: Exec,
) -> Result<(Model<F>, Vec<LogRow>)> {
    cfg.validate()?;
    let cfg = &TrainConfig {
        lr: cfg.refine_lr,
        iterations: cfg.refine_iterations,
        ..cfg.clone()
    };
    if data.items.is_empty() {
        return Err(Error::invalid("empty contrastive dataset"));
    }
    if data.items.iter().any(|it| !it.seq.text.is_null()) {
        return Err(Error::invalid("refinement runs with null text"));
    }
    let mut model = base.clone();
    if !model.has_lora() {
        model.attach_lora(rng::derive(cfg.seed, 0x6c6f7261));
    }
    let frozen = model.params.checksum(|k| !is_lora(k));
    let make = |step: usize, slot: usize| -> Result<Example<'_, F>> {
        let mut r = step_rng(cfg.seed, step, slot, 0x7265666e);
        let item = &data.items[r.below(data.items.len() as u64) as usize];
        let t = r.next_open01();
        let mut pair = item.pair.clone();
        pair.lambda = cfg.lambda;
        let anchor = match cfg.anchor {
            Anchor::Best => &pair.z0_best,
            Anchor::Worst => &pair.z0_worst,
        };
        Ok(Example {
            seq: &item.seq,
            z_t: pair.state(anchor, t)?,
            target: contrastive_velocity(&pair)?,
            t,
        })
    };
    let log = optimize(&mut model, cfg, is_lora, make, exec)?;
    if model.params.checksum(|k| !is_lora(k)) != frozen {
        return Err(Error::invalid("refinement modified frozen base parameters"));
    }
    Ok((model, log))
}

/// How the text slots are filled at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalText {
    Null,
    Pseudo,
}

/// Sampling and evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    /// Seeds per item at evaluation.
    pub seeds: usize,
    pub base_seed: u64,
    /// Sampler steps T.
    pub steps: usize,
    /// Compressed conditions (training and sampling).
    pub compress: bool,
    /// Reuse condition K/V across steps.
    pub cached: bool,
    pub text: EvalText,
    pub tau: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            seeds: 3,
            base_seed: 1000,
            steps: 20,
            compress: true,
            cached: true,
            text: EvalText::Null,
            tau: crate::metrics::TAU,
        }
    }
}

/// Generated B' for one item and seed.
pub fn generate_one<F: Real>(model: &Model<F>, q: &Quadruple, seed: u64, opts: &EvalOptions) -> Result<Image> {
    let text = text_for(q, opts.text == EvalText::Pseudo, model.cfg.text_vocab)?;
    let seq = sequence_for::<F>(q, &model.cfg, opts.compress, text)?;
    let z = sample_edit(model, &seq, seed, &linear_schedule(opts.steps)?, opts.cached)?;
    decode_latent(&z, seq.target_grid, model.cfg.patch_size)
}

/// Samples every item under `opts.seeds` seeds and scores the outputs.
pub fn evaluate<F: Real>(model: &Model<F>, items: &[Quadruple], opts: &EvalOptions, exec: Exec) -> Result<EvalReport> {
    if opts.seeds == 0 {
        return Err(Error::config("eval.seeds", "must be >= 1"));
    }
    let jobs: Vec<(usize, u64)> = (0..items.len())
        .flat_map(|i| (0..opts.seeds as u64).map(move |s| (i, s)))
        .collect();
    let samples = exec.try_map(&jobs, |&(i, s)| {
        let seed = opts.base_seed + s;
        let out = generate_one(model, &items[i], seed, opts)?;
        SampleEval::new(&items[i], seed, &out, opts.tau)
    })?;
    Ok(EvalReport { tau: opts.tau, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthbench::{make_quadruple, EditParams, EditSpec};

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = DTensor::<f64>::from_f64(&[2], &[1.0, -1.0]).unwrap();
        let mut opt = AdamW::new(&[&p], &cfg);
        let g = DTensor::from_f64(&[2], &[0.5, -3.0]).unwrap();
        opt.step(&mut [&mut p], &[g]);
        assert!((p.data()[0] - 0.9).abs() < 1e-6);
        assert!((p.data()[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn ranking_prefers_ground_truth() {
        let q = make_quadruple(5, &EditSpec::single(EditParams::Background { color: 4 }), (16, 16)).unwrap();
        let r = rank_candidates(&q, &[q.b.clone(), q.b_prime.clone()]).unwrap();
        assert_eq!((r.best, r.worst), (1, 0));
        let r2 = rank_candidates(&q, &[q.b_prime.clone(), q.b.clone()]).unwrap();
        assert_eq!((r2.best, r2.worst), (0, 1));
        assert!(matches!(
            rank_candidates(&q, &[q.b.clone(), q.b.clone()]),
            Err(Error::Degenerate(_))
        ));
    }
}
