//! Deterministic edit metrics, the analytic attention FLOP model and the
//! time/memory scaling harness.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::sample_edit;
use crate::conditioning::{null_text, CompressionConfig};
use crate::error::{Error, Result};
use crate::flow::linear_schedule;
use crate::image::Image;
use crate::model::{Model, ModelConfig};
use crate::synthbench::{self, Category, EditParams, EditSpec};
use crate::tensor::{peak_tensor_bytes, reset_peak_tensor_bytes};

pub const FEATURE_DIM: usize = 29;

/// Default success threshold on the direction score.
pub const TAU: f64 = 0.5;

/// Three 8-bin channel histograms, intensity-weighted centroid `(x, y)`,
/// mean border-ring color.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector(pub [f64; FEATURE_DIM]);

impl FeatureVector {
    pub fn histogram(&self, channel: usize) -> &[f64] {
        &self.0[channel * 8..channel * 8 + 8]
    }

    pub fn centroid(&self) -> (f64, f64) {
        (self.0[24], self.0[25])
    }

    pub fn border(&self) -> [f64; 3] {
        [self.0[26], self.0[27], self.0[28]]
    }
}

pub fn feature_embed(img: &Image) -> FeatureVector {
    let mut f = [0.0; FEATURE_DIM];
    let n = (img.h * img.w) as f64;
    let (mut wsum, mut wx, mut wy) = (0.0, 0.0, 0.0);
    let mut ring = [0.0; 3];
    let mut ring_n = 0.0;
    for y in 0..img.h {
        for x in 0..img.w {
            let p = img.px(y, x);
            for c in 0..3 {
                let bin = ((p[c] as f64 * 8.0).floor().max(0.0) as usize).min(7);
                f[c * 8 + bin] += 1.0 / n;
            }
            let w = p.iter().map(|&v| v as f64).sum::<f64>() / 3.0;
            wsum += w;
            wx += w * (x as f64 + 0.5) / img.w as f64;
            wy += w * (y as f64 + 0.5) / img.h as f64;
            if y == 0 || x == 0 || y == img.h - 1 || x == img.w - 1 {
                for c in 0..3 {
                    ring[c] += p[c] as f64;
                }
                ring_n += 1.0;
            }
        }
    }
    let (cx, cy) = if wsum > 0.0 { (wx / wsum, wy / wsum) } else { (0.5, 0.5) };
    f[24] = cx;
    f[25] = cy;
    for c in 0..3 {
        f[26 + c] = ring[c] / ring_n;
    }
    FeatureVector(f)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionScore {
    pub value: f64,
    /// One of the two feature deltas was the zero vector.
    pub degenerate: bool,
}

/// Cosine between `φ(A')−φ(A)` and `φ(B')−φ(B)`.
pub fn direction_score(a: &Image, a_prime: &Image, b: &Image, b_prime: &Image) -> DirectionScore {
    direction_from_features(&feature_embed(a), &feature_embed(a_prime), &feature_embed(b), &feature_embed(b_prime))
}

/// [`direction_score`] on precomputed features.
pub fn direction_from_features(
    fa: &FeatureVector,
    fap: &FeatureVector,
    fb: &FeatureVector,
    fbp: &FeatureVector,
) -> DirectionScore {
    let da: Vec<f64> = fap.0.iter().zip(&fa.0).map(|(x, y)| x - y).collect();
    let db: Vec<f64> = fbp.0.iter().zip(&fb.0).map(|(x, y)| x - y).collect();
    let na: f64 = da.iter().map(|x| x * x).sum();
    let nb: f64 = db.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return DirectionScore {
            value: 0.0,
            degenerate: true,
        };
    }
    let dot: f64 = da.iter().zip(&db).map(|(x, y)| x * y).sum();
    DirectionScore {
        value: (dot / (na * nb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelfSim {
    pub value: f64,
    /// The mask covered every pixel; nothing to compare.
    pub full_edit: bool,
}

/// RMSE over pixels outside `mask` (all three channels).
pub fn self_sim_distance(b: &Image, b_prime: &Image, mask: &[bool]) -> Result<SelfSim> {
    if (b.h, b.w) != (b_prime.h, b_prime.w) || mask.len() != b.h * b.w {
        return Err(Error::Shape("self-similarity inputs disagree in size".into()));
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for (i, &m) in mask.iter().enumerate() {
        if m {
            continue;
        }
        for c in 0..3 {
            let d = (b.data[3 * i + c] - b_prime.data[3 * i + c]) as f64;
            s += d * d;
        }
        n += 3;
    }
    if n == 0 {
        return Ok(SelfSim {
            value: 0.0,
            full_edit: true,
        });
    }
    Ok(SelfSim {
        value: (s / n as f64).sqrt(),
        full_edit: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub var: f64,
    pub sr: f64,
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Per-sample score lists (one score per seed) → mean per-sample variance
/// and success rate at threshold `tau`.
pub fn seed_metrics(scores: &[Vec<f64>], tau: f64) -> Result<SeedMetrics> {
    if scores.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mut var = 0.0;
    let mut hits = 0usize;
    let mut total = 0usize;
    for s in scores {
        if s.len() < 2 {
            return Err(Error::invalid(format!("{} seed(s) per sample; need at least 2", s.len())));
        }
        var += population_variance(s);
        hits += s.iter().filter(|&&x| x >= tau).count();
        total += s.len();
    }
    Ok(SeedMetrics {
        var: var / scores.len() as f64,
        sr: hits as f64 / total as f64,
    })
}

/// Attention FLOPs:
/// `layers · heads · (2 · n_q · n_total · d_head + n_q · n_total)` where
/// `n_q = n_total` uncached and `n_q = n_live` cached. The first term counts
/// the multiply-adds of `QKᵀ` and `PV`, the second the softmax over each
/// score row.
pub fn attention_flops(n_total: u64, n_live: u64, d_head: u64, heads: u64, layers: u64, cached: bool) -> u64 {
    let n_q = if cached { n_live } else { n_total };
    layers * heads * (2 * n_q * n_total * d_head + n_q * n_total)
}

pub const FLOPS_HEADER: &str =
    "# attention_flops = layers*heads*(2*n_q*n_total*d_head + n_q*n_total); n_q = n_total (uncached) or n_live (cached)";

/// One evaluated generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub id: String,
    pub category: Category,
    pub seed: u64,
    pub direction_score: f64,
    pub degenerate: bool,
    pub self_sim: f64,
    pub oracle_rmse: f64,
    pub oracle_success: bool,
    pub success: bool,
}

impl SampleEval {
    pub fn new(q: &synthbench::Quadruple, seed: u64, out: &Image, tau: f64) -> Result<Self> {
        let ds = direction_score(&q.a, &q.a_prime, &q.b, out);
        let ss = self_sim_distance(&q.b, out, &q.mask_b)?;
        Ok(Self {
            id: q.id.clone(),
            category: q.category(),
            seed,
            direction_score: ds.value,
            degenerate: ds.degenerate,
            self_sim: ss.value,
            oracle_rmse: synthbench::oracle_rmse(q, out),
            oracle_success: synthbench::oracle_success(q, out),
            success: ds.value >= tau,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub cds: f64,
    pub ds: f64,
    pub var: f64,
    pub sr: f64,
    pub oracle_sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tau: f64,
    pub samples: Vec<SampleEval>,
}

impl EvalReport {
    /// Aggregates over samples whose category passes `filter`.
    pub fn aggregate_where(&self, filter: impl Fn(&SampleEval) -> bool) -> Result<Aggregate> {
        let rows: Vec<&SampleEval> = self.samples.iter().filter(|s| filter(s)).collect();
        if rows.is_empty() {
            return Err(Error::invalid("no samples to aggregate"));
        }
        let n = rows.len() as f64;
        let mut by_id: Vec<(&str, Vec<f64>)> = Vec::new();
        for r in &rows {
            match by_id.iter_mut().find(|(id, _)| *id == r.id) {
                Some((_, v)) => v.push(r.direction_score),
                None => by_id.push((&r.id, vec![r.direction_score])),
            }
        }
        let per: Vec<Vec<f64>> = by_id.into_iter().map(|(_, v)| v).collect();
        let (var, sr) = if per.iter().all(|v| v.len() >= 2) {
            let m = seed_metrics(&per, self.tau)?;
            (m.var, m.sr)
        } else {
            (0.0, rows.iter().filter(|r| r.success).count() as f64 / n)
        };
        Ok(Aggregate {
            count: per.len(),
            cds: rows.iter().map(|r| r.direction_score).sum::<f64>() / n,
            ds: rows.iter().map(|r| r.self_sim).sum::<f64>() / n,
            var,
            sr,
            oracle_sr: rows.iter().filter(|r| r.oracle_success).count() as f64 / n,
        })
    }

    pub fn aggregate(&self) -> Result<Aggregate> {
        self.aggregate_where(|_| true)
    }

    pub fn category(&self, c: Category) -> Result<Aggregate> {
        self.aggregate_where(|s| s.category == c)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,category,seed,direction_score,degenerate,self_sim,oracle_rmse,oracle_success,success\n");
        for r in &self.samples {
            let _ = writeln!(
                s,
                "{},{},{},{:.6},{},{:.6},{:.6},{},{}",
                r.id,
                r.category.name(),
                r.seed,
                r.direction_score,
                r.degenerate,
                r.self_sim,
                r.oracle_rmse,
                r.oracle_success,
                r.success
            );
        }
        s
    }

    /// Structured-text summary: overall and per category.
    pub fn summary(&self) -> Result<String> {
        let mut out = String::new();
        let mut line = |name: &str, a: Aggregate| {
            let _ = writeln!(
                out,
                "[{name}]\ncount = {}\ncds = {:.6}\nds = {:.6}\nvar = {:.6e}\nsr = {:.4}\noracle_sr = {:.4}\n",
                a.count, a.cds, a.ds, a.var, a.sr, a.oracle_sr
            );
        };
        line("all", self.aggregate()?);
        for c in Category::ALL {
            if let Ok(a) = self.aggregate_where(|s| s.category == c && !s.id.starts_with("composite")) {
                line(c.name(), a);
            }
        }
        if let Ok(a) = self.aggregate_where(|s| s.id.starts_with("composite")) {
            line("composite", a);
        }
        Ok(out)
    }
}

/// Fraction of ground-truth quadruples whose direction score reaches `tau`.
pub fn calibrate_tau(items: &[synthbench::Quadruple], tau: f64) -> f64 {
    let ok = items
        .iter()
        .filter(|q| direction_score(&q.a, &q.a_prime, &q.b, &q.b_prime).value >= tau)
        .count();
    ok as f64 / items.len().max(1) as f64
}

/// Sampling configuration measured by the scaling harness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchVariant {
    Full,
    Compressed,
    CompressedCached,
}

impl BenchVariant {
    pub const ALL: [BenchVariant; 3] = [BenchVariant::Full, BenchVariant::Compressed, BenchVariant::CompressedCached];

    pub fn name(self) -> &'static str {
        match self {
            BenchVariant::Full => "full",
            BenchVariant::Compressed => "compressed",
            BenchVariant::CompressedCached => "compressed+cached",
        }
    }

    fn compressed(self) -> bool {
        !matches!(self, BenchVariant::Full)
    }

    fn cached(self) -> bool {
        matches!(self, BenchVariant::CompressedCached)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: BenchVariant,
    pub res: usize,
    /// Image tokens (text excluded).
    pub tokens: usize,
    pub flops: u64,
    pub ms_median: Option<f64>,
    pub mem_peak: Option<usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub resolutions: Vec<usize>,
    pub trials: usize,
    pub steps: usize,
    pub variants: Vec<BenchVariant>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            resolutions: vec![32, 64, 96],
            trials: 3,
            steps: 20,
            variants: BenchVariant::ALL.to_vec(),
        }
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bench_one(base: &ModelConfig, variant: BenchVariant, res: usize, bc: &BenchConfig) -> Result<BenchRow> {
    let cfg = ModelConfig {
        image_hw: (res, res),
        cond_attention: if variant.cached() {
            base.cond_attention
        } else {
            crate::model::CondAttention::Full
        },
        ..base.clone()
    };
    cfg.validate()?;
    let comp = if variant.compressed() {
        CompressionConfig::halves_and_quarters((res, res))
    } else {
        CompressionConfig::uncompressed((res, res))
    };
    let tokens = comp.image_tokens(cfg.patch_size);
    let target = cfg.target_tokens();
    let n_total = (tokens + cfg.text_slots) as u64;
    let n_live = (target + cfg.text_slots) as u64;
    let flops = attention_flops(
        n_total,
        n_live,
        cfg.head_dim() as u64,
        cfg.n_heads as u64,
        cfg.n_layers as u64,
        variant.cached(),
    );
    let mut row = BenchRow {
        config: variant,
        res,
        tokens,
        flops,
        ms_median: None,
        mem_peak: None,
        error: None,
    };
    let edit = EditSpec::single(EditParams::Appearance { color: 0 });
    let q = synthbench::make_quadruple(1, &edit, (res, res))?;
    let model = Model::<f32>::init(&cfg)?;
    let seq = crate::conditioning::sequence_for::<f32>(&q, &cfg, variant.compressed(), null_text())?;
    let schedule = linear_schedule(bc.steps)?;
    // Warm-up, discarded.
    sample_edit(&model, &seq, 0, &schedule, variant.cached())?;
    let mut times = Vec::with_capacity(bc.trials);
    let mut peak = 0;
    for trial in 0..bc.trials.max(1) {
        reset_peak_tensor_bytes();
        let start = Instant::now();
        sample_edit(&model, &seq, trial as u64 + 1, &schedule, variant.cached())?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        peak = peak.max(peak_tensor_bytes());
    }
    row.ms_median = Some(median(times));
    row.mem_peak = Some(peak);
    Ok(row)
}

/// Times sampling for every resolution and variant. Failures are recorded in
/// the row and the sweep continues.
pub fn bench_scaling(base: &ModelConfig, bc: &BenchConfig) -> Vec<BenchRow> {
    let mut rows = Vec::new();
    for &res in &bc.resolutions {
        for &variant in &bc.variants {
            rows.push(bench_one(base, variant, res, bc).unwrap_or_else(|e| BenchRow {
                config: variant,
                res,
                tokens: 0,
                flops: 0,
                ms_median: None,
                mem_peak: None,
                error: Some(e.to_string()),
            }));
        }
    }
    rows
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{FLOPS_HEADER}\nconfig,res,tokens,flops,ms_median,mem_peak\n");
    for r in rows {
        let ms = r.ms_median.map_or_else(|| "failed".to_string(), |v| format!("{v:.3}"));
        let mem = r.mem_peak.map_or_else(|| "failed".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{},{},{},{},{ms},{mem}", r.config.name(), r.res, r.tokens, r.flops);
    }
    s
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 || points.iter().any(|&(x, y)| x <= 0.0 || y <= 0.0) {
        return None;
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_features() {
        let f = feature_embed(&Image::filled(8, 8, [0.5, 0.5, 0.5]));
        for c in 0..3 {
            let h = f.histogram(c);
            assert_eq!(h.iter().filter(|&&v| v > 0.0).count(), 1);
            assert_eq!(h[4], 1.0);
        }
        assert_eq!(f.centroid(), (0.5, 0.5));
        assert_eq!(feature_embed(&Image::filled(8, 8, [0.0; 3])).centroid(), (0.5, 0.5));
    }

    #[test]
    fn seed_metric_examples() {
        assert_eq!(seed_metrics(&[vec![1.0, -1.0]], 0.5).unwrap().var, 1.0);
        let m = seed_metrics(&[vec![0.6, 0.4, 0.7]], 0.5).unwrap();
        assert!((m.sr - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(seed_metrics(&[vec![0.3, 0.3, 0.3]], 0.5).unwrap().var, 0.0);
        assert!(seed_metrics(&[vec![0.3]], 0.5).is_err());
    }

    #[test]
    fn flop_model() {
        let f = |n| attention_flops(n, n, 32, 4, 4, false);
        assert_eq!(f(400) * 10000, f(100) * 160000);
        assert_eq!(f(100) as f64 / f(256) as f64, 0.152587890625);
        assert_eq!(attention_flops(257, 257, 32, 4, 4, true), f(257));
        assert!(attention_flops(257, 65, 32, 4, 4, true) < f(257));
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [1.0, 2.0, 4.0].iter().map(|&x: &f64| (x, 3.0 * x.powf(1.7))).collect();
        assert!((loglog_slope(&pts).unwrap() - 1.7).abs() < 1e-12);
    }
}
