//! Condition reuse: per-layer key/value caching of the condition span, the
//! denoising driver built on it, and the feature-similarity diagnostic.

use std::cell::RefCell;
use std::fmt::Write as _;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::flow::{self, Schedule, VelocityField};
use crate::model::{AttentionMask, Bound, CondAttention, FwdOpts, Model, Role, RopeTables, TokenSequence};
use crate::tensor::{DTensor, Real};

/// Rotated keys and values of one layer (`cond_len × d_model`, heads are
/// contiguous column blocks of width `head_dim`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerKV<F: Real> {
    pub k: DTensor<F>,
    pub v: DTensor<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KVCache<F: Real> {
    layers: Vec<LayerKV<F>>,
    cond_len: usize,
    t_ref: f64,
    head_dim: usize,
}

impl<F: Real> KVCache<F> {
    pub fn layers(&self) -> &[LayerKV<F>] {
        &self.layers
    }

    pub fn cond_len(&self) -> usize {
        self.cond_len
    }

    pub fn t_ref(&self) -> f64 {
        self.t_ref
    }

    /// Key block of head `h` in layer `l`.
    pub fn head_k(&self, l: usize, h: usize) -> Result<DTensor<F>> {
        head_block(&self.layers[l].k, h, self.head_dim)
    }

    pub fn head_v(&self, l: usize, h: usize) -> Result<DTensor<F>> {
        head_block(&self.layers[l].v, h, self.head_dim)
    }

    pub fn bytes(&self) -> usize {
        self.layers.iter().map(|l| (l.k.len() + l.v.len()) * std::mem::size_of::<F>()).sum()
    }
}

fn head_block<F: Real>(t: &DTensor<F>, h: usize, dh: usize) -> Result<DTensor<F>> {
    let (rows, cols) = t.dims2();
    if (h + 1) * dh > cols {
        return Err(Error::invalid(format!("head {h} out of range")));
    }
    let data = (0..rows)
        .flat_map(|r| t.data()[r * cols + h * dh..r * cols + (h + 1) * dh].iter().copied())
        .collect();
    DTensor::matrix(rows, dh, data)
}

fn cond_mask(roles: &[Role], mode: CondAttention) -> Option<Vec<bool>> {
    let m = AttentionMask::for_roles(roles, mode);
    (!m.is_all_true()).then_some(m.allow)
}

fn build_cache_graph<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    p: &Bound,
    seq: &TokenSequence<F>,
    t_ref: f64,
) -> Result<KVCache<F>> {
    if !model.cfg.cond_attention.is_causal() {
        return Err(Error::invalid(
            "condition caching needs a causal condition mask (cond_attention = full)",
        ));
    }
    seq.validate()?;
    let live = seq.live_len();
    let cond_roles = &seq.roles[live..];
    let img_off = live - seq.text_len;
    let tokens = seq.image_tokens.rows(img_off, seq.cond_len())?;
    let rope = model.rope_tables(&seq.positions[live..])?;
    let mask = cond_mask(cond_roles, model.cfg.cond_attention);
    let c_cond = model.cond_time(g, p, t_ref)?;
    let mut x = model.embed_images(g, p, &tokens, cond_roles)?;
    let mut layers = Vec::with_capacity(model.cfg.n_layers);
    for l in 0..model.cfg.n_layers {
        let (nx, k, v) = model.layer(g, p, l, x, 0, None, c_cond, &rope, mask.as_deref(), None)?;
        layers.push(LayerKV {
            k: g.value(k).clone(),
            v: g.value(v).clone(),
        });
        x = nx;
    }
    Ok(KVCache {
        layers,
        cond_len: seq.cond_len(),
        t_ref,
        head_dim: model.cfg.head_dim(),
    })
}

/// Runs the condition span alone through every layer at `t_ref` and keeps
/// its keys and values.
pub fn build_cache<F: Real>(model: &Model<F>, seq: &TokenSequence<F>, t_ref: f64) -> Result<KVCache<F>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, |_| false);
    build_cache_graph(model, &mut g, &p, seq, t_ref)
}

fn cached_forward_graph<F: Real>(
    model: &Model<F>,
    g: &mut Graph<F>,
    p: &Bound,
    cache: &KVCache<F>,
    seq: &TokenSequence<F>,
    rope_live: &RopeTables<F>,
    t: f64,
) -> Result<Var> {
    if seq.cond_len() != cache.cond_len {
        return Err(Error::Shape(format!(
            "sequence has {} condition tokens, cache holds {}",
            seq.cond_len(),
            cache.cond_len
        )));
    }
    if cache.layers.len() != model.cfg.n_layers {
        return Err(Error::Shape("cache layer count differs from the model".into()));
    }
    let live = seq.live_len();
    let (text, c_live) = model.text_and_time(g, p, &seq.text, t)?;
    let tokens = seq.image_tokens.rows(0, live - seq.text_len)?;
    let img = model.embed_images(g, p, &tokens, &seq.roles[seq.text_len..live])?;
    let mut x = g.concat_rows(&[text, img])?;
    for (l, kv) in cache.layers.iter().enumerate() {
        let k = g.constant(kv.k.clone());
        let v = g.constant(kv.v.clone());
        x = model
            .layer(g, p, l, x, live, Some(c_live), None, rope_live, None, Some((k, v)))?
            .0;
    }
    let tgt = seq.span(Role::Target).ok_or_else(|| Error::invalid("no target span"))?;
    let rows = g.slice_rows(x, tgt.start, tgt.len)?;
    model.head(g, p, rows, c_live)
}

/// TARGET velocity with live queries attending over `[live ∥ cached]`.
pub fn cached_forward<F: Real>(
    model: &Model<F>,
    cache: &KVCache<F>,
    seq: &TokenSequence<F>,
    t: f64,
) -> Result<DTensor<F>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, |_| false);
    let rope = model.rope_tables(&seq.positions[..seq.live_len()])?;
    let v = cached_forward_graph(model, &mut g, &p, cache, seq, &rope, t)?;
    Ok(g.value(v).clone())
}

/// Mid-network features of the condition span from the full forward (for
/// mask checks).
pub fn condition_features<F: Real>(model: &Model<F>, seq: &TokenSequence<F>, t: f64) -> Result<DTensor<F>> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, |_| false);
    let out = model.forward_graph(
        &mut g,
        &p,
        seq,
        t,
        FwdOpts {
            capture_mid: true,
            cond_t: None,
        },
    )?;
    let mid = out.mid.expect("requested");
    g.value(mid).rows(seq.live_len(), seq.cond_len())
}

/// Condition reference timestep for cached sampling.
pub const T_REF: f64 = 1.0;

struct Tape<F: Real> {
    g: Graph<F>,
    p: Bound,
    base: usize,
}

/// Velocity field of one sample's conditions. Parameters are bound once and
/// the tape is rewound after each evaluation.
pub struct Denoiser<'a, F: Real> {
    model: &'a Model<F>,
    seq: TokenSequence<F>,
    cache: Option<KVCache<F>>,
    rope_live: Option<RopeTables<F>>,
    tape: RefCell<Tape<F>>,
}

impl<'a, F: Real> Denoiser<'a, F> {
    pub fn new(model: &'a Model<F>, seq: TokenSequence<F>, cached: bool) -> Result<Self> {
        seq.validate()?;
        let mut g = Graph::new();
        let p = model.bind(&mut g, |_| false);
        let base = g.len();
        let (cache, rope_live) = if cached {
            let c = build_cache_graph(model, &mut g, &p, &seq, T_REF)?;
            let r = model.rope_tables(&seq.positions[..seq.live_len()])?;
            (Some(c), Some(r))
        } else {
            (None, None)
        };
        g.truncate(base);
        Ok(Self {
            model,
            seq,
            cache,
            rope_live,
            tape: RefCell::new(Tape { g, p, base }),
        })
    }

    pub fn sequence(&self) -> &TokenSequence<F> {
        &self.seq
    }

    pub fn cache(&self) -> Option<&KVCache<F>> {
        self.cache.as_ref()
    }

    pub fn target_shape(&self) -> [usize; 2] {
        [self.seq.target_len(), self.model.cfg.latent_dim()]
    }

    /// Velocity plus (optionally) mid-network features of the full sequence.
    pub fn eval(&self, z: &DTensor<F>, t: f64, capture_mid: bool) -> Result<(DTensor<F>, Option<DTensor<F>>)> {
        let seq = self.seq.with_target(z)?;
        let mut tape = self.tape.borrow_mut();
        let Tape { g, p, base } = &mut *tape;
        let res = match (&self.cache, capture_mid) {
            (Some(cache), false) => {
                let rope = self.rope_live.as_ref().expect("built with cache");
                cached_forward_graph(self.model, g, p, cache, &seq, rope, t)
                    .map(|v| (g.value(v).clone(), None))
            }
            _ => self
                .model
                .forward_graph(
                    g,
                    p,
                    &seq,
                    t,
                    FwdOpts {
                        capture_mid,
                        cond_t: None,
                    },
                )
                .map(|o| (g.value(o.velocity).clone(), o.mid.map(|m| g.value(m).clone()))),
        };
        g.truncate(*base);
        res
    }
}

impl<F: Real> VelocityField<F> for Denoiser<'_, F> {
    fn velocity(&self, z_t: &DTensor<F>, t: f64) -> Result<DTensor<F>> {
        Ok(self.eval(z_t, t, false)?.0)
    }
}

/// Samples the TARGET latent of `seq` from seeded noise.
pub fn sample_edit<F: Real>(
    model: &Model<F>,
    seq: &TokenSequence<F>,
    seed: u64,
    schedule: &Schedule,
    cached: bool,
) -> Result<DTensor<F>> {
    let d = Denoiser::new(model, seq.clone(), cached)?;
    flow::sample(&d, &d.target_shape(), seed, schedule)
}

/// Cosine similarity; computed as `dot / sqrt(|a|²·|b|²)` so identical
/// vectors give exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum();
    let nb: f64 = b.iter().map(|x| x * x).sum();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb).sqrt()
}

/// Per-role `T × T` cosine similarities of mid-network features.
#[derive(Debug, Clone)]
pub struct SimilarityMaps {
    pub timesteps: Vec<f64>,
    pub roles: Vec<(Role, Vec<Vec<f64>>)>,
}

impl SimilarityMaps {
    pub fn get(&self, role: Role) -> Option<&Vec<Vec<f64>>> {
        self.roles.iter().find(|(r, _)| *r == role).map(|(_, m)| m)
    }

    pub fn min(&self, role: Role) -> Option<f64> {
        self.get(role)
            .map(|m| m.iter().flatten().copied().fold(f64::INFINITY, f64::min))
    }

    /// Rows and columns are timestep indices.
    pub fn to_csv(&self, role: Role) -> Option<String> {
        let m = self.get(role)?;
        let mut s = String::from("step");
        for j in 0..m.len() {
            let _ = write!(s, ",{j}");
        }
        s.push('\n');
        for (i, row) in m.iter().enumerate() {
            let _ = write!(s, "{i}");
            for v in row {
                let _ = write!(s, ",{v:.9}");
            }
            s.push('\n');
        }
        Some(s)
    }
}

/// Uncached denoising that records mid-network features of each image role
/// at every step.
pub fn feature_similarity_map<F: Real>(
    model: &Model<F>,
    seq: &TokenSequence<F>,
    seed: u64,
    schedule: &Schedule,
) -> Result<SimilarityMaps> {
    let d = Denoiser::new(model, seq.clone(), false)?;
    let ts = schedule.timesteps();
    let roles = [Role::PromptSrc, Role::PromptTgt, Role::Query, Role::Target];
    let mut feats: Vec<Vec<Vec<f64>>> = vec![Vec::new(); roles.len()];
    let mut z = flow::noise::<F>(&d.target_shape(), seed);
    for w in ts.windows(2) {
        let (v, mid) = d.eval(&z, w[0], true)?;
        let mid = mid.expect("requested");
        for (slot, role) in roles.iter().enumerate() {
            let span = seq.span(*role).ok_or_else(|| Error::invalid(format!("no {role:?} span")))?;
            feats[slot].push(mid.rows(span.start, span.len)?.to_f64_vec());
        }
        z = flow::euler_step(&z, &v, w[0], w[1])?;
    }
    let roles = roles
        .iter()
        .zip(&feats)
        .map(|(r, f)| {
            let m = f.iter().map(|a| f.iter().map(|b| cosine(a, b)).collect()).collect();
            (*r, m)
        })
        .collect();
    Ok(SimilarityMaps {
        timesteps: ts[..ts.len() - 1].to_vec(),
        roles,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::linear_schedule;
    use crate::model::tests::{randomized, tiny_cfg, tiny_seq};
    use crate::model::ModelConfig;

    #[test]
    fn cached_matches_uncached() {
        let cfg = tiny_cfg();
        let m = randomized::<f32>(&cfg, 1);
        for compress in [false, true] {
            let seq = tiny_seq::<f32>(&cfg, 7, compress);
            let cache = build_cache(&m, &seq, T_REF).unwrap();
            assert_eq!(cache, build_cache(&m, &seq, T_REF).unwrap());
            for t in [1.0, 0.55, 0.05] {
                let a = m.forward(&seq, t).unwrap();
                let b = cached_forward(&m, &cache, &seq, t).unwrap();
                assert!(a.max_abs_diff(&b).unwrap() <= 1e-5);
            }
        }
    }

    #[test]
    fn cache_ignores_target_and_pinned_time() {
        let cfg = tiny_cfg();
        let m = randomized::<f32>(&cfg, 2);
        let seq = tiny_seq::<f32>(&cfg, 8, false);
        let other = seq
            .with_target(&crate::flow::noise(&[seq.target_len(), cfg.latent_dim()], 99))
            .unwrap();
        assert_eq!(build_cache(&m, &seq, 1.0).unwrap().layers(), build_cache(&m, &other, 1.0).unwrap().layers());
        assert_eq!(build_cache(&m, &seq, 1.0).unwrap().layers(), build_cache(&m, &seq, 0.2).unwrap().layers());
        assert_eq!(
            condition_features(&m, &seq, 0.9).unwrap(),
            condition_features(&m, &other, 0.1).unwrap()
        );
    }

    #[test]
    fn full_attention_cannot_be_cached() {
        let cfg = ModelConfig {
            cond_attention: CondAttention::Full,
            ..tiny_cfg()
        };
        let m = randomized::<f32>(&cfg, 3);
        let seq = tiny_seq::<f32>(&cfg, 9, false);
        assert!(build_cache(&m, &seq, 1.0).is_err());
        let cache = build_cache(&randomized::<f32>(&tiny_cfg(), 3), &tiny_seq::<f32>(&cfg, 9, true), 1.0).unwrap();
        assert!(cached_forward(&m, &cache, &seq, 0.5).is_err());
    }

    #[test]
    fn sampling_paths_agree() {
        let cfg = tiny_cfg();
        let m = randomized::<f32>(&cfg, 4);
        let seq = tiny_seq::<f32>(&cfg, 10, false);
        let s = linear_schedule(20).unwrap();
        let a = sample_edit(&m, &seq, 5, &s, false).unwrap();
        let b = sample_edit(&m, &seq, 5, &s, true).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-4);
        assert_eq!(a, sample_edit(&m, &seq, 5, &s, false).unwrap());
        assert!(a.max_abs_diff(&sample_edit(&m, &seq, 6, &s, false).unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn pinned_condition_features_are_identical_over_time() {
        let cfg = tiny_cfg();
        let m = randomized::<f32>(&cfg, 5);
        let seq = tiny_seq::<f32>(&cfg, 11, false);
        let maps = feature_similarity_map(&m, &seq, 1, &linear_schedule(5).unwrap()).unwrap();
        for role in [Role::PromptSrc, Role::PromptTgt, Role::Query] {
            assert!(maps.get(role).unwrap().iter().flatten().all(|&v| v == 1.0));
        }
        assert!(maps.min(Role::Target).unwrap() < 1.0);
        assert!(maps.to_csv(Role::Target).unwrap().lines().count() == 6);
    }
}
