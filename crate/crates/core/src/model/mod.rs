//! Micro in-context diffusion transformer.
//!
//! Token layout is `[TEXT | TARGET | QUERY | PROMPT_SRC | PROMPT_TGT]`; the
//! first two blocks are "live" (they change every denoising step) and the
//! remaining three are clean conditions. Every block is
//! `RMS-norm → masked attention (+res) → RMS-norm → MLP (+res)` with
//! adaptive shift/scale from the timestep on live rows. Condition rows are
//! modulated only when `cond_modulation` is set.

pub mod checkpoint;
pub mod rope;
pub mod sequence;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::conditioning::{TextCondition, TextMode};
use crate::error::{Error, Result};
use crate::rng::{self, SplitMix64};
use crate::tensor::{DTensor, Real};

pub use rope::{apply_rope, RopeTables};
pub use sequence::{positions_for, AttentionMask, CondAttention, Position, Role, Span, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub patch_size: usize,
    /// Target image height × width.
    pub image_hw: (usize, usize),
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub text_slots: usize,
    /// Rows of the instruction embedding table.
    pub text_vocab: usize,
    pub mlp_ratio: usize,
    pub rope_base: f64,
    pub cond_attention: CondAttention,
    /// Apply timestep modulation to condition tokens too.
    pub cond_modulation: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            patch_size: 4,
            image_hw: (32, 32),
            lora_rank: 8,
            lora_scale: 1.0,
            text_slots: 1,
            text_vocab: crate::synthbench::INSTRUCTION_VOCAB,
            mlp_ratio: 4,
            rope_base: 100.0,
            cond_attention: CondAttention::Block,
            cond_modulation: false,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// Smaller preset used by the training experiments (16×16 images).
    pub fn experiment() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            image_hw: (16, 16),
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn latent_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn target_grid(&self) -> (usize, usize) {
        (self.image_hw.0 / self.patch_size, self.image_hw.1 / self.patch_size)
    }

    pub fn target_tokens(&self) -> usize {
        let g = self.target_grid();
        g.0 * g.1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::config(format!("model.{k}"), m));
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad("n_heads", format!("d_model {} not divisible by {}", self.d_model, self.n_heads));
        }
        if let Err(e) = rope::axis_split(self.head_dim()) {
            return bad("d_model", e.to_string());
        }
        if self.patch_size == 0
            || !self.image_hw.0.is_multiple_of(self.patch_size)
            || !self.image_hw.1.is_multiple_of(self.patch_size)
        {
            return bad("patch_size", format!("{} does not divide {:?}", self.patch_size, self.image_hw));
        }
        if self.n_layers == 0 {
            return bad("n_layers", "must be >= 1".into());
        }
        if self.lora_rank == 0 {
            return bad("lora_rank", "must be >= 1".into());
        }
        if self.text_slots == 0 || self.text_vocab == 0 {
            return bad("text_slots", "text slots and vocabulary must be >= 1".into());
        }
        Ok(())
    }

    /// Layer whose output is reported as the mid-network feature.
    pub fn mid_layer(&self) -> usize {
        (self.n_layers / 2).max(1) - 1
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct Params<F: Real> {
    tensors: IndexMap<String, DTensor<F>>,
}

impl<F: Real> Params<F> {
    pub fn get(&self, name: &str) -> Result<&DTensor<F>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut DTensor<F>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, t: DTensor<F>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &DTensor<F>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut DTensor<F>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<G: Real>(&self) -> Params<G> {
        Params {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// FNV-1a over names and value bits of the selected tensors.
    pub fn checksum(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        };
        for (k, v) in &self.tensors {
            if !select(k) {
                continue;
            }
            k.bytes().for_each(&mut eat);
            for x in v.data() {
                x.f64().to_bits().to_le_bytes().into_iter().for_each(&mut eat);
            }
        }
        h
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.is_finite())
    }
}

pub fn is_lora(name: &str) -> bool {
    name.contains(".lora_")
}

/// Graph handles for every parameter, in parameter order.
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// `(name, var)` pairs of the trainable parameters.
    pub fn trainable<'a, F: Real>(&'a self, g: &'a Graph<F>) -> impl Iterator<Item = (&'a str, Var)> + 'a {
        self.vars
            .iter()
            .filter(|(_, v)| g.requires_grad(**v))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// What a forward pass should record besides the velocity.
#[derive(Debug, Clone, Copy, Default)]
pub struct FwdOpts {
    pub capture_mid: bool,
    /// Timestep used for condition modulation (defaults to the live `t`).
    pub cond_t: Option<f64>,
}

pub struct FwdOut {
    pub velocity: Var,
    /// Mid-network features of the whole sequence (rows in sequence order).
    pub mid: Option<Var>,
}

/// `x·W + scale·(x·A)·B`.
pub fn lora_linear<F: Real>(
    g: &mut Graph<F>,
    x: Var,
    base: Var,
    lora_a: Var,
    lora_b: Var,
    scale: f64,
) -> Result<Var> {
    let (d_in, r) = g.value(lora_a).dims2();
    let (r2, d_out) = g.value(lora_b).dims2();
    let (w_in, w_out) = g.value(base).dims2();
    if r != r2 || r == 0 || d_in != w_in || d_out != w_out {
        return Err(Error::Shape(format!(
            "lora rank mismatch: W {w_in}x{w_out}, A {d_in}x{r}, B {r2}x{d_out}"
        )));
    }
    let y = g.matmul(x, base)?;
    let xa = g.matmul(x, lora_a)?;
    let xab = g.matmul(xa, lora_b)?;
    let s = g.scale(xab, F::c(scale))?;
    g.add(y, s)
}

/// Sinusoidal embedding of `t` (scaled by 1000), width `dim`.
pub fn timestep_embedding(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let f = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t * 1000.0 * f).sin();
        out[half + i] = (t * 1000.0 * f).cos();
    }
    out
}

/// Weights plus architecture.
#[derive(Debug, Clone)]
pub struct Model<F: Real> {
    pub cfg: ModelConfig,
    pub params: Params<F>,
}

pub const PROJECTIONS: [&str; 4] = ["q", "k", "v", "o"];

impl<F: Real> Model<F> {
    /// Fresh weights. Modulation, output head, text embeddings and LoRA B
    /// factors start at zero.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let lat = cfg.latent_dim();
        let hidden = d * cfg.mlp_ratio;
        let mut p = Params::default();
        let seed = cfg.init_seed;
        let normal = |name: &str, rows: usize, cols: usize, std: f64| {
            let mut r = SplitMix64::stream(seed, name_hash(name));
            let data: Vec<f64> = (0..rows * cols).map(|_| r.next_normal() * std).collect();
            DTensor::from_f64(&[rows, cols], &data).expect("init")
        };
        let zeros = |rows: usize, cols: usize| DTensor::zeros(&[rows, cols]);
        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        p.insert("embed.w", normal("embed.w", lat, d, fan(lat)));
        p.insert("embed.b", zeros(1, d));
        p.insert("role.emb", normal("role.emb", Role::ORDER.len(), d, 0.1));
        p.insert("text.null", zeros(cfg.text_slots, d));
        p.insert("text.table", zeros(cfg.text_vocab * cfg.text_slots, d));
        p.insert("time.w1", normal("time.w1", d, d, fan(d)));
        p.insert("time.b1", zeros(1, d));
        p.insert("time.w2", normal("time.w2", d, d, fan(d)));
        p.insert("time.b2", zeros(1, d));
        for l in 0..cfg.n_layers {
            p.insert(format!("l{l}.mod.w"), zeros(d, 4 * d));
            p.insert(format!("l{l}.mod.b"), zeros(1, 4 * d));
            for proj in PROJECTIONS {
                let name = format!("l{l}.attn.{proj}");
                let w = normal(&name, d, d, fan(d));
                p.insert(name, w);
            }
            let w1 = format!("l{l}.mlp.w1");
            let w2 = format!("l{l}.mlp.w2");
            p.insert(w1.clone(), normal(&w1, d, hidden, fan(d)));
            p.insert(format!("l{l}.mlp.b1"), zeros(1, hidden));
            p.insert(w2.clone(), normal(&w2, hidden, d, fan(hidden)));
            p.insert(format!("l{l}.mlp.b2"), zeros(1, d));
        }
        p.insert("final.mod.w", zeros(d, 2 * d));
        p.insert("final.mod.b", zeros(1, 2 * d));
        p.insert("final.w", zeros(d, lat));
        p.insert("final.b", zeros(1, lat));
        Ok(Self {
            cfg: cfg.clone(),
            params: p,
        })
    }

    pub fn has_lora(&self) -> bool {
        self.params.iter().any(|(k, _)| is_lora(k))
    }

    /// Adds rank-`lora_rank` adapters to every attention projection.
    /// `B` starts at zero so the adapted model equals the base model.
    pub fn attach_lora(&mut self, seed: u64) {
        let d = self.cfg.d_model;
        let r = self.cfg.lora_rank;
        for l in 0..self.cfg.n_layers {
            for proj in PROJECTIONS {
                let base = format!("l{l}.attn.{proj}");
                let a_name = format!("{base}.lora_a");
                let mut rg = SplitMix64::stream(seed, name_hash(&a_name));
                let std = 1.0 / (d as f64).sqrt();
                let data: Vec<f64> = (0..d * r).map(|_| rg.next_normal() * std).collect();
                self.params
                    .insert(a_name, DTensor::from_f64(&[d, r], &data).expect("lora a"));
                self.params
                    .insert(format!("{base}.lora_b"), DTensor::zeros(&[r, d]));
            }
        }
    }

    /// Registers every parameter on `g`; those accepted by `trainable`
    /// receive gradients.
    pub fn bind(&self, g: &mut Graph<F>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| {
                let var = if trainable(k) {
                    g.param(v.clone())
                } else {
                    g.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    fn project(&self, g: &mut Graph<F>, p: &Bound, name: &str, x: Var) -> Result<Var> {
        let w = p.get(name)?;
        let a_name = format!("{name}.lora_a");
        if p.has(&a_name) {
            let a = p.get(&a_name)?;
            let b = p.get(&format!("{name}.lora_b"))?;
            lora_linear(g, x, w, a, b, self.cfg.lora_scale)
        } else {
            g.matmul(x, w)
        }
    }

    fn text_embedding(&self, g: &mut Graph<F>, p: &Bound, text: &TextCondition) -> Result<Var> {
        let slots = self.cfg.text_slots;
        match text.mode {
            TextMode::Null => p.get("text.null"),
            TextMode::Pseudo(ids) => {
                let table = p.get("text.table")?;
                let mut rows = Vec::new();
                let mut parts = Vec::new();
                for id in ids.into_iter().flatten() {
                    if id >= self.cfg.text_vocab {
                        return Err(Error::invalid(format!("instruction id {id} outside vocabulary")));
                    }
                    rows.clear();
                    rows.extend(id * slots..(id + 1) * slots);
                    parts.push(g.gather_rows(table, &rows)?);
                }
                if parts.is_empty() {
                    return Err(Error::invalid("empty instruction"));
                }
                let mut acc = p.get("text.null")?;
                for &q in &parts {
                    acc = g.add(acc, q)?;
                }
                Ok(acc)
            }
        }
    }

    /// Activated timestep conditioning vector (1 × d).
    fn time_cond(&self, g: &mut Graph<F>, p: &Bound, t: f64) -> Result<Var> {
        let e = g.constant(DTensor::from_f64(
            &[1, self.cfg.d_model],
            &timestep_embedding(t, self.cfg.d_model),
        )?);
        let h = g.matmul(e, p.get("time.w1")?)?;
        let h = g.add_row(h, p.get("time.b1")?)?;
        let h = g.silu(h)?;
        let c = g.matmul(h, p.get("time.w2")?)?;
        let c = g.add_row(c, p.get("time.b2")?)?;
        g.silu(c)
    }

    /// `[shift, scale]` pairs from a conditioning vector.
    fn modulation(&self, g: &mut Graph<F>, p: &Bound, prefix: &str, c: Var, parts: usize) -> Result<Vec<Var>> {
        let m = g.matmul(c, p.get(&format!("{prefix}.w"))?)?;
        let m = g.add_row(m, p.get(&format!("{prefix}.b"))?)?;
        let d = self.cfg.d_model;
        (0..parts).map(|i| g.slice_cols(m, i * d, d)).collect()
    }

    fn norm_mod(&self, g: &mut Graph<F>, x: Var, m: Option<(Var, Var)>) -> Result<Var> {
        let h = g.rms_norm(x, F::c(1e-6))?;
        match m {
            None => Ok(h),
            Some((shift, scale)) => {
                let s1 = g.add_scalar(scale, F::one())?;
                let h = g.mul_row(h, s1)?;
                g.add_row(h, shift)
            }
        }
    }

    /// Multi-head attention of `q` over `k`/`v` (rotary already applied).
    fn attend(&self, g: &mut Graph<F>, q: Var, k: Var, v: Var, mask: Option<&[bool]>) -> Result<Var> {
        let dh = self.cfg.head_dim();
        let inv = F::c(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_nt(qh, kh)?;
            let s = g.scale(s, inv)?;
            let pr = g.softmax_rows(s, mask)?;
            heads.push(g.matmul(pr, vh)?);
        }
        g.concat_cols(&heads)
    }

    /// One transformer block over rows `x`. The first `n_live` rows are
    /// modulated by `c_live`, the rest by `c_cond` (if any). Keys and values
    /// are the rows' own, followed by `extra_kv`. Returns the updated rows
    /// and the rows' rotated keys and values.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn layer(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        l: usize,
        x: Var,
        n_live: usize,
        c_live: Option<Var>,
        c_cond: Option<Var>,
        rope: &RopeTables<F>,
        mask: Option<&[bool]>,
        extra_kv: Option<(Var, Var)>,
    ) -> Result<(Var, Var, Var)> {
        let rows = g.value(x).dims2().0;
        let prefix = format!("l{l}.mod");
        let live_m = match c_live {
            Some(c) if n_live > 0 => Some(self.modulation(g, p, &prefix, c, 4)?),
            _ => None,
        };
        let cond_m = match c_cond {
            Some(c) if n_live < rows => Some(self.modulation(g, p, &prefix, c, 4)?),
            _ => None,
        };
        let pick = |m: &Option<Vec<Var>>, i: usize| m.as_ref().map(|v| (v[2 * i], v[2 * i + 1]));

        let normed = |this: &Self, g: &mut Graph<F>, x: Var, i: usize| -> Result<Var> {
            if n_live == 0 || n_live == rows {
                let m = if n_live == 0 { pick(&cond_m, i) } else { pick(&live_m, i) };
                return this.norm_mod(g, x, m);
            }
            let xl = g.slice_rows(x, 0, n_live)?;
            let xc = g.slice_rows(x, n_live, rows - n_live)?;
            let hl = this.norm_mod(g, xl, pick(&live_m, i))?;
            let hc = this.norm_mod(g, xc, pick(&cond_m, i))?;
            g.concat_rows(&[hl, hc])
        };

        let h = normed(self, g, x, 0)?;
        let q = self.project(g, p, &format!("l{l}.attn.q"), h)?;
        let k = self.project(g, p, &format!("l{l}.attn.k"), h)?;
        let v = self.project(g, p, &format!("l{l}.attn.v"), h)?;
        let q = g.rotary(q, rope.cos.clone(), rope.sin.clone())?;
        let k = g.rotary(k, rope.cos.clone(), rope.sin.clone())?;
        let (keys, vals) = match extra_kv {
            Some((ke, ve)) => (g.concat_rows(&[k, ke])?, g.concat_rows(&[v, ve])?),
            None => (k, v),
        };
        let a = self.attend(g, q, keys, vals, mask)?;
        let o = self.project(g, p, &format!("l{l}.attn.o"), a)?;
        let x = g.add(x, o)?;

        let h2 = normed(self, g, x, 1)?;
        let m = g.matmul(h2, p.get(&format!("l{l}.mlp.w1"))?)?;
        let m = g.add_row(m, p.get(&format!("l{l}.mlp.b1"))?)?;
        let m = g.gelu(m)?;
        let m = g.matmul(m, p.get(&format!("l{l}.mlp.w2"))?)?;
        let m = g.add_row(m, p.get(&format!("l{l}.mlp.b2"))?)?;
        let x = g.add(x, m)?;
        if !g.value(x).is_finite() {
            return Err(Error::NonFinite(format!("activations after layer {l}")));
        }
        Ok((x, k, v))
    }

    /// Embeds latent patches of the given roles (1 row per token).
    pub(crate) fn embed_images(&self, g: &mut Graph<F>, p: &Bound, tokens: &DTensor<F>, roles: &[Role]) -> Result<Var> {
        let x = g.constant(tokens.clone());
        let h = g.matmul(x, p.get("embed.w")?)?;
        let h = g.add_row(h, p.get("embed.b")?)?;
        let idx: Vec<usize> = roles.iter().map(|r| r.index()).collect();
        let r = g.gather_rows(p.get("role.emb")?, &idx)?;
        g.add(h, r)
    }

    /// Output head over the target rows.
    pub(crate) fn head(&self, g: &mut Graph<F>, p: &Bound, target_rows: Var, c_live: Var) -> Result<Var> {
        let m = self.modulation(g, p, "final.mod", c_live, 2)?;
        let h = self.norm_mod(g, target_rows, Some((m[0], m[1])))?;
        let y = g.matmul(h, p.get("final.w")?)?;
        g.add_row(y, p.get("final.b")?)
    }

    pub(crate) fn rope_tables(&self, positions: &[Position]) -> Result<RopeTables<F>> {
        RopeTables::new(positions, self.cfg.head_dim(), self.cfg.n_heads, self.cfg.rope_base)
    }

    pub(crate) fn text_and_time(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        text: &TextCondition,
        t: f64,
    ) -> Result<(Var, Var)> {
        Ok((self.text_embedding(g, p, text)?, self.time_cond(g, p, t)?))
    }

    pub(crate) fn cond_time(&self, g: &mut Graph<F>, p: &Bound, t: f64) -> Result<Option<Var>> {
        if self.cfg.cond_modulation {
            Ok(Some(self.time_cond(g, p, t)?))
        } else {
            Ok(None)
        }
    }

    /// Uncached forward over the whole sequence. Returns the velocity for
    /// the TARGET span (`target_len × latent_dim`).
    pub fn forward_graph(
        &self,
        g: &mut Graph<F>,
        p: &Bound,
        seq: &TokenSequence<F>,
        t: f64,
        opts: FwdOpts,
    ) -> Result<FwdOut> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::invalid(format!("t = {t} outside [0, 1]")));
        }
        seq.validate()?;
        let mask = AttentionMask::for_roles(&seq.roles, self.cfg.cond_attention);
        let mask_ref = if mask.is_all_true() { None } else { Some(mask.allow.as_slice()) };
        let rope = self.rope_tables(&seq.positions)?;
        let (text, c_live) = self.text_and_time(g, p, &seq.text, t)?;
        let img = self.embed_images(g, p, &seq.image_tokens, &seq.roles[seq.text_len..])?;
        let mut x = g.concat_rows(&[text, img])?;
        let c_cond = self.cond_time(g, p, opts.cond_t.unwrap_or(t))?;
        let n_live = seq.live_len();
        let mut mid = None;
        for l in 0..self.cfg.n_layers {
            x = self.layer(g, p, l, x, n_live, Some(c_live), c_cond, &rope, mask_ref, None)?.0;
            if opts.capture_mid && l == self.cfg.mid_layer() {
                mid = Some(x);
            }
        }
        let tgt = seq.span(Role::Target).expect("validated");
        let rows = g.slice_rows(x, tgt.start, tgt.len)?;
        let velocity = self.head(g, p, rows, c_live)?;
        Ok(FwdOut { velocity, mid })
    }

    /// Inference-only forward returning the target velocity.
    pub fn forward(&self, seq: &TokenSequence<F>, t: f64) -> Result<DTensor<F>> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, |_| false);
        let out = self.forward_graph(&mut g, &p, seq, t, FwdOpts::default())?;
        Ok(g.value(out.velocity).clone())
    }
}

pub(crate) fn name_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Derives a per-purpose seed.
pub fn seed_for(seed: u64, label: &str) -> u64 {
    rng::derive(seed, name_hash(label))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::conditioning::{null_text, pseudo_text, sequence_for};
    use crate::synthbench::{make_quadruple, EditParams, EditSpec};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            image_hw: (16, 16),
            lora_rank: 2,
            ..ModelConfig::default()
        }
    }

    /// Adds noise to every parameter so no block is trivially zero.
    pub(crate) fn randomized<F: Real>(cfg: &ModelConfig, seed: u64) -> Model<F> {
        let mut m = Model::<F>::init(cfg).unwrap();
        let mut r = SplitMix64::new(seed);
        for (_, t) in m.params.iter_mut() {
            for v in t.data_mut() {
                *v += F::c(0.05 * r.next_normal());
            }
        }
        m
    }

    pub(crate) fn tiny_seq<F: Real>(cfg: &ModelConfig, seed: u64, compress: bool) -> TokenSequence<F> {
        let q = make_quadruple(seed, &EditSpec::single(EditParams::Appearance { color: 1 }), cfg.image_hw)
            .unwrap();
        let seq = sequence_for(&q, cfg, compress, null_text()).unwrap();
        let z = crate::flow::noise(&[seq.target_len(), cfg.latent_dim()], seed);
        seq.with_target(&z).unwrap()
    }

    #[test]
    fn output_shape_and_zero_head() {
        let cfg = tiny_cfg();
        let m = Model::<f32>::init(&cfg).unwrap();
        let seq = tiny_seq::<f32>(&cfg, 1, false);
        assert_eq!(seq.len(), 1 + 4 * 16);
        let v = m.forward(&seq, 0.5).unwrap();
        assert_eq!(v.shape(), &[16, 48]);
        assert!(v.data().iter().all(|&x| x == 0.0));
        assert!(m.forward(&seq, 1.5).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig { n_heads: 3, ..tiny_cfg() }.validate().is_err());
        assert!(ModelConfig { patch_size: 3, ..tiny_cfg() }.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
        assert!(ModelConfig::experiment().validate().is_ok());
    }

    #[test]
    fn lora_zero_init_keeps_outputs() {
        let cfg = tiny_cfg();
        let mut m = randomized::<f32>(&cfg, 3);
        let seq = tiny_seq::<f32>(&cfg, 2, false);
        let before = m.forward(&seq, 0.3).unwrap();
        m.attach_lora(9);
        assert!(m.has_lora());
        assert_eq!(m.forward(&seq, 0.3).unwrap(), before);
    }

    #[test]
    fn lora_linear_contract() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(DTensor::from_f64(&[2, 4], &[1., 2., 3., 4., 5., 6., 7., 8.]).unwrap());
        let w = g.constant(DTensor::eye(4));
        let a = g.constant(DTensor::full(&[4, 2], 0.5));
        let b0 = g.constant(DTensor::zeros(&[2, 4]));
        let y = lora_linear(&mut g, x, w, a, b0, 1.0).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let b = g.constant(DTensor::full(&[2, 4], 1.0));
        let y = lora_linear(&mut g, x, w, a, b, 0.0).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.constant(DTensor::zeros(&[3, 4]));
        assert!(lora_linear(&mut g, x, w, a, bad, 1.0).is_err());
    }

    #[test]
    fn full_rank_lora_reproduces_any_delta() {
        // A = I, B = ΔW is an exact rank-d factorization.
        let mut r = SplitMix64::new(5);
        let delta: Vec<f64> = (0..16).map(|_| r.next_normal()).collect();
        let xs: Vec<f64> = (0..12).map(|_| r.next_normal()).collect();
        let mut g = Graph::<f64>::new();
        let x = g.constant(DTensor::from_f64(&[3, 4], &xs).unwrap());
        let w = g.constant(DTensor::zeros(&[4, 4]));
        let a = g.constant(DTensor::eye(4));
        let b = g.constant(DTensor::from_f64(&[4, 4], &delta).unwrap());
        let y = lora_linear(&mut g, x, w, a, b, 1.0).unwrap();
        let want = g.value(x).matmul(g.value(b)).unwrap();
        assert!(g.value(y).max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn text_conditions_change_outputs_only_through_embeddings() {
        let cfg = tiny_cfg();
        let m = randomized::<f64>(&cfg, 4);
        let seq = tiny_seq::<f64>(&cfg, 3, false);
        let mut other = seq.clone();
        other.text = pseudo_text(5, cfg.text_vocab).unwrap();
        let a = m.forward(&seq, 0.4).unwrap();
        let b = m.forward(&other, 0.4).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() > 0.0);
        let mut bad = seq.clone();
        bad.text = crate::conditioning::TextCondition {
            mode: crate::conditioning::TextMode::Pseudo([Some(cfg.text_vocab), None]),
        };
        assert!(m.forward(&bad, 0.4).is_err());
    }

    #[test]
    fn single_token_identity_attention() {
        let cfg = ModelConfig {
            d_model: 32,
            n_heads: 1,
            ..tiny_cfg()
        };
        let m = Model::<f64>::init(&cfg).unwrap();
        let mut g = Graph::<f64>::new();
        let tok = DTensor::from_f64(&[1, 32], &(0..32).map(|i| i as f64 * 0.1).collect::<Vec<_>>()).unwrap();
        let x = g.constant(tok.clone());
        let e = g.constant(DTensor::eye(32));
        let y = m.attend(&mut g, x, x, x, None).unwrap();
        let y2 = g.matmul(y, e).unwrap();
        assert_eq!(g.value(y2), &tok);
    }

    #[test]
    fn fm_loss_gradient_through_model() {
        let cfg = ModelConfig {
            d_model: 16,
            n_heads: 1,
            n_layers: 2,
            image_hw: (8, 8),
            ..ModelConfig::default()
        };
        let m = randomized::<f64>(&cfg, 6);
        let seq = tiny_seq::<f64>(&cfg, 4, false);
        let z0 = crate::flow::noise::<f64>(&[4, 48], 10);
        let z1 = crate::flow::noise::<f64>(&[4, 48], 11);
        let target = crate::flow::oracle_velocity(&z0, &z1).unwrap();
        let w0 = m.params.get("l0.attn.q").unwrap().clone();
        let err = crate::autodiff::grad_check(
            |g: &mut Graph<f64>, w: Var| {
                let mut p = m.bind(g, |_| false);
                p.vars.insert("l0.attn.q".into(), w);
                let s = seq.with_target(&crate::flow::interpolate(&z0, &z1, 0.3)?)?;
                let out = m.forward_graph(g, &p, &s, 0.3, FwdOpts::default())?;
                crate::flow::regression_loss(g, out.velocity, &target)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "relative error {err}");
    }
}
