//! Condition compression, sequence assembly and the text channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{encode_latent, Image};
use crate::model::{positions_for, Model, Role, Span, TokenSequence};
use crate::tensor::{DTensor, Real};

/// Resolutions of the three condition images relative to the target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    pub target_hw: (usize, usize),
    /// Resolution of A and A'.
    pub prompt_hw: (usize, usize),
    /// Resolution of B.
    pub query_hw: (usize, usize),
}

impl CompressionConfig {
    /// Every condition at target resolution.
    pub fn uncompressed(hw: (usize, usize)) -> Self {
        Self {
            target_hw: hw,
            prompt_hw: hw,
            query_hw: hw,
        }
    }

    /// Prompt pair at half and query at quarter resolution.
    pub fn halves_and_quarters(hw: (usize, usize)) -> Self {
        Self {
            target_hw: hw,
            prompt_hw: (hw.0 / 2, hw.1 / 2),
            query_hw: (hw.0 / 4, hw.1 / 4),
        }
    }

    fn ratio(&self, side: (usize, usize), what: &str) -> Result<f64> {
        if side.0 == 0 || side.1 == 0 {
            return Err(Error::invalid(format!("{what} resolution {side:?} is empty")));
        }
        let ry = self.target_hw.0 as f64 / side.0 as f64;
        let rx = self.target_hw.1 as f64 / side.1 as f64;
        if ry < 1.0 || rx < 1.0 {
            return Err(Error::invalid(format!(
                "{what} resolution {side:?} exceeds target {:?} (upsampling)",
                self.target_hw
            )));
        }
        if ry != rx {
            return Err(Error::invalid(format!("{what} ratio differs per axis ({ry} vs {rx})")));
        }
        Ok(ry)
    }

    /// Prompt downsampling ratio.
    pub fn d1(&self) -> Result<f64> {
        self.ratio(self.prompt_hw, "prompt")
    }

    /// Query downsampling ratio.
    pub fn d2(&self) -> Result<f64> {
        self.ratio(self.query_hw, "query")
    }

    pub fn is_identity(&self) -> bool {
        self.prompt_hw == self.target_hw && self.query_hw == self.target_hw
    }

    /// Exact image-token count for patch size `p`.
    pub fn image_tokens(&self, p: usize) -> usize {
        let g = |hw: (usize, usize)| (hw.0 / p) * (hw.1 / p);
        g(self.target_hw) + 2 * g(self.prompt_hw) + g(self.query_hw)
    }
}

/// `L · (1 + 2/d1² + 1/d2²)` with `L = M·N/p²`.
pub fn token_count_formula(target_hw: (usize, usize), p: usize, d1: f64, d2: f64) -> f64 {
    let l = (target_hw.0 * target_hw.1) as f64 / (p * p) as f64;
    l * (1.0 + 2.0 / (d1 * d1) + 1.0 / (d2 * d2))
}

/// Fractional reduction of image tokens against four full-resolution images.
pub fn token_reduction(d1: f64, d2: f64) -> f64 {
    1.0 - (1.0 + 2.0 / (d1 * d1) + 1.0 / (d2 * d2)) / 4.0
}

#[derive(Debug, Clone)]
pub struct Compressed {
    pub a: Image,
    pub a_prime: Image,
    pub b: Image,
    pub d1: f64,
    pub d2: f64,
}

/// Area-averages A, A' to the prompt resolution and B to the query
/// resolution.
pub fn compress_conditions(a: &Image, a_prime: &Image, b: &Image, cfg: &CompressionConfig) -> Result<Compressed> {
    let d1 = cfg.d1()?;
    let d2 = cfg.d2()?;
    for (name, img) in [("A", a), ("A'", a_prime), ("B", b)] {
        if (img.h, img.w) != cfg.target_hw {
            return Err(Error::Shape(format!(
                "{name} is {}x{}, expected target size {:?}",
                img.h, img.w, cfg.target_hw
            )));
        }
    }
    Ok(Compressed {
        a: a.downsample(cfg.prompt_hw.0, cfg.prompt_hw.1)?,
        a_prime: a_prime.downsample(cfg.prompt_hw.0, cfg.prompt_hw.1)?,
        b: b.downsample(cfg.query_hw.0, cfg.query_hw.1)?,
        d1,
        d2,
    })
}

/// Which embedding feeds the text slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextMode {
    /// The learned null vector.
    Null,
    /// Null vector plus instruction-table rows (one id, or two for composites).
    Pseudo([Option<usize>; 2]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextCondition {
    pub mode: TextMode,
}

impl TextCondition {
    pub fn is_null(&self) -> bool {
        self.mode == TextMode::Null
    }

    /// Current embedding (`text_slots × d_model`) under `model`'s weights.
    pub fn embedding<F: Real>(&self, model: &Model<F>) -> Result<DTensor<F>> {
        let slots = model.cfg.text_slots;
        match self.mode {
            TextMode::Null => Ok(model.params.get("text.null")?.clone()),
            TextMode::Pseudo(ids) => {
                let table = model.params.get("text.table")?;
                let mut acc: Option<DTensor<F>> = None;
                let base = model.params.get("text.null")?;
                for id in ids.into_iter().flatten() {
                    if id >= model.cfg.text_vocab {
                        return Err(Error::invalid(format!("instruction id {id} outside vocabulary")));
                    }
                    let rows = table.rows(id * slots, slots)?;
                    acc = Some(match acc {
                        None => rows,
                        Some(a) => a.zip_map(&rows, |x, y| x + y)?,
                    });
                }
                let acc = acc.ok_or_else(|| Error::invalid("empty instruction"))?;
                base.zip_map(&acc, |x, y| x + y)
            }
        }
    }
}

pub fn null_text() -> TextCondition {
    TextCondition { mode: TextMode::Null }
}

/// Text condition for one instruction id of a `vocab`-entry table.
pub fn pseudo_text(id: usize, vocab: usize) -> Result<TextCondition> {
    if id >= vocab {
        return Err(Error::invalid(format!("unknown edit type {id} (vocabulary {vocab})")));
    }
    Ok(TextCondition {
        mode: TextMode::Pseudo([Some(id), None]),
    })
}

/// Text condition from up to two instruction ids.
pub fn pseudo_text_ids(ids: [Option<usize>; 2], vocab: usize) -> Result<TextCondition> {
    if ids[0].is_none() {
        return Err(Error::invalid("instruction without a primary id"));
    }
    for id in ids.into_iter().flatten() {
        if id >= vocab {
            return Err(Error::invalid(format!("unknown edit type {id} (vocabulary {vocab})")));
        }
    }
    Ok(TextCondition {
        mode: TextMode::Pseudo(ids),
    })
}

/// Latent patches and grids of the three (possibly compressed) conditions.
#[derive(Debug, Clone)]
pub struct Conditions<F: Real> {
    pub query: (DTensor<F>, (usize, usize)),
    pub prompt_src: (DTensor<F>, (usize, usize)),
    pub prompt_tgt: (DTensor<F>, (usize, usize)),
    pub d1: f64,
    pub d2: f64,
}

impl<F: Real> Conditions<F> {
    /// Compresses and encodes A, A', B.
    pub fn encode(a: &Image, a_prime: &Image, b: &Image, cfg: &CompressionConfig, p: usize) -> Result<Self> {
        let c = compress_conditions(a, a_prime, b, cfg)?;
        Ok(Self {
            query: encode_latent(&c.b, p)?,
            prompt_src: encode_latent(&c.a, p)?,
            prompt_tgt: encode_latent(&c.a_prime, p)?,
            d1: c.d1,
            d2: c.d2,
        })
    }

    pub fn len(&self) -> usize {
        self.query.0.dims2().0 + self.prompt_src.0.dims2().0 + self.prompt_tgt.0.dims2().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Builds `[TEXT | TARGET | QUERY | PROMPT_SRC | PROMPT_TGT]`.
pub fn assemble_sequence<F: Real>(
    text: TextCondition,
    text_slots: usize,
    z_target: &DTensor<F>,
    target_grid: (usize, usize),
    cond: &Conditions<F>,
) -> Result<TokenSequence<F>> {
    if text_slots == 0 {
        return Err(Error::invalid("text_slots must be >= 1"));
    }
    if z_target.dims2().0 != target_grid.0 * target_grid.1 {
        return Err(Error::Shape(format!(
            "{} target tokens for grid {target_grid:?}",
            z_target.dims2().0
        )));
    }
    let blocks: [(Role, &DTensor<F>, (usize, usize), f64); 4] = [
        (Role::Target, z_target, target_grid, 1.0),
        (Role::Query, &cond.query.0, cond.query.1, cond.d2),
        (Role::PromptSrc, &cond.prompt_src.0, cond.prompt_src.1, cond.d1),
        (Role::PromptTgt, &cond.prompt_tgt.0, cond.prompt_tgt.1, cond.d1),
    ];
    let mut roles = vec![Role::Text; text_slots];
    let mut positions = vec![[0.0; 3]; text_slots];
    let mut spans = vec![Span {
        role: Role::Text,
        start: 0,
        len: text_slots,
    }];
    let mut parts = Vec::with_capacity(4);
    for (role, tokens, grid, ratio) in blocks {
        let n = tokens.dims2().0;
        if n != grid.0 * grid.1 {
            return Err(Error::Shape(format!("{role:?}: {n} tokens for grid {grid:?}")));
        }
        let start = roles.len();
        if spans.last().is_some_and(|s| s.start + s.len > start) {
            return Err(Error::invalid(format!("span {role:?} overlaps its predecessor")));
        }
        spans.push(Span { role, start, len: n });
        roles.extend(std::iter::repeat_n(role, n));
        positions.extend(positions_for(role, grid, ratio)?);
        parts.push(tokens);
    }
    let seq = TokenSequence {
        text,
        text_len: text_slots,
        image_tokens: DTensor::concat_rows(&parts)?,
        roles,
        positions,
        spans,
        target_grid,
    };
    seq.validate()?;
    Ok(seq)
}

/// Sequence for one benchmark item with a zero TARGET block.
pub fn sequence_for<F: Real>(
    q: &crate::synthbench::Quadruple,
    cfg: &crate::model::ModelConfig,
    compress: bool,
    text: TextCondition,
) -> Result<TokenSequence<F>> {
    let hw = q.hw();
    if hw != cfg.image_hw {
        return Err(Error::Shape(format!("item {} is {hw:?}, model expects {:?}", q.id, cfg.image_hw)));
    }
    let comp = if compress {
        CompressionConfig::halves_and_quarters(hw)
    } else {
        CompressionConfig::uncompressed(hw)
    };
    let cond = Conditions::encode(&q.a, &q.a_prime, &q.b, &comp, cfg.patch_size)?;
    let grid = cfg.target_grid();
    let z = DTensor::zeros(&[grid.0 * grid.1, cfg.latent_dim()]);
    assemble_sequence(text, cfg.text_slots, &z, grid, &cond)
}
