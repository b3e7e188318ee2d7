//! Deterministic synthetic edit-transfer benchmark.
//!
//! A scene is one hard-edged shape on a flat background. Colors live on an
//! 8-level grid per channel (`(2k+1)/16`), which is also the bin layout of
//! the metric histograms, so every color maps to exactly one bin. Backgrounds
//! are drawn from dark levels and objects from bright ones. A and B of a
//! quadruple share their colors and differ in geometry.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::par::Exec;
use crate::rng::{self, SplitMix64};

/// Per-channel color levels, each in `0..8`.
pub type Levels = [u8; 3];

pub fn level_value(k: u8) -> f32 {
    (2 * k as u32 + 1) as f32 / 16.0
}

pub fn color_of(l: Levels) -> [f32; 3] {
    l.map(level_value)
}

/// Nearest level of a channel value.
pub fn snap(v: f32) -> u8 {
    ((v * 16.0 - 1.0) / 2.0).round().clamp(0.0, 7.0) as u8
}

pub fn snap_color(c: [f32; 3]) -> Levels {
    c.map(snap)
}

pub const OBJECT_COLORS: [Levels; 8] = [
    [7, 4, 4],
    [4, 7, 4],
    [4, 4, 7],
    [7, 7, 4],
    [7, 4, 7],
    [4, 7, 7],
    [7, 5, 4],
    [5, 4, 7],
];

pub const BACKGROUND_COLORS: [Levels; 8] = [
    [3, 0, 0],
    [0, 3, 0],
    [0, 0, 3],
    [3, 3, 0],
    [3, 0, 3],
    [0, 3, 3],
    [2, 1, 0],
    [1, 0, 2],
];

/// Objects keep this distance (frame units) from every edge.
pub const MARGIN: f64 = 1.0 / 16.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    NonRigid,
    Style,
    Background,
    Appearance,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::NonRigid,
        Category::Style,
        Category::Background,
        Category::Appearance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::NonRigid => "non_rigid",
            Category::Style => "style",
            Category::Background => "background",
            Category::Appearance => "appearance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let t = s.to_ascii_lowercase().replace('-', "_");
        Category::ALL
            .into_iter()
            .find(|c| c.name() == t)
            .ok_or_else(|| Error::invalid(format!("unknown edit category `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Circle,
    Square,
    Triangle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PaletteMap {
    /// `(r, g, b) → (g, b, r)`.
    Rotate,
    /// `k → 7 - k` on every channel.
    Invert,
    /// `(r, g, b) → (b, g, r)`.
    SwapRb,
}

impl PaletteMap {
    pub const ALL: [PaletteMap; 3] = [PaletteMap::Rotate, PaletteMap::Invert, PaletteMap::SwapRb];

    pub fn apply(self, c: Levels) -> Levels {
        match self {
            PaletteMap::Rotate => [c[1], c[2], c[0]],
            PaletteMap::Invert => c.map(|k| 7 - k),
            PaletteMap::SwapRb => [c[2], c[1], c[0]],
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleStep {
    Shrink,
    Keep,
    Grow,
}

impl ScaleStep {
    pub const ALL: [ScaleStep; 3] = [ScaleStep::Shrink, ScaleStep::Keep, ScaleStep::Grow];

    pub fn factor(self) -> f64 {
        match self {
            ScaleStep::Shrink => 0.8,
            ScaleStep::Keep => 1.0,
            ScaleStep::Grow => 1.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub background: Levels,
    pub shape: Shape,
    pub object: Levels,
    /// `(x, y)` in frame units.
    pub center: (f64, f64),
    /// Radius of the circumscribing circle, frame units.
    pub radius: f64,
    pub palette_id: u8,
}

impl Scene {
    pub fn in_frame(&self) -> bool {
        let (x, y) = self.center;
        let r = self.radius;
        let eps = 1e-12;
        x - r >= MARGIN - eps && x + r <= 1.0 - MARGIN + eps && y - r >= MARGIN - eps && y + r <= 1.0 - MARGIN + eps
    }

    fn same_geometry(&self, o: &Scene) -> bool {
        self.shape == o.shape && self.center == o.center && self.radius == o.radius
    }
}

/// One atomic edit with quantized parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditParams {
    /// Translation in eighths of the frame plus a scale step.
    NonRigid { dx: i8, dy: i8, scale: ScaleStep },
    Style { map: PaletteMap },
    /// Index into [`BACKGROUND_COLORS`].
    Background { color: usize },
    /// Index into [`OBJECT_COLORS`].
    Appearance { color: usize },
}

/// Size of the instruction-id table.
pub const INSTRUCTION_VOCAB: usize = 27 + 3 + 8 + 8;

impl EditParams {
    pub fn category(&self) -> Category {
        match self {
            EditParams::NonRigid { .. } => Category::NonRigid,
            EditParams::Style { .. } => Category::Style,
            EditParams::Background { .. } => Category::Background,
            EditParams::Appearance { .. } => Category::Appearance,
        }
    }

    /// Instruction id: category plus quantized parameters.
    pub fn instruction_id(&self) -> usize {
        match *self {
            EditParams::NonRigid { dx, dy, scale } => {
                ((dx + 1) as usize * 3 + (dy + 1) as usize) * 3 + scale as usize
            }
            EditParams::Style { map } => 27 + map.index(),
            EditParams::Background { color } => 30 + color,
            EditParams::Appearance { color } => 38 + color,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            EditParams::NonRigid { dx, dy, .. } if !(-1..=1).contains(&dx) || !(-1..=1).contains(&dy) => {
                Err(Error::invalid("translation steps must be in -1..=1"))
            }
            EditParams::Background { color } if color >= BACKGROUND_COLORS.len() => {
                Err(Error::invalid(format!("background color index {color}")))
            }
            EditParams::Appearance { color } if color >= OBJECT_COLORS.len() => {
                Err(Error::invalid(format!("object color index {color}")))
            }
            _ => Ok(()),
        }
    }

    fn apply(&self, s: &mut Scene) -> Result<()> {
        match *self {
            EditParams::NonRigid { dx, dy, scale } => {
                s.center.0 += dx as f64 / 8.0;
                s.center.1 += dy as f64 / 8.0;
                s.radius *= scale.factor();
                if !s.in_frame() {
                    return Err(Error::Generation("edited object leaves the frame".into()));
                }
            }
            EditParams::Style { map } => {
                s.background = map.apply(s.background);
                s.object = map.apply(s.object);
                s.palette_id = map.index() as u8 + 1;
            }
            EditParams::Background { color } => s.background = BACKGROUND_COLORS[color],
            EditParams::Appearance { color } => s.object = OBJECT_COLORS[color],
        }
        Ok(())
    }

    /// Uniform draw of a non-identity edit of `cat`.
    pub fn random(cat: Category, r: &mut SplitMix64) -> Self {
        match cat {
            Category::NonRigid => loop {
                let dx = r.below(3) as i8 - 1;
                let dy = r.below(3) as i8 - 1;
                let scale = ScaleStep::ALL[r.below(3) as usize];
                if dx != 0 || dy != 0 || scale != ScaleStep::Keep {
                    return EditParams::NonRigid { dx, dy, scale };
                }
            },
            Category::Style => EditParams::Style {
                map: PaletteMap::ALL[r.below(3) as usize],
            },
            Category::Background => EditParams::Background {
                color: r.below(BACKGROUND_COLORS.len() as u64) as usize,
            },
            Category::Appearance => EditParams::Appearance {
                color: r.below(OBJECT_COLORS.len() as u64) as usize,
            },
        }
    }
}

/// A primary edit and an optional second one applied after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditSpec {
    pub params: EditParams,
    pub composite: Option<EditParams>,
}

impl EditSpec {
    pub fn single(params: EditParams) -> Self {
        Self {
            params,
            composite: None,
        }
    }

    pub fn pair(first: EditParams, second: EditParams) -> Result<Self> {
        if first.category() == second.category() {
            return Err(Error::invalid("a composite needs two different categories"));
        }
        Ok(Self {
            params: first,
            composite: Some(second),
        })
    }

    /// Translation by zero with unchanged scale.
    pub fn identity() -> Self {
        Self::single(EditParams::NonRigid {
            dx: 0,
            dy: 0,
            scale: ScaleStep::Keep,
        })
    }

    pub fn category(&self) -> Category {
        self.params.category()
    }

    pub fn steps(&self) -> impl Iterator<Item = &EditParams> {
        std::iter::once(&self.params).chain(self.composite.iter())
    }

    pub fn instruction_ids(&self) -> [Option<usize>; 2] {
        [
            Some(self.params.instruction_id()),
            self.composite.map(|c| c.instruction_id()),
        ]
    }

    pub fn is_composite(&self) -> bool {
        self.composite.is_some()
    }
}

fn scene_rng(seed: u64) -> SplitMix64 {
    SplitMix64::stream(seed, 0x7363656e65)
}

fn draw_geometry(r: &mut SplitMix64) -> (Shape, (f64, f64), f64) {
    let shape = [Shape::Circle, Shape::Square, Shape::Triangle][r.below(3) as usize];
    let rk = 8 + r.below(6);
    let radius = rk as f64 / 64.0;
    let lo = 4 + rk;
    let hi = 64 - 4 - rk;
    let mut coord = || (lo + r.below(hi - lo + 1)) as f64 / 64.0;
    let x = coord();
    let y = coord();
    (shape, (x, y), radius)
}

/// Scene drawn from the portable generator.
pub fn gen_scene(seed: u64) -> Scene {
    let mut r = scene_rng(seed);
    let background = BACKGROUND_COLORS[r.below(8) as usize];
    let object = OBJECT_COLORS[r.below(8) as usize];
    let (shape, center, radius) = draw_geometry(&mut r);
    Scene {
        background,
        shape,
        object,
        center,
        radius,
        palette_id: 0,
    }
}

/// New geometry with the colors of `like`.
pub fn gen_scene_like(seed: u64, like: &Scene) -> Scene {
    let mut r = scene_rng(seed);
    let (shape, center, radius) = draw_geometry(&mut r);
    Scene {
        shape,
        center,
        radius,
        ..*like
    }
}

pub fn apply_edit(scene: &Scene, edit: &EditSpec) -> Result<Scene> {
    let mut s = *scene;
    for e in edit.steps() {
        e.validate()?;
        e.apply(&mut s)?;
    }
    Ok(s)
}

/// Object coverage of every pixel center.
pub fn object_mask(scene: &Scene, hw: (usize, usize)) -> Vec<bool> {
    let (h, w) = hw;
    let (cx, cy) = scene.center;
    let r = scene.radius;
    let s3 = 3f64.sqrt() / 2.0;
    let tri = [(0.0, -r), (r * s3, r / 2.0), (-r * s3, r / 2.0)];
    let inside = |u: f64, v: f64| -> bool {
        match scene.shape {
            Shape::Circle => u * u + v * v <= r * r,
            Shape::Square => u.abs() <= 0.8 * r && v.abs() <= 0.8 * r,
            Shape::Triangle => (0..3).all(|i| {
                let (ax, ay) = tri[i];
                let (bx, by) = tri[(i + 1) % 3];
                (bx - ax) * (v - ay) - (by - ay) * (u - ax) >= 0.0
            }),
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let u = (x as f64 + 0.5) / w as f64 - cx;
            let v = (y as f64 + 0.5) / h as f64 - cy;
            out.push(inside(u, v));
        }
    }
    out
}

/// Hard-edged rasterization.
pub fn render(scene: &Scene, hw: (usize, usize)) -> Result<Image> {
    if hw.0 < 8 || hw.1 < 8 {
        return Err(Error::invalid(format!("render size {hw:?} below 8x8")));
    }
    let mask = object_mask(scene, hw);
    let bg = color_of(scene.background);
    let fg = color_of(scene.object);
    let data = mask.iter().flat_map(|&m| if m { fg } else { bg }).collect();
    Image::new(hw.0, hw.1, data)
}

/// Scene-independent description of what an edit changed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Recovered {
    pub motion: Option<(i8, i8, ScaleStep)>,
    pub style: Option<PaletteMap>,
    /// Final background color when it is not explained by `style`.
    pub background: Option<Levels>,
    /// Final object color when it is not explained by `style`.
    pub object: Option<Levels>,
}

/// What [`recover_edit`] should report for an applicable edit.
pub fn expected_recovery(edit: &EditSpec) -> Recovered {
    let mut out = Recovered::default();
    let steps: Vec<&EditParams> = edit.steps().collect();
    for (i, e) in steps.iter().enumerate() {
        let later_style = steps[i + 1..].iter().find_map(|s| match s {
            EditParams::Style { map } => Some(*map),
            _ => None,
        });
        let styled = |c: Levels| later_style.map_or(c, |m| m.apply(c));
        match **e {
            EditParams::NonRigid { dx, dy, scale } => {
                if dx != 0 || dy != 0 || scale != ScaleStep::Keep {
                    out.motion = Some((dx, dy, scale));
                }
            }
            EditParams::Style { map } => out.style = Some(map),
            EditParams::Background { color } => out.background = Some(styled(BACKGROUND_COLORS[color])),
            EditParams::Appearance { color } => out.object = Some(styled(OBJECT_COLORS[color])),
        }
    }
    out
}

fn quantized(img: &Image) -> Vec<Levels> {
    img.data.chunks_exact(3).map(|c| snap_color([c[0], c[1], c[2]])).collect()
}

fn mode(colors: impl Iterator<Item = Levels>) -> Option<Levels> {
    let mut counts: BTreeMap<Levels, usize> = BTreeMap::new();
    for c in colors {
        *counts.entry(c).or_default() += 1;
    }
    // Highest count; ties go to the smallest color.
    counts
        .into_iter()
        .fold(None, |best: Option<(Levels, usize)>, (c, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((c, n)),
        })
        .map(|(c, _)| c)
}

fn border(h: usize, w: usize) -> impl Iterator<Item = usize> {
    (0..h * w).filter(move |i| {
        let (y, x) = (i / w, i % w);
        y == 0 || x == 0 || y == h - 1 || x == w - 1
    })
}

struct Layout {
    bg: Levels,
    obj: Option<Levels>,
    mask: Vec<bool>,
}

fn layout(img: &Image) -> Layout {
    let q = quantized(img);
    let bg = mode(border(img.h, img.w).map(|i| q[i])).expect("non-empty border");
    let mask: Vec<bool> = q.iter().map(|&c| c != bg).collect();
    let obj = mode(q.iter().zip(&mask).filter(|(_, &m)| m).map(|(c, _)| *c));
    Layout { bg, obj, mask }
}

fn centroid_area(mask: &[bool], w: usize) -> Option<((f64, f64), f64)> {
    let mut n = 0.0;
    let (mut sx, mut sy) = (0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        sx += (i % w) as f64 + 0.5;
        sy += (i / w) as f64 + 0.5;
        n += 1.0;
    }
    (n > 0.0).then(|| ((sx / n, sy / n), n))
}

/// Rule-based recovery of the edit between two renders.
pub fn recover_edit(before: &Image, after: &Image) -> Recovered {
    let l0 = layout(before);
    let l1 = layout(after);
    let mut out = Recovered::default();
    if l0.mask != l1.mask {
        if let (Some((c0, a0)), Some((c1, a1))) = (centroid_area(&l0.mask, before.w), centroid_area(&l1.mask, after.w)) {
            let step_x = before.w as f64 / 8.0;
            let step_y = before.h as f64 / 8.0;
            let dx = ((c1.0 - c0.0) / step_x).round().clamp(-1.0, 1.0) as i8;
            let dy = ((c1.1 - c0.1) / step_y).round().clamp(-1.0, 1.0) as i8;
            let ratio = a1 / a0;
            let scale = if ratio > 1.15 {
                ScaleStep::Grow
            } else if ratio < 0.87 {
                ScaleStep::Shrink
            } else {
                ScaleStep::Keep
            };
            if dx != 0 || dy != 0 || scale != ScaleStep::Keep {
                out.motion = Some((dx, dy, scale));
            }
        }
    }
    let (bg0, bg1) = (l0.bg, l1.bg);
    let cost = |s: Option<PaletteMap>| -> (usize, Option<Levels>, Option<Levels>) {
        let f = |c: Levels| s.map_or(c, |m| m.apply(c));
        let bg = (f(bg0) != bg1).then_some(bg1);
        let obj = match (l0.obj, l1.obj) {
            (Some(a), Some(b)) if f(a) != b => Some(b),
            _ => None,
        };
        (s.is_some() as usize + bg.is_some() as usize + obj.is_some() as usize, bg, obj)
    };
    // Ties prefer an explanation by a palette map (in map order).
    let mut best = (usize::MAX, None, None, None);
    for s in PaletteMap::ALL.into_iter().map(Some).chain([None]) {
        let (c, bg, obj) = cost(s);
        if c < best.0 {
            best = (c, s, bg, obj);
        }
    }
    out.style = best.1;
    out.background = best.2;
    out.object = best.3;
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Quadruple {
    pub id: String,
    pub seed: u64,
    pub edit: EditSpec,
    pub a: Image,
    pub a_prime: Image,
    pub b: Image,
    pub b_prime: Image,
    /// Pixels that differ between B and B'.
    pub mask_b: Vec<bool>,
}

impl Quadruple {
    pub fn hw(&self) -> (usize, usize) {
        (self.b.h, self.b.w)
    }

    pub fn category(&self) -> Category {
        self.edit.category()
    }
}

pub fn diff_mask(x: &Image, y: &Image) -> Vec<bool> {
    x.data
        .chunks_exact(3)
        .zip(y.data.chunks_exact(3))
        .map(|(a, b)| a != b)
        .collect()
}

/// Two scenes sharing colors, the same edit applied to both. Scenes are
/// re-drawn (up to 8 times) until the edit fits both and is recovered
/// identically from (A, A') and (B, B').
pub fn make_quadruple(seed: u64, edit: &EditSpec, hw: (usize, usize)) -> Result<Quadruple> {
    let expected = expected_recovery(edit);
    let mut last = String::new();
    for attempt in 0..8u64 {
        let sa = gen_scene(rng::derive(seed, 2 * attempt));
        let sb = gen_scene_like(rng::derive(seed, 2 * attempt + 1), &sa);
        if sa.same_geometry(&sb) {
            last = "identical scenes".into();
            continue;
        }
        let (ea, eb) = match (apply_edit(&sa, edit), apply_edit(&sb, edit)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                last = e.to_string();
                continue;
            }
        };
        let a = render(&sa, hw)?;
        let a_prime = render(&ea, hw)?;
        let b = render(&sb, hw)?;
        let b_prime = render(&eb, hw)?;
        if recover_edit(&a, &a_prime) != expected || recover_edit(&b, &b_prime) != expected {
            last = "edit not recoverable from the renders".into();
            continue;
        }
        let mask_b = diff_mask(&b, &b_prime);
        return Ok(Quadruple {
            id: String::new(),
            seed,
            edit: *edit,
            a,
            a_prime,
            b,
            b_prime,
            mask_b,
        });
    }
    Err(Error::Generation(format!("seed {seed}: no valid scene pair after 8 attempts ({last})")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub categories: Vec<Category>,
    pub per_category: usize,
    /// Composites as a fraction of the single-edit count.
    pub composite_fraction: f64,
    pub hw: (usize, usize),
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            categories: Category::ALL.to_vec(),
            per_category: 50,
            composite_fraction: 0.25,
            hw: (32, 32),
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn n_composite(&self) -> usize {
        (self.composite_fraction * (self.categories.len() * self.per_category) as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_category == 0 {
            return Err(Error::config("data.per_category", "must be >= 1"));
        }
        if self.categories.is_empty() {
            return Err(Error::config("data.categories", "empty"));
        }
        if !(0.0..=10.0).contains(&self.composite_fraction) {
            return Err(Error::config("data.composite_fraction", "must be in [0, 10]"));
        }
        if self.hw.0 < 8 || self.hw.1 < 8 {
            return Err(Error::config("data.hw", "images must be at least 8x8"));
        }
        Ok(())
    }
}

fn item_seed(seed: u64, tag: &str, i: usize, retry: u64) -> u64 {
    let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    rng::derive(rng::derive(rng::derive(seed, h), i as u64), retry)
}

fn draw_item(seed: u64, cats: &[Category], composite: bool, hw: (usize, usize)) -> Result<Quadruple> {
    let mut r = SplitMix64::stream(seed, 0x65646974);
    let edit = if composite {
        let pool: &[Category] = if cats.len() >= 2 { cats } else { &Category::ALL };
        let i = r.below(pool.len() as u64) as usize;
        let mut j = r.below(pool.len() as u64 - 1) as usize;
        if j >= i {
            j += 1;
        }
        EditSpec::pair(EditParams::random(pool[i], &mut r), EditParams::random(pool[j], &mut r))?
    } else {
        EditSpec::single(EditParams::random(cats[0], &mut r))
    };
    make_quadruple(seed, &edit, hw)
}

/// In-memory benchmark: `per_category` items per category (in the given
/// order) followed by the composites.
pub fn generate(cfg: &BenchmarkConfig, exec: Exec) -> Result<Vec<Quadruple>> {
    cfg.validate()?;
    let mut jobs: Vec<(String, Vec<Category>, bool, usize)> = Vec::new();
    for &c in &cfg.categories {
        for i in 0..cfg.per_category {
            jobs.push((format!("{}_{i:04}", c.name()), vec![c], false, i));
        }
    }
    for i in 0..cfg.n_composite() {
        jobs.push((format!("composite_{i:04}"), cfg.categories.clone(), true, i));
    }
    exec.try_map(&jobs, |(id, cats, comp, i)| {
        let tag = id.split('_').next().unwrap_or_default().to_string();
        let mut last = None;
        for retry in 0..64 {
            let seed = item_seed(cfg.seed, &tag, *i, retry);
            match draw_item(seed, cats, *comp, cfg.hw) {
                Ok(mut q) => {
                    q.id = id.clone();
                    return Ok(q);
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last.expect("at least one attempt"))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaRecord {
    pub id: String,
    pub seed: u64,
    pub category: Category,
    pub params: EditParams,
    pub composite: Option<EditParams>,
}

fn mask_image(mask: &[bool], hw: (usize, usize)) -> Result<Image> {
    Image::new(
        hw.0,
        hw.1,
        mask.iter().flat_map(|&m| [if m { 1.0 } else { 0.0 }; 3]).collect(),
    )
}

/// Writes PNGs and `metadata.jsonl` into `dir`.
pub fn write_split(dir: &Path, items: &[Quadruple]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta_path = dir.join("metadata.jsonl");
    let mut meta = fs::File::create(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    for q in items {
        let hw = q.hw();
        for (tag, img) in [("A", &q.a), ("Ap", &q.a_prime), ("B", &q.b), ("Bp", &q.b_prime)] {
            img.save_png(&dir.join(format!("{}_{tag}.png", q.id)))?;
        }
        mask_image(&q.mask_b, hw)?.save_png(&dir.join(format!("{}_mask.png", q.id)))?;
        let rec = MetaRecord {
            id: q.id.clone(),
            seed: q.seed,
            category: q.edit.category(),
            params: q.edit.params,
            composite: q.edit.composite,
        };
        let line = serde_json::to_string(&rec)?;
        writeln!(meta, "{line}").map_err(|e| Error::io(&meta_path, e))?;
    }
    Ok(())
}

/// Generates and writes a benchmark split.
pub fn make_benchmark(cfg: &BenchmarkConfig, dir: &Path) -> Result<Vec<Quadruple>> {
    let items = generate(cfg, Exec::best())?;
    write_split(dir, &items)?;
    Ok(items)
}

pub fn read_metadata(dir: &Path) -> Result<Vec<MetaRecord>> {
    let path = dir.join("metadata.jsonl");
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads a split written by [`write_split`].
pub fn load_split(dir: &Path) -> Result<Vec<Quadruple>> {
    read_metadata(dir)?
        .into_iter()
        .map(|m| {
            let load = |tag: &str| Image::load_png(&dir.join(format!("{}_{tag}.png", m.id)));
            let mask = load("mask")?;
            let edit = EditSpec {
                params: m.params,
                composite: m.composite,
            };
            if edit.category() != m.category {
                return Err(Error::Format(format!("{}: category disagrees with params", m.id)));
            }
            Ok(Quadruple {
                id: m.id.clone(),
                seed: m.seed,
                edit,
                a: load("A")?,
                a_prime: load("Ap")?,
                b: load("B")?,
                b_prime: load("Bp")?,
                mask_b: mask.data.chunks_exact(3).map(|c| c[0] > 0.5).collect(),
            })
        })
        .collect()
}

fn median(mut v: Vec<f32>) -> Option<f32> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f32::total_cmp);
    Some(v[v.len() / 2])
}

fn median_color(img: &Image, select: &[bool]) -> Option<Levels> {
    let mut ch = [Vec::new(), Vec::new(), Vec::new()];
    for (i, px) in img.data.chunks_exact(3).enumerate() {
        if select[i] {
            for c in 0..3 {
                ch[c].push(px[c]);
            }
        }
    }
    let [r, g, b] = ch;
    Some(snap_color([median(r)?, median(g)?, median(b)?]))
}

/// Tolerant check that a generated `candidate` realizes the edit: median
/// background and object colors (on the ground-truth layout) snap to the
/// ground-truth levels, and a nearest-color segmentation overlaps the
/// ground-truth object with IoU ≥ 0.5.
pub fn oracle_success(q: &Quadruple, candidate: &Image) -> bool {
    let gt = layout(&q.b_prime);
    let outside: Vec<bool> = gt.mask.iter().map(|m| !m).collect();
    let (Some(gt_obj), Some(obj), Some(bg)) = (gt.obj, median_color(candidate, &gt.mask), median_color(candidate, &outside))
    else {
        return false;
    };
    if obj != gt_obj || bg != gt.bg {
        return false;
    }
    let (fc, bc) = (color_of(gt_obj), color_of(gt.bg));
    let d2 = |p: &[f32], c: [f32; 3]| (0..3).map(|i| (p[i] - c[i]).powi(2)).sum::<f32>();
    let seg: Vec<bool> = candidate.data.chunks_exact(3).map(|p| d2(p, fc) < d2(p, bc)).collect();
    let inter = seg.iter().zip(&gt.mask).filter(|(a, b)| **a && **b).count();
    let union = seg.iter().zip(&gt.mask).filter(|(a, b)| **a || **b).count();
    union > 0 && inter as f64 / union as f64 >= 0.5
}

/// RMSE between a candidate and the ground-truth B'.
pub fn oracle_rmse(q: &Quadruple, candidate: &Image) -> f64 {
    let n = candidate.data.len().max(1) as f64;
    let s: f64 = candidate
        .data
        .iter()
        .zip(&q.b_prime.data)
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum();
    (s / n).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_snap_back() {
        for k in 0..8 {
            assert_eq!(snap(level_value(k)), k);
            assert_eq!(snap((level_value(k) * 255.0).round() / 255.0), k);
        }
    }

    #[test]
    fn instruction_ids_are_distinct() {
        let mut ids = std::collections::BTreeSet::new();
        for dx in -1..=1 {
            for dy in -1..=1 {
                for scale in ScaleStep::ALL {
                    ids.insert(EditParams::NonRigid { dx, dy, scale }.instruction_id());
                }
            }
        }
        for map in PaletteMap::ALL {
            ids.insert(EditParams::Style { map }.instruction_id());
        }
        for color in 0..8 {
            ids.insert(EditParams::Background { color }.instruction_id());
            ids.insert(EditParams::Appearance { color }.instruction_id());
        }
        assert_eq!(ids.len(), INSTRUCTION_VOCAB);
        assert_eq!(*ids.iter().max().unwrap(), INSTRUCTION_VOCAB - 1);
    }

    #[test]
    fn background_only_scene_is_constant() {
        let mut s = gen_scene(1);
        s.radius = 0.0;
        s.shape = Shape::Square;
        let img = render(&s, (16, 16)).unwrap();
        assert_eq!(img, Image::filled(16, 16, color_of(s.background)));
    }

    #[test]
    fn identity_edit_has_empty_mask() {
        let q = make_quadruple(3, &EditSpec::identity(), (32, 32)).unwrap();
        assert!(q.mask_b.iter().all(|m| !m));
    }

    #[test]
    fn ground_truth_passes_the_oracle() {
        let q = make_quadruple(
            11,
            &EditSpec::single(EditParams::Appearance { color: 2 }),
            (32, 32),
        )
        .unwrap();
        assert!(oracle_success(&q, &q.b_prime));
        assert!(!oracle_success(&q, &q.b));
        assert_eq!(oracle_rmse(&q, &q.b_prime), 0.0);
    }
}
