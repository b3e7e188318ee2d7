//! Role-tagged token sequences, 3-D positions and attention masks.

use serde::{Deserialize, Serialize};

use crate::conditioning::TextCondition;
use crate::error::{Error, Result};
use crate::tensor::{DTensor, Real};

/// Role of a token block. Sequence order is fixed: the declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    Text,
    Target,
    Query,
    PromptSrc,
    PromptTgt,
}

impl Role {
    pub const ORDER: [Role; 5] = [
        Role::Text,
        Role::Target,
        Role::Query,
        Role::PromptSrc,
        Role::PromptTgt,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Constant first position coordinate separating the image roles.
    pub fn offset(self) -> Result<f64> {
        match self {
            Role::Target => Ok(0.0),
            Role::Query => Ok(1.0),
            Role::PromptSrc | Role::PromptTgt => Ok(2.0),
            Role::Text => Err(Error::invalid("text tokens carry no image position")),
        }
    }

    pub fn is_condition(self) -> bool {
        matches!(self, Role::Query | Role::PromptSrc | Role::PromptTgt)
    }
}

/// 3-D rotary position `(k, i, j)`.
pub type Position = [f64; 3];

/// `(k, i·d, j·d)` for every cell of a `grid` in raster order.
pub fn positions_for(role: Role, grid: (usize, usize), ratio: f64) -> Result<Vec<Position>> {
    if !(ratio >= 1.0) {
        return Err(Error::invalid(format!("downsample ratio {ratio} < 1")));
    }
    let k = role.offset()?;
    Ok((0..grid.0)
        .flat_map(|i| (0..grid.1).map(move |j| [k, i as f64 * ratio, j as f64 * ratio]))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub role: Role,
    pub start: usize,
    pub len: usize,
}

/// Concatenated sequence `[TEXT | TARGET | QUERY | PROMPT_SRC | PROMPT_TGT]`.
///
/// Image tokens are stored as latent patches (`n_image × latent_dim`); the
/// model's patch embedder lifts them to the model width. The text block is
/// described by its [`TextCondition`] and embedded from model parameters.
#[derive(Debug, Clone)]
pub struct TokenSequence<F: Real> {
    pub text: TextCondition,
    pub text_len: usize,
    pub image_tokens: DTensor<F>,
    pub roles: Vec<Role>,
    pub positions: Vec<Position>,
    pub spans: Vec<Span>,
    pub target_grid: (usize, usize),
}

impl<F: Real> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    pub fn span(&self, role: Role) -> Option<Span> {
        self.spans.iter().copied().find(|s| s.role == role)
    }

    /// Tokens that change with the denoising step (TEXT and TARGET).
    pub fn live_len(&self) -> usize {
        self.spans
            .iter()
            .filter(|s| !s.role.is_condition())
            .map(|s| s.len)
            .sum()
    }

    pub fn cond_len(&self) -> usize {
        self.len() - self.live_len()
    }

    pub fn target_len(&self) -> usize {
        self.span(Role::Target).map_or(0, |s| s.len)
    }

    /// Checks that the spans tile the sequence exactly once in role order
    /// and that roles/positions agree with them.
    pub fn validate(&self) -> Result<()> {
        let mut cursor = 0;
        let mut last: Option<Role> = None;
        for s in &self.spans {
            if s.start != cursor {
                return Err(Error::invalid(format!(
                    "span {:?} starts at {} but the previous span ends at {cursor}",
                    s.role, s.start
                )));
            }
            if last.is_some_and(|l| l >= s.role) {
                return Err(Error::invalid(format!("span {:?} out of order or repeated", s.role)));
            }
            if s.len == 0 {
                return Err(Error::invalid(format!("empty span {:?}", s.role)));
            }
            if self.roles[s.start..s.start + s.len].iter().any(|&r| r != s.role) {
                return Err(Error::invalid(format!("roles disagree with span {:?}", s.role)));
            }
            cursor += s.len;
            last = Some(s.role);
        }
        if cursor != self.roles.len() || self.positions.len() != self.roles.len() {
            return Err(Error::invalid("spans do not cover the sequence"));
        }
        if self.span(Role::Text).map(|s| s.len) != Some(self.text_len) {
            return Err(Error::invalid("text span length mismatch"));
        }
        if self.span(Role::Target).is_none() {
            return Err(Error::invalid("sequence has no target span"));
        }
        let n_img = self.len() - self.text_len;
        if self.image_tokens.dims2().0 != n_img {
            return Err(Error::Shape(format!(
                "{} image tokens for {n_img} image positions",
                self.image_tokens.dims2().0
            )));
        }
        for (r, p) in self.roles.iter().zip(&self.positions) {
            if *r != Role::Text && p[0] != r.offset()? {
                return Err(Error::invalid(format!("{r:?} token with offset {}", p[0])));
            }
        }
        Ok(())
    }

    /// Replaces the latent patches of the TARGET span.
    pub fn with_target(&self, z: &DTensor<F>) -> Result<Self> {
        let span = self.span(Role::Target).ok_or_else(|| Error::invalid("no target span"))?;
        let (n, dim) = z.dims2();
        let (_, img_dim) = self.image_tokens.dims2();
        if n != span.len || dim != img_dim {
            return Err(Error::Shape(format!("target {n}x{dim} for span of {}", span.len)));
        }
        let mut out = self.clone();
        let off = (span.start - self.text_len) * dim;
        out.image_tokens.data_mut()[off..off + n * dim].copy_from_slice(z.data());
        Ok(out)
    }

    pub fn target_tokens(&self) -> Result<DTensor<F>> {
        let span = self.span(Role::Target).ok_or_else(|| Error::invalid("no target span"))?;
        self.image_tokens.rows(span.start - self.text_len, span.len)
    }
}

/// How condition tokens may attend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CondAttention {
    /// Plain bidirectional attention over the whole sequence.
    Full,
    /// Condition tokens attend within the joint condition block.
    #[default]
    Block,
    /// Each condition image attends only to its own tokens.
    PerImage,
}

impl CondAttention {
    pub fn is_causal(self) -> bool {
        !matches!(self, CondAttention::Full)
    }
}

/// `allow[r * n + c]`: may row `r` attend to column `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub n: usize,
    pub allow: Vec<bool>,
}

impl AttentionMask {
    pub fn full(n: usize) -> Self {
        Self {
            n,
            allow: vec![true; n * n],
        }
    }

    pub fn for_roles(roles: &[Role], mode: CondAttention) -> Self {
        let n = roles.len();
        let mut allow = vec![true; n * n];
        if mode.is_causal() {
            for (r, &rr) in roles.iter().enumerate() {
                if !rr.is_condition() {
                    continue;
                }
                for (c, &rc) in roles.iter().enumerate() {
                    allow[r * n + c] = match mode {
                        CondAttention::Block => rc.is_condition(),
                        CondAttention::PerImage => rc == rr,
                        CondAttention::Full => true,
                    };
                }
            }
        }
        Self { n, allow }
    }

    pub fn is_all_true(&self) -> bool {
        self.allow.iter().all(|&a| a)
    }

    /// True when no condition row can see a TEXT or TARGET column.
    pub fn isolates_conditions(&self, roles: &[Role]) -> bool {
        roles.iter().enumerate().all(|(r, rr)| {
            !rr.is_condition()
                || roles
                    .iter()
                    .enumerate()
                    .all(|(c, rc)| rc.is_condition() || !self.allow[r * self.n + c])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn target_positions_are_identity() {
        let p = positions_for(Role::Target, (2, 2), 1.0).unwrap();
        assert_eq!(
            p,
            vec![[0., 0., 0.], [0., 0., 1.], [0., 1., 0.], [0., 1., 1.]]
        );
    }

    #[test]
    fn query_positions_are_interpolated() {
        let p = positions_for(Role::Query, (4, 4), 4.0).unwrap();
        assert_eq!(p[3 * 4], [1.0, 12.0, 0.0]);
        assert!(positions_for(Role::PromptSrc, (2, 2), 2.0)
            .unwrap()
            .iter()
            .all(|q| q[0] == 2.0));
        assert!(positions_for(Role::PromptTgt, (2, 2), 2.0)
            .unwrap()
            .iter()
            .all(|q| q[0] == 2.0));
        assert!(positions_for(Role::Text, (1, 1), 1.0).is_err());
        assert!(positions_for(Role::Query, (1, 1), 0.5).is_err());
    }

    #[test]
    fn causal_mask_shape() {
        let roles = [Role::Text, Role::Target, Role::Query, Role::PromptSrc, Role::PromptTgt];
        let m = AttentionMask::for_roles(&roles, CondAttention::Block);
        assert!(m.isolates_conditions(&roles));
        assert!(m.allow[..10].iter().all(|&a| a)); // text + target rows
        assert_eq!(&m.allow[10..15], &[false, false, true, true, true]);
        let p = AttentionMask::for_roles(&roles, CondAttention::PerImage);
        assert_eq!(&p.allow[15..20], &[false, false, false, true, false]);
        let f = AttentionMask::for_roles(&roles, CondAttention::Full);
        assert!(f.is_all_true() && !f.isolates_conditions(&roles));
    }
}
