//! 3-D rotary embedding over `(k, i, j)` positions.
//!
//! Each head's channel pairs are split across the three axes: `i` and `j`
//! get `floor(2P/5)` pairs each and `k` the remainder (P = head_dim / 2),
//! roughly 1:2:2. Within an axis the pair frequencies follow the geometric
//! ladder `base^(-m / P_axis)`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::sequence::Position;
use crate::tensor::{DTensor, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisSplit {
    pub k: usize,
    pub i: usize,
    pub j: usize,
}

pub fn axis_split(head_dim: usize) -> Result<AxisSplit> {
    if !head_dim.is_multiple_of(2) {
        return Err(Error::invalid(format!("head dim {head_dim} is odd")));
    }
    let pairs = head_dim / 2;
    let ij = 2 * pairs / 5;
    let k = pairs - 2 * ij;
    if ij == 0 || k == 0 {
        return Err(Error::invalid(format!(
            "head dim {head_dim} too small to split across three rotary axes"
        )));
    }
    Ok(AxisSplit { k, i: ij, j: ij })
}

/// Per-pair `(axis, frequency)` for one head.
pub fn pair_frequencies(head_dim: usize, base: f64) -> Result<Vec<(usize, f64)>> {
    let s = axis_split(head_dim)?;
    let mut out = Vec::with_capacity(head_dim / 2);
    for (axis, count) in [(0, s.k), (1, s.i), (2, s.j)] {
        for m in 0..count {
            out.push((axis, base.powf(-(m as f64) / count as f64)));
        }
    }
    Ok(out)
}

/// Rotation angles, `positions.len() × head_dim/2`.
pub fn angles(positions: &[Position], head_dim: usize, base: f64) -> Result<Vec<f64>> {
    let freqs = pair_frequencies(head_dim, base)?;
    Ok(positions
        .iter()
        .flat_map(|p| freqs.iter().map(move |&(axis, f)| p[axis] * f))
        .collect())
}

/// Cos/sin tables covering all heads of a `rows × (heads·head_dim)` matrix.
#[derive(Debug, Clone)]
pub struct RopeTables<F: Real> {
    pub cos: Arc<Vec<F>>,
    pub sin: Arc<Vec<F>>,
}

impl<F: Real> RopeTables<F> {
    pub fn new(positions: &[Position], head_dim: usize, heads: usize, base: f64) -> Result<Self> {
        let a = angles(positions, head_dim, base)?;
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(a.len() * heads);
        let mut sin = Vec::with_capacity(a.len() * heads);
        for row in a.chunks(half) {
            for _ in 0..heads {
                cos.extend(row.iter().map(|x| F::c(x.cos())));
                sin.extend(row.iter().map(|x| F::c(x.sin())));
            }
        }
        Ok(Self {
            cos: Arc::new(cos),
            sin: Arc::new(sin),
        })
    }

    /// Rows `start..start+len` of the tables.
    pub fn rows(&self, start: usize, len: usize, width: usize) -> Self {
        let half = width / 2;
        Self {
            cos: Arc::new(self.cos[start * half..(start + len) * half].to_vec()),
            sin: Arc::new(self.sin[start * half..(start + len) * half].to_vec()),
        }
    }
}

/// Rotates every head of `x` (`rows × heads·head_dim`) by its row's position.
pub fn apply_rope<F: Real>(
    x: &DTensor<F>,
    positions: &[Position],
    head_dim: usize,
    base: f64,
) -> Result<DTensor<F>> {
    let (rows, width) = x.dims2();
    if rows != positions.len() || width % head_dim != 0 {
        return Err(Error::Shape(format!(
            "rope on {rows}x{width} with {} positions, head dim {head_dim}",
            positions.len()
        )));
    }
    let t = RopeTables::<F>::new(positions, head_dim, width / head_dim, base)?;
    let mut g = crate::autodiff::Graph::<F>::new();
    let v = g.constant(x.clone());
    let y = g.rotary(v, t.cos, t.sin)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn splits() {
        assert_eq!(axis_split(32).unwrap(), AxisSplit { k: 4, i: 6, j: 6 });
        assert_eq!(axis_split(16).unwrap(), AxisSplit { k: 2, i: 3, j: 3 });
        assert!(axis_split(4).is_err());
        assert!(axis_split(15).is_err());
    }

    #[test]
    fn zero_positions_leave_tokens_unchanged() {
        let x = DTensor::<f64>::from_f64(&[2, 16], &(0..32).map(|i| i as f64).collect::<Vec<_>>())
            .unwrap();
        let y = apply_rope(&x, &[[0.0; 3]; 2], 16, 100.0).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn scores_depend_only_on_relative_position() {
        let mut r = SplitMix64::new(4);
        let dh = 16;
        let q = DTensor::<f64>::from_f64(&[1, dh], &(0..dh).map(|_| r.next_normal()).collect::<Vec<_>>())
            .unwrap();
        let k = DTensor::<f64>::from_f64(&[1, dh], &(0..dh).map(|_| r.next_normal()).collect::<Vec<_>>())
            .unwrap();
        let dot = |pa: Position, pb: Position| {
            let a = apply_rope(&q, &[pa], dh, 100.0).unwrap();
            let b = apply_rope(&k, &[pb], dh, 100.0).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        let base = dot([1.0, 2.0, 3.0], [0.0, 0.5, 1.0]);
        for shift in [[1.0, 0.0, 0.0], [0.0, 3.5, 0.0], [0.0, 0.0, -2.0], [2.0, 1.0, 7.0]] {
            let pa = [1.0 + shift[0], 2.0 + shift[1], 3.0 + shift[2]];
            let pb = [shift[0], 0.5 + shift[1], 1.0 + shift[2]];
            assert!((dot(pa, pb) - base).abs() <= 1e-5);
        }
    }

    #[test]
    fn fractional_positions_rotate_in_between() {
        let a1 = angles(&[[0.0, 1.0, 0.0]], 16, 100.0).unwrap();
        let a2 = angles(&[[0.0, 2.0, 0.0]], 16, 100.0).unwrap();
        let am = angles(&[[0.0, 1.5, 0.0]], 16, 100.0).unwrap();
        let freqs = pair_frequencies(16, 100.0).unwrap();
        for (p, &(axis, _)) in freqs.iter().enumerate() {
            if axis == 1 {
                assert!(a1[p] < am[p] && am[p] < a2[p]);
            }
        }
    }
}
