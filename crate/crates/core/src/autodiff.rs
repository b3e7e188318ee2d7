//! Tape-based reverse-mode differentiation over [`DTensor`] values.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse. Tensors are treated as row-major matrices (leading axes
//! collapse into rows). Broadcasting is limited to scalar scaling and
//! row-wise bias/scale.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{pairwise_sum, DTensor, Real};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Differentiable primitives provided by the substrate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Primitive {
    MatMul,
    MatMulTransposed,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    AddRow,
    MulRow,
    SoftmaxRows,
    RmsNorm,
    Gelu,
    Tanh,
    Silu,
    Sin,
    Cos,
    Rotary,
    Mse,
    Mean,
    Sum,
    ConcatRows,
    SliceRows,
    ConcatCols,
    SliceCols,
    GatherRows,
}

impl Primitive {
    pub const ALL: [Primitive; 25] = [
        Primitive::MatMul,
        Primitive::MatMulTransposed,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::AddRow,
        Primitive::MulRow,
        Primitive::SoftmaxRows,
        Primitive::RmsNorm,
        Primitive::Gelu,
        Primitive::Tanh,
        Primitive::Silu,
        Primitive::Sin,
        Primitive::Cos,
        Primitive::Rotary,
        Primitive::Mse,
        Primitive::Mean,
        Primitive::Sum,
        Primitive::ConcatRows,
        Primitive::SliceRows,
        Primitive::ConcatCols,
        Primitive::SliceCols,
        Primitive::GatherRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::MatMulTransposed => "matmul_nt",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::AddRow => "add_row",
            Primitive::MulRow => "mul_row",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::RmsNorm => "rms_norm",
            Primitive::Gelu => "gelu",
            Primitive::Tanh => "tanh",
            Primitive::Silu => "silu",
            Primitive::Sin => "sin",
            Primitive::Cos => "cos",
            Primitive::Rotary => "rotary",
            Primitive::Mse => "mse",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::ConcatRows => "concat_rows",
            Primitive::SliceRows => "slice_rows",
            Primitive::ConcatCols => "concat_cols",
            Primitive::SliceCols => "slice_cols",
            Primitive::GatherRows => "gather_rows",
        }
    }

    /// Looks a primitive up by name; anything outside the set is an explicit
    /// error rather than a fallback.
    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::Unsupported(name.to_string()))
    }
}

/// The contract listing of the substrate.
pub fn primitive_set() -> &'static [Primitive] {
    &Primitive::ALL
}

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax(Var),
    RmsNorm(Var, Vec<F>),
    Gelu(Var),
    Tanh(Var),
    Silu(Var),
    Sin(Var),
    Cos(Var),
    Rotary(Var, Arc<Vec<F>>, Arc<Vec<F>>),
    Mse(Var, Var),
    Mean(Var),
    Sum(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
}

struct Node<F: Real> {
    value: DTensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Recording tape.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    checked: bool,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads<F: Real> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Grads<F> {
    pub fn get(&self, v: Var) -> Option<DTensor<F>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        DTensor::new(self.shapes[v.0].clone(), g.clone()).ok()
    }

    pub fn take(&mut self, v: Var) -> Option<DTensor<F>> {
        let g = self.grads.get_mut(v.0)?.take()?;
        DTensor::new(self.shapes[v.0].clone(), g).ok()
    }
}

impl<F: Real> Graph<F> {
    /// New tape; non-finite checking is on for 64-bit scalars.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            checked: F::NAME == "f64",
        }
    }

    pub fn with_checks(mut self, on: bool) -> Self {
        self.checked = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, v: Var) -> &DTensor<F> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: DTensor<F>, op: Op<F>, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "output of node {} ({:?})",
                self.nodes.len(),
                value.shape()
            )));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable input.
    pub fn param(&mut self, t: DTensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, t: DTensor<F>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    fn mat(&self, rows: usize, cols: usize, data: Vec<F>) -> Result<DTensor<F>> {
        DTensor::matrix(rows, cols, data)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            F::zero(),
            &mut out,
        );
        let v = self.mat(m, n, out)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul_nt {m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            F::zero(),
            &mut out,
        );
        let v = self.mat(m, n, out)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<DTensor<F>> {
        self.value(a).zip_map(self.value(b), f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        let v = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(v, Op::AddScalar(a), rg)
    }

    fn row_broadcast(
        &mut self,
        a: Var,
        row: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<DTensor<F>> {
        let (m, n) = self.dims(a);
        let (rr, rn) = self.dims(row);
        if rr != 1 || rn != n {
            return Err(Error::Shape(format!("row broadcast {m}x{n} with {rr}x{rn}")));
        }
        let av = self.value(a).data();
        let rv = self.value(row).data();
        let out = av
            .chunks(n)
            .flat_map(|r| r.iter().zip(rv).map(|(&x, &y)| f(x, y)))
            .collect();
        self.mat(m, n, out)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast(a, row, |x, y| x + y)?;
        let rg = self.rg(&[a, row]);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let v = self.row_broadcast(a, row, |x, y| x * y)?;
        let rg = self.rg(&[a, row]);
        self.push(v, Op::MulRow(a, row), rg)
    }

    /// Row-wise softmax. With a mask, disallowed entries get probability
    /// exactly zero (logit −∞); a row with no allowed entry is an error.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::Shape(format!(
                    "mask of {} entries for {m}x{n} logits",
                    mk.len()
                )));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let allowed = |j: usize| mask.is_none_or(|mk| mk[r * n + j]);
            let mut mx = F::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > mx {
                    mx = v;
                }
            }
            if mx == F::neg_infinity() {
                return Err(Error::Invalid(format!("attention row {r} has no allowed column")));
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut s = F::zero();
            for j in 0..n {
                if allowed(j) {
                    let e = (row[j] - mx).exp();
                    o[j] = e;
                    s += e;
                }
            }
            let inv = F::one() / s;
            for v in o.iter_mut() {
                *v *= inv;
            }
        }
        let v = self.mat(m, n, out)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Softmax(a), rg)
    }

    /// Row-wise RMS normalization without gain.
    pub fn rms_norm(&mut self, a: Var, eps: F) -> Result<Var> {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * n);
        let mut inv = Vec::with_capacity(m);
        let nf = F::c(n as f64);
        for row in x.chunks(n) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / nf;
            let r = F::one() / (ms + eps).sqrt();
            inv.push(r);
            out.extend(row.iter().map(|&v| v * r));
        }
        let v = self.mat(m, n, out)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::RmsNorm(a, inv), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let v = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(v, op, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, gelu_fwd, Op::Gelu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x / (F::one() + (-x).exp()), Op::Silu(a))
    }

    pub fn sin(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.sin(), Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| x.cos(), Op::Cos(a))
    }

    /// Rotates adjacent channel pairs `(2p, 2p+1)` of each row by per-row,
    /// per-pair angles given as `cos`/`sin` tables of shape `rows × cols/2`.
    pub fn rotary(&mut self, a: Var, cos: Arc<Vec<F>>, sin: Arc<Vec<F>>) -> Result<Var> {
        let (m, n) = self.dims(a);
        if n % 2 != 0 || cos.len() != m * n / 2 || sin.len() != cos.len() {
            return Err(Error::Shape(format!(
                "rotary on {m}x{n} with {} angles",
                cos.len()
            )));
        }
        let x = self.value(a).data();
        let mut out = vec![F::zero(); m * n];
        let h = n / 2;
        for r in 0..m {
            for p in 0..h {
                let (c, s) = (cos[r * h + p], sin[r * h + p]);
                let (x0, x1) = (x[r * n + 2 * p], x[r * n + 2 * p + 1]);
                out[r * n + 2 * p] = x0 * c - x1 * s;
                out[r * n + 2 * p + 1] = x0 * s + x1 * c;
            }
        }
        let v = self.mat(m, n, out)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Rotary(a, cos, sin), rg)
    }

    /// Mean of squared differences, as a `[1]` tensor.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.binary(a, b, |x, y| (x - y) * (x - y))?;
        let n = F::c(d.len() as f64);
        let v = DTensor::new(vec![1], vec![d.sum() / n])?;
        let rg = self.rg(&[a, b]);
        self.push(v, Op::Mse(a, b), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let v = DTensor::new(vec![1], vec![x.sum() / F::c(x.len() as f64)])?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Mean(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = DTensor::new(vec![1], vec![self.value(a).sum()])?;
        let rg = self.rg(&[a]);
        self.push(v, Op::Sum(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let refs: Vec<&DTensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let v = DTensor::concat_rows(&refs)?;
        let rg = self.rg(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).rows(start, len)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceRows(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims(*parts.first().ok_or_else(|| Error::Shape("empty concat".into()))?).0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims(p);
            if r != m {
                return Err(Error::Shape(format!("concat_cols rows {r} vs {m}")));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        let v = self.mat(m, total, out)?;
        let rg = self.rg(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n || len == 0 {
            return Err(Error::Shape(format!("cols {start}+{len} out of {n}")));
        }
        let x = self.value(a).data();
        let out = (0..m)
            .flat_map(|r| x[r * n + start..r * n + start + len].iter().copied())
            .collect();
        let v = self.mat(m, len, out)?;
        let rg = self.rg(&[a]);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(table);
        let x = self.value(table).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Shape(format!("gather row {i} of {m}")));
            }
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let v = self.mat(idx.len(), n, out)?;
        let rg = self.rg(&[table]);
        self.push(v, Op::GatherRows(table, idx.to_vec()), rg)
    }

    /// Reverse pass from a scalar (`[1]`-sized) output.
    pub fn backward(&self, out: Var) -> Result<Grads<F>> {
        if self.value(out).len() != 1 {
            return Err(Error::Shape(format!(
                "backward from non-scalar {:?}",
                self.value(out).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        grads[out.0] = Some(vec![F::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if self.checked && g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of node {i}")));
            }
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accum(&self, grads: &mut [Option<Vec<F>>], v: Var, f: impl FnOnce(&mut [F])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accum(grads, *a, |da| F::gemm(m, n, k, g, false, bv, true, F::one(), da));
                self.accum(grads, *b, |db| F::gemm(k, m, n, av, true, g, false, F::one(), db));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accum(grads, *a, |da| F::gemm(m, n, k, g, false, bv, false, F::one(), da));
                self.accum(grads, *b, |db| F::gemm(n, m, k, g, true, av, false, F::one(), db));
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, |d| add_into(d, g));
                self.accum(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |d| add_into(d, g));
                self.accum(grads, *b, |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accum(grads, *a, |d| {
                    for ((x, &gy), &bb) in d.iter_mut().zip(g).zip(bv) {
                        *x += gy * bb;
                    }
                });
                self.accum(grads, *b, |d| {
                    for ((x, &gy), &aa) in d.iter_mut().zip(g).zip(av) {
                        *x += gy * aa;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accum(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, &gy)| *x += gy * s));
            }
            Op::AddScalar(a) => self.accum(grads, *a, |d| add_into(d, g)),
            Op::AddRow(a, row) => {
                let n = self.dims(*a).1;
                self.accum(grads, *a, |d| add_into(d, g));
                self.accum(grads, *row, |d| {
                    for gr in g.chunks(n) {
                        add_into(d, gr);
                    }
                });
            }
            Op::MulRow(a, row) => {
                let n = self.dims(*a).1;
                let av = self.value(*a).data();
                let rv = self.value(*row).data();
                self.accum(grads, *a, |d| {
                    for (dr, gr) in d.chunks_mut(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            dr[j] += gr[j] * rv[j];
                        }
                    }
                });
                self.accum(grads, *row, |d| {
                    for (ar, gr) in av.chunks(n).zip(g.chunks(n)) {
                        for j in 0..n {
                            d[j] += gr[j] * ar[j];
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = self.dims(*a).1;
                self.accum(grads, *a, |d| {
                    for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let dot: F = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum();
                        for j in 0..n {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::RmsNorm(a, inv) => {
                let n = self.dims(*a).1;
                let nf = F::c(n as f64);
                self.accum(grads, *a, |d| {
                    for (r, ((dr, gr), yr)) in
                        d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)).enumerate()
                    {
                        let dot: F = gr.iter().zip(yr).map(|(&p, &q)| p * q).sum::<F>() / nf;
                        for j in 0..n {
                            dr[j] += (gr[j] - yr[j] * dot) * inv[r];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accum(grads, *a, |d| {
                    for ((dd, &gy), &xx) in d.iter_mut().zip(g).zip(x) {
                        *dd += gy * gelu_grad(xx);
                    }
                });
            }
            Op::Tanh(a) => self.accum(grads, *a, |d| {
                for ((dd, &gy), &yy) in d.iter_mut().zip(g).zip(y) {
                    *dd += gy * (F::one() - yy * yy);
                }
            }),
            Op::Silu(a) => {
                let x = self.value(*a).data();
                self.accum(grads, *a, |d| {
                    for ((dd, &gy), &xx) in d.iter_mut().zip(g).zip(x) {
                        let s = F::one() / (F::one() + (-xx).exp());
                        *dd += gy * (s + xx * s * (F::one() - s));
                    }
                });
            }
            Op::Sin(a) => {
                let x = self.value(*a).data();
                self.accum(grads, *a, |d| {
                    for ((dd, &gy), &xx) in d.iter_mut().zip(g).zip(x) {
                        *dd += gy * xx.cos();
                    }
                });
            }
            Op::Cos(a) => {
                let x = self.value(*a).data();
                self.accum(grads, *a, |d| {
                    for ((dd, &gy), &xx) in d.iter_mut().zip(g).zip(x) {
                        *dd -= gy * xx.sin();
                    }
                });
            }
            Op::Rotary(a, cos, sin) => {
                let (m, n) = self.dims(*a);
                let h = n / 2;
                self.accum(grads, *a, |d| {
                    for r in 0..m {
                        for p in 0..h {
                            let (c, s) = (cos[r * h + p], sin[r * h + p]);
                            let (g0, g1) = (g[r * n + 2 * p], g[r * n + 2 * p + 1]);
                            d[r * n + 2 * p] += g0 * c + g1 * s;
                            d[r * n + 2 * p + 1] += -g0 * s + g1 * c;
                        }
                    }
                });
            }
            Op::Mse(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let k = g[0] * F::c(2.0) / F::c(av.len() as f64);
                self.accum(grads, *a, |d| {
                    for ((dd, &x), &z) in d.iter_mut().zip(av).zip(bv) {
                        *dd += k * (x - z);
                    }
                });
                self.accum(grads, *b, |d| {
                    for ((dd, &x), &z) in d.iter_mut().zip(av).zip(bv) {
                        *dd -= k * (x - z);
                    }
                });
            }
            Op::Mean(a) => {
                let k = g[0] / F::c(self.value(*a).len() as f64);
                self.accum(grads, *a, |d| d.iter_mut().for_each(|x| *x += k));
            }
            Op::Sum(a) => {
                let k = g[0];
                self.accum(grads, *a, |d| d.iter_mut().for_each(|x| *x += k));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accum(grads, p, |d| add_into(d, &g[off..off + len]));
                    off += len;
                }
            }
            Op::SliceRows(a, start) => {
                let c = self.dims(*a).1;
                let off = start * c;
                self.accum(grads, *a, |d| add_into(&mut d[off..off + g.len()], g));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.dims2().1;
                let m = node.value.dims2().0;
                let mut off = 0;
                for &p in parts {
                    let c = self.dims(p).1;
                    self.accum(grads, p, |d| {
                        for r in 0..m {
                            add_into(&mut d[r * c..(r + 1) * c], &g[r * total + off..r * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceCols(a, start) => {
                let n = self.dims(*a).1;
                let (m, len) = node.value.dims2();
                let start = *start;
                self.accum(grads, *a, |d| {
                    for r in 0..m {
                        add_into(
                            &mut d[r * n + start..r * n + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::GatherRows(table, idx) => {
                let n = self.dims(*table).1;
                self.accum(grads, *table, |d| {
                    for (k, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * n..(i + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
        }
        Ok(())
    }
}

#[inline]
fn add_into<F: Real>(d: &mut [F], g: &[F]) {
    for (x, &y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu_fwd<F: Real>(x: F) -> F {
    let k = F::c(GELU_K);
    let u = k * (x + F::c(0.044715) * x * x * x);
    F::c(0.5) * x * (F::one() + u.tanh())
}

#[inline]
fn gelu_grad<F: Real>(x: F) -> F {
    let k = F::c(GELU_K);
    let u = k * (x + F::c(0.044715) * x * x * x);
    let th = u.tanh();
    let du = k * (F::one() + F::c(3.0 * 0.044715) * x * x);
    F::c(0.5) * (F::one() + th) + F::c(0.5) * x * (F::one() - th * th) * du
}

/// Scalar-valued function of one tensor, recorded on a fresh graph.
pub trait ScalarFn: Fn(&mut Graph<f64>, Var) -> Result<Var> {}
impl<T: Fn(&mut Graph<f64>, Var) -> Result<Var>> ScalarFn for T {}

/// Largest relative disagreement between the reverse-mode gradient of `f`
/// at `x` and its central finite difference with step `eps`.
pub fn grad_check(f: impl ScalarFn, x: &DTensor<f64>, eps: f64) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::invalid(format!("eps {eps} outside (0, 1e-2]")));
    }
    let eval = |t: DTensor<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::new().with_checks(true);
        let v = g.constant(t);
        let out = f(&mut g, v)?;
        let y = g.value(out).data()[0];
        if !y.is_finite() {
            return Err(Error::NonFinite("objective value".into()));
        }
        Ok(y)
    };
    let mut g = Graph::<f64>::new().with_checks(true);
    let v = g.param(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 || !g.value(out).data()[0].is_finite() {
        return Err(Error::NonFinite("objective value".into()));
    }
    let analytic = g
        .backward(out)?
        .take(v)
        .unwrap_or_else(|| DTensor::zeros(x.shape()));
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// Sums per-item gradient sets in item order (fixed reduction order).
pub fn sum_in_order<F: Real>(items: Vec<Vec<DTensor<F>>>) -> Option<Vec<DTensor<F>>> {
    let mut it = items.into_iter();
    let mut acc = it.next()?;
    for item in it {
        for (a, b) in acc.iter_mut().zip(item) {
            for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += y;
            }
        }
    }
    Some(acc)
}

/// Order-fixed mean of scalars.
pub fn mean_in_order<F: Real>(xs: &[F]) -> F {
    pairwise_sum(xs) / F::c(xs.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn rand_tensor(seed: u64, shape: &[usize]) -> DTensor<f64> {
        let mut r = SplitMix64::new(seed);
        let n = shape.iter().product::<usize>();
        DTensor::from_f64(shape, &(0..n).map(|_| r.next_f64() * 2.0 - 1.0).collect::<Vec<_>>())
            .unwrap()
    }

    fn check(name: &str, shape: &[usize], f: impl ScalarFn) {
        for seed in 0..4 {
            let x = rand_tensor(seed + 11, shape);
            let err = grad_check(&f, &x, 1e-5).unwrap();
            assert!(err <= 1e-4, "{name}: rel err {err}");
        }
    }

    #[test]
    fn softmax_of_singleton_is_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(DTensor::from_f64(&[1, 1], &[3.7]).unwrap());
        let y = g.softmax_rows(x, None).unwrap();
        assert_eq!(g.value(y).data(), &[1.0]);
    }

    #[test]
    fn identity_matmul_and_zero_mse() {
        let mut g = Graph::<f64>::new();
        let x = rand_tensor(1, &[3, 4]);
        let i = g.constant(DTensor::eye(3));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
        let m = g.mse(xv, xv).unwrap();
        assert_eq!(g.value(m).data(), &[0.0]);
    }

    #[test]
    fn unknown_primitive_is_explicit_error() {
        assert!(matches!(Primitive::from_name("conv2d"), Err(Error::Unsupported(_))));
        for p in primitive_set() {
            assert_eq!(Primitive::from_name(p.name()).unwrap(), *p);
        }
    }

    #[test]
    fn fully_masked_row_is_error() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(DTensor::zeros(&[2, 2]));
        assert!(g.softmax_rows(x, Some(&[true, false, false, false])).is_err());
    }

    #[test]
    fn grad_check_quadratic_and_linear() {
        let x = DTensor::from_f64(&[2], &[1.0, 2.0]).unwrap();
        let e = grad_check(
            |g: &mut Graph<f64>, v| {
                let sq = g.mul(v, v)?;
                g.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(e <= 1e-6, "{e}");

        let x = rand_tensor(5, &[2, 3]);
        let mut g = Graph::<f64>::new();
        let v = g.param(x.clone());
        let s = g.sum(v).unwrap();
        let grad = g.backward(s).unwrap().take(v).unwrap();
        assert!(grad.data().iter().all(|&d| d == 1.0));
        let e = grad_check(|g: &mut Graph<f64>, v| g.sum(v), &x, 1e-5).unwrap();
        assert!(e <= 1e-8, "{e}");
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let x = DTensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(grad_check(|g: &mut Graph<f64>, v| g.sum(v), &x, 0.1).is_err());
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let w = rand_tensor(99, &[3, 2]);
        let w2 = rand_tensor(98, &[4, 3]);
        let row = rand_tensor(97, &[1, 3]);
        check("matmul", &[2, 3], |g: &mut Graph<f64>, v| {
            let wv = g.constant(w.clone());
            let y = g.matmul(v, wv)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        });
        check("matmul_nt", &[2, 3], |g: &mut Graph<f64>, v| {
            let wv = g.constant(w2.clone());
            let y = g.matmul_nt(v, wv)?;
            let y2 = g.mul(y, y)?;
            let z = g.matmul_nt(v, v)?;
            let s = g.sum(z)?;
            let t = g.sum(y2)?;
            g.add(s, t)
        });
        check("add/sub/mul/scale", &[2, 3], |g: &mut Graph<f64>, v| {
            let a = g.scale(v, 1.7)?;
            let b = g.add(a, v)?;
            let c = g.sub(b, v)?;
            let d = g.mul(c, v)?;
            let e = g.add_scalar(d, 0.3)?;
            let f = g.mul(e, e)?;
            g.mean(f)
        });
        check("row broadcast", &[2, 3], |g: &mut Graph<f64>, v| {
            let r = g.param(row.clone());
            let a = g.add_row(v, r)?;
            let b = g.mul_row(a, r)?;
            let s = g.slice_rows(v, 0, 1)?;
            let c = g.mul_row(b, s)?;
            let d = g.mul(c, c)?;
            g.sum(d)
        });
        check("softmax", &[3, 4], |g: &mut Graph<f64>, v| {
            let mask = [true, true, false, true, true, true, true, true, false, false, true, false];
            let y = g.softmax_rows(v, Some(&mask))?;
            let y2 = g.mul(y, v)?;
            g.sum(y2)
        });
        check("rms_norm", &[2, 4], |g: &mut Graph<f64>, v| {
            let y = g.rms_norm(v, 1e-6)?;
            let y2 = g.mul(y, v)?;
            g.sum(y2)
        });
        check("nonlinear", &[2, 3], |g: &mut Graph<f64>, v| {
            let a = g.gelu(v)?;
            let b = g.tanh(a)?;
            let c = g.silu(b)?;
            let d = g.sin(c)?;
            let e = g.cos(d)?;
            let f = g.mul(e, v)?;
            g.sum(f)
        });
        check("rotary", &[2, 4], |g: &mut Graph<f64>, v| {
            let ang = [0.3, -1.2, 2.0, 0.7];
            let cos = Arc::new(ang.iter().map(|a: &f64| a.cos()).collect());
            let sin = Arc::new(ang.iter().map(|a: &f64| a.sin()).collect());
            let y = g.rotary(v, cos, sin)?;
            let y2 = g.mul(y, v)?;
            g.sum(y2)
        });
        check("mse", &[2, 3], |g: &mut Graph<f64>, v| {
            let t = g.constant(w.reshape(&[2, 3]).unwrap());
            g.mse(v, t)
        });
        check("concat/slice", &[2, 4], |g: &mut Graph<f64>, v| {
            let a = g.slice_cols(v, 1, 2)?;
            let b = g.slice_rows(v, 1, 1)?;
            let c = g.concat_cols(&[a, v])?;
            let d = g.concat_rows(&[v, b])?;
            let c2 = g.mul(c, c)?;
            let d2 = g.mul(d, d)?;
            let s1 = g.sum(c2)?;
            let s2 = g.sum(d2)?;
            g.add(s1, s2)
        });
        check("gather", &[3, 2], |g: &mut Graph<f64>, v| {
            let a = g.gather_rows(v, &[2, 0, 2])?;
            let b = g.mul(a, a)?;
            g.sum(b)
        });
    }

    #[test]
    fn deterministic_outputs() {
        let run = || {
            let mut g = Graph::<f32>::new();
            let x = g.constant(rand_tensor(3, &[5, 8]).cast());
            let y = g.matmul_nt(x, x).unwrap();
            let z = g.softmax_rows(y, None).unwrap();
            g.value(z).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
