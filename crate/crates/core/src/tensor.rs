//! Dense row-major arrays and the scalar abstraction shared by the 32-bit
//! training path and the 64-bit gradient-check path.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Scalar type of the differentiable substrate.
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;

    /// `c = a · b + beta · c` for row-major `a: m×k`, `b: k×n`, `c: m×n`.
    /// `trans_a` / `trans_b` read the operand as its transpose.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    #[inline]
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("representable constant")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $name:expr, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k);
                assert_eq!(b.len(), k * n);
                assert_eq!(c.len(), m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                // SAFETY: slice lengths were checked above against the strides used.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

static LIVE_BYTES: AtomicUsize = AtomicUsize::new(0);
static PEAK_BYTES: AtomicUsize = AtomicUsize::new(0);

fn track_alloc(bytes: usize) {
    let live = LIVE_BYTES.fetch_add(bytes, Ordering::Relaxed) + bytes;
    PEAK_BYTES.fetch_max(live, Ordering::Relaxed);
}

fn track_free(bytes: usize) {
    LIVE_BYTES.fetch_sub(bytes, Ordering::Relaxed);
}

/// Allocation high-water mark of tensor buffers, in bytes.
pub fn peak_tensor_bytes() -> usize {
    PEAK_BYTES.load(Ordering::Relaxed)
}

/// Resets the high-water mark to the currently live byte count.
pub fn reset_peak_tensor_bytes() {
    PEAK_BYTES.store(LIVE_BYTES.load(Ordering::Relaxed), Ordering::Relaxed);
}

/// Dense row-major tensor.
#[derive(PartialEq)]
pub struct DTensor<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> DTensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        track_alloc(n * std::mem::size_of::<F>());
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![F::zero(); n]).expect("zeros")
    }

    pub fn full(shape: &[usize], v: F) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![v; n]).expect("full")
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| F::c(v)).collect())
    }

    /// 2-D helper.
    pub fn matrix(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = F::one();
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows × cols view of the tensor: leading axes collapse into rows.
    pub fn dims2(&self) -> (usize, usize) {
        match self.shape.len() {
            0 => (1, 1),
            1 => (1, self.shape[0]),
            _ => {
                let cols = *self.shape.last().unwrap();
                (self.data.len() / cols, cols)
            }
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self::new(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect()).expect("map")
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(F, F) -> F) -> Result<Self> {
        self.same_shape(other)?;
        Self::new(
            self.shape.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn sum(&self) -> F {
        pairwise_sum(&self.data)
    }

    pub fn cast<G: Real>(&self) -> DTensor<G> {
        DTensor::new(
            self.shape.clone(),
            self.data.iter().map(|v| G::c(v.f64())).collect(),
        )
        .expect("cast")
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// Rows `start..start+len` of a 2-D view.
    pub fn rows(&self, start: usize, len: usize) -> Result<Self> {
        let (r, c) = self.dims2();
        if start + len > r || len == 0 {
            return Err(Error::Shape(format!("rows {start}+{len} out of {r}")));
        }
        Self::matrix(len, c, self.data[start * c..(start + len) * c].to_vec())
    }

    /// Row-wise concatenation of 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[&Self]) -> Result<Self> {
        let c = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of nothing".into()))?
            .dims2()
            .1;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let (r, pc) = p.dims2();
            if pc != c {
                return Err(Error::Shape(format!("concat cols {pc} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(&p.data);
        }
        Self::matrix(rows, c, data)
    }

    /// Plain (non-differentiable) matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2();
        let (k2, n) = other.dims2();
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![F::zero(); m * n];
        F::gemm(m, k, n, &self.data, false, &other.data, false, F::zero(), &mut out);
        Self::matrix(m, n, out)
    }
}

impl<F: Real> Clone for DTensor<F> {
    fn clone(&self) -> Self {
        track_alloc(self.data.len() * std::mem::size_of::<F>());
        Self {
            shape: self.shape.clone(),
            data: self.data.clone(),
        }
    }
}

impl<F: Real> Drop for DTensor<F> {
    fn drop(&mut self) {
        track_free(self.data.len() * std::mem::size_of::<F>());
    }
}

impl<F: Real> Debug for DTensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "DTensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

/// Order-fixed pairwise summation.
pub fn pairwise_sum<F: Real>(xs: &[F]) -> F {
    if xs.len() <= 32 {
        xs.iter().fold(F::zero(), |a, &b| a + b)
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(DTensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DTensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let x = DTensor::<f64>::from_f64(&[3, 2], &[1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(DTensor::eye(3).matmul(&x).unwrap(), x);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2., 3., 4.];
        let b = [5.0f64, 6., 7., 8.];
        let mut c = [0.0; 4];
        f64::gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26., 30., 38., 44.]);
        f64::gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17., 23., 39., 53.]);
    }

    #[test]
    fn peak_tracks_allocations() {
        reset_peak_tensor_bytes();
        let before = peak_tensor_bytes();
        let t = DTensor::<f32>::zeros(&[1024]);
        assert!(peak_tensor_bytes() >= before + 4096 || peak_tensor_bytes() >= 4096);
        drop(t);
    }
}
