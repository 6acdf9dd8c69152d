//! Dense row-major tensors and the numeric kernels built on them.
//!
//! Determinism contract: every reduction in this module accumulates in
//! ascending index order with no reassociation, so results are
//! bit-reproducible across runs and thread counts. Parallel execution (see
//! [`crate::set_threads`]) only partitions independent output elements; it
//! never splits a single reduction.
//!
//! All kernels treat NaN/infinity in their result as an error state.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense tensor with row-major flat storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Build from a shape and flat data. Errors when the element count does
    /// not match the shape product.
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} implies {} elements, got {}",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    /// Tensor of zeros.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    /// Tensor with every element set to `value`.
    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    /// 1-D tensor from a slice.
    pub fn from_slice(values: &[T]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Take ownership of the flat buffer.
    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The two dimensions of a 2-D tensor, or a shape error naming `op`.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::shape(
                op,
                format!("expected a 2-D tensor, got shape {:?}", self.shape),
            ));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// Length of a 1-D tensor, or a shape error naming `op`.
    pub fn dim1(&self, op: &'static str) -> Result<usize> {
        if self.shape.len() != 1 {
            return Err(Error::shape(
                op,
                format!("expected a 1-D tensor, got shape {:?}", self.shape),
            ));
        }
        Ok(self.shape[0])
    }

    /// Row `r` of a 2-D tensor as a slice. Panics on non-2-D shapes or
    /// out-of-range rows (internal indexing errors, not input conditions).
    pub fn row(&self, r: usize) -> &[T] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    /// Mutable row `r` of a 2-D tensor.
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Element `(r, c)` of a 2-D tensor.
    pub fn at2(&self, r: usize, c: usize) -> T {
        self.data[r * self.shape[1] + c]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Error unless every element is finite.
    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    /// Elementwise map to a new tensor of the same shape.
    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Widen to `f64` storage (exact), for the verification math.
    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.to_f64c()).collect(),
        }
    }
}

// ── matmul ──────────────────────────────────────────────────────────────────

/// Matrix product `[m,k] x [k,n] -> [m,n]`.
///
/// Each output element is an independent dot product accumulated in
/// ascending `k`, which fixes the floating-point result exactly; `B` is
/// packed column-major first purely for locality. Errors on shape mismatch
/// and on non-finite output.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, ka) = a.dims2("matmul")?;
    let (kb, n) = b.dims2("matmul")?;
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("[{m},{ka}] x [{kb},{n}]: inner dimensions differ"),
        ));
    }
    let mut bt = vec![T::zero(); n * ka];
    for k in 0..ka {
        let row = &b.data()[k * n..(k + 1) * n];
        for (j, &v) in row.iter().enumerate() {
            bt[j * ka + k] = v;
        }
    }
    let mut out = vec![T::zero(); m * n];
    let threads = crate::threads().min(m.max(1));
    if threads <= 1 || m < 2 {
        matmul_rows(a.data(), &bt, &mut out, 0, m, ka, n);
    } else {
        // Rows are independent; each element keeps its serial ascending-k
        // reduction, so the result is identical for any thread count.
        let chunk = m.div_ceil(threads);
        let a_data = a.data();
        std::thread::scope(|scope| {
            for (t, slab) in out.chunks_mut(chunk * n).enumerate() {
                let start = t * chunk;
                let rows = slab.len() / n;
                let bt_ref = &bt;
                scope.spawn(move || {
                    let mut local = vec![T::zero(); rows * n];
                    matmul_rows(a_data, bt_ref, &mut local, start, start + rows, ka, n);
                    slab.copy_from_slice(&local);
                });
            }
        });
    }
    let result = Tensor::new(vec![m, n], out)?;
    result.ensure_finite("matmul")?;
    Ok(result)
}

/// Compute output rows `[row_start, row_end)` into `out` (offset-relative).
fn matmul_rows<T: Scalar>(
    a: &[T],
    bt: &[T],
    out: &mut [T],
    row_start: usize,
    row_end: usize,
    k: usize,
    n: usize,
) {
    for i in row_start..row_end {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[(i - row_start) * n..(i - row_start + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let bcol = &bt[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for kk in 0..k {
                acc += arow[kk] * bcol[kk];
            }
            *o = acc;
        }
    }
}

// ── softmax ─────────────────────────────────────────────────────────────────

/// Row-wise softmax of a `[m, n]` tensor, optionally with a causal mask.
///
/// Uses max-subtraction for stability. With `causal`, entries at column
/// `j > i` are exactly `0.0` and excluded from the normalization. Errors if
/// any row has no unmasked entries.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>, causal: bool) -> Result<Tensor<T>> {
    let (m, n) = logits.dims2("softmax")?;
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let active = if causal { (i + 1).min(n) } else { n };
        if active == 0 {
            return Err(Error::FullyMaskedRow { row: i });
        }
        let row = logits.row(i);
        let mut mx = row[0];
        for &v in &row[1..active] {
            if v > mx {
                mx = v;
            }
        }
        let orow = &mut out[i * n..(i + 1) * n];
        let mut sum = T::zero();
        for j in 0..active {
            let e = (row[j] - mx).exp();
            orow[j] = e;
            sum += e;
        }
        for o in orow[..active].iter_mut() {
            *o /= sum;
        }
    }
    let result = Tensor::new(vec![m, n], out)?;
    result.ensure_finite("softmax")?;
    Ok(result)
}

// ── rmsnorm ─────────────────────────────────────────────────────────────────

fn rmsnorm_slice<T: Scalar>(x: &[T], gamma: &[T], eps: T, out: &mut [T]) {
    let d = x.len();
    let mut ssq = T::zero();
    for &v in x {
        ssq += v * v;
    }
    let r = (ssq / T::from_f64c(d as f64) + eps).sqrt();
    for i in 0..d {
        out[i] = gamma[i] * x[i] / r;
    }
}

/// Root-mean-square normalization of a 1-D tensor:
/// `y_i = gamma_i * x_i / sqrt(mean(x^2) + eps)`.
///
/// Errors on length mismatch, negative `eps`, and on the degenerate case
/// where the result is non-finite (all-zero input with `eps = 0`).
pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let d = x.dim1("rmsnorm")?;
    let dg = gamma.dim1("rmsnorm")?;
    if d != dg {
        return Err(Error::shape(
            "rmsnorm",
            format!("input has {d} dims but gamma has {dg}"),
        ));
    }
    if d == 0 {
        return Err(Error::EmptyInput("rmsnorm"));
    }
    if eps < T::zero() {
        return Err(Error::invalid("rmsnorm", "eps must be non-negative"));
    }
    let mut out = vec![T::zero(); d];
    rmsnorm_slice(x.data(), gamma.data(), eps, &mut out);
    let result = Tensor::new(vec![d], out)?;
    result.ensure_finite("rmsnorm")?;
    Ok(result)
}

/// Row-wise RMS normalization of a `[S, d]` tensor with a shared `[d]` gamma.
pub fn rmsnorm_rows<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
    let (s, d) = x.dims2("rmsnorm")?;
    let dg = gamma.dim1("rmsnorm")?;
    if d != dg {
        return Err(Error::shape(
            "rmsnorm",
            format!("rows have {d} dims but gamma has {dg}"),
        ));
    }
    if d == 0 {
        return Err(Error::EmptyInput("rmsnorm"));
    }
    if eps < T::zero() {
        return Err(Error::invalid("rmsnorm", "eps must be non-negative"));
    }
    let mut out = vec![T::zero(); s * d];
    for i in 0..s {
        rmsnorm_slice(x.row(i), gamma.data(), eps, &mut out[i * d..(i + 1) * d]);
    }
    let result = Tensor::new(vec![s, d], out)?;
    result.ensure_finite("rmsnorm")?;
    Ok(result)
}

// ── activations ─────────────────────────────────────────────────────────────

/// `tanh` approximation constant for GELU.
const GELU_CUBIC: f64 = 0.044715;
/// `sqrt(2/pi)` for GELU.
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Elementwise nonlinearity used by the MLP gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    /// `x * sigmoid(x)`
    Silu,
    /// `0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 x^3)))`
    Gelu,
}

impl Activation {
    /// Apply the nonlinearity to one value.
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Silu => {
                let one = T::one();
                x * (one / (one + (-x).exp()))
            }
            Activation::Gelu => {
                let half = T::from_f64c(0.5);
                let c0 = T::from_f64c(GELU_CUBIC);
                let c1 = T::from_f64c(GELU_SCALE);
                let inner = c1 * (x + c0 * x * x * x);
                half * x * (T::one() + inner.tanh())
            }
        }
    }

    /// Apply elementwise to a tensor.
    pub fn apply_tensor<T: Scalar>(self, x: &Tensor<T>) -> Tensor<T> {
        x.map(|v| self.apply(v))
    }

    /// First derivative (analytic, `f64` — used by the verification math).
    pub fn d1(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                let sp = s * (1.0 - s);
                s + x * sp
            }
            Activation::Gelu => {
                let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
                let up = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * up
            }
        }
    }

    /// Second derivative (analytic, `f64`).
    pub fn d2(self, x: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                let sp = s * (1.0 - s);
                let spp = sp * (1.0 - 2.0 * s);
                2.0 * sp + x * spp
            }
            Activation::Gelu => {
                let u = GELU_SCALE * (x + GELU_CUBIC * x * x * x);
                let up = GELU_SCALE * (1.0 + 3.0 * GELU_CUBIC * x * x);
                let upp = GELU_SCALE * 6.0 * GELU_CUBIC * x;
                let t = u.tanh();
                let sech2 = 1.0 - t * t;
                sech2 * up + 0.5 * x * sech2 * (upp - 2.0 * t * up * up)
            }
        }
    }
}
