//! Dense row-major f64 tensors with a tape-based reverse-mode graph.

mod attention;
mod gradcheck;
mod graph;

pub use attention::{masked_attention, BoolMatrix, Spans};
pub use gradcheck::{gradcheck, gradcheck_sampled, GradcheckReport};
pub use graph::{Grads, Graph, Var};

use crate::error::{Result, WamError};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(WamError::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(WamError::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(x: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![x],
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(WamError::shape("from_rows", "ragged rows"));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn trainable(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading extent; a 1-D tensor is a single row.
    pub fn rows(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[0]
        }
    }

    /// Product of all trailing extents.
    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            self.shape[0]
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(WamError::shape("reshape", format!("{:?} -> {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(WamError::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, false, &other.data, false, &mut out, 0.0);
        Tensor::matrix(m, n, out)
    }

    /// Rows `start..start+len` as a new matrix.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Tensor> {
        if start + len > self.rows() {
            return Err(WamError::OutOfRange {
                index: start + len,
                len: self.rows(),
            });
        }
        let c = self.cols();
        Tensor::matrix(len, c, self.data[start * c..(start + len) * c].to_vec())
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let c = parts.first().map(|p| p.cols()).unwrap_or(0);
        if parts.iter().any(|p| p.cols() != c) {
            return Err(WamError::shape("concat_rows", "column counts differ"));
        }
        let rows = parts.iter().map(|p| p.rows()).sum();
        let mut data = Vec::with_capacity(rows * c);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::matrix(rows, c, data)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-major `C = A' B' + beta C`, where `'` optionally transposes the stored operand.
/// `a` is stored `[m,k]` (or `[k,m]` when transposed), `b` is `[k,n]` (or `[n,k]`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe exactly
    // those row-major buffers.
    unsafe {
        matrixmultiply::dgemm(
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

/// Strided matrix view: element `(i, j)` is `data[off + i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View<'_> {
    fn fits(&self, rows: usize, cols: usize) -> bool {
        rows == 0 || cols == 0 || self.off + (rows - 1) * self.rs + (cols - 1) * self.cs < self.data.len()
    }
}

/// `C = alpha A B + beta C` on strided views, `A` `[m,k]`, `B` `[k,n]`,
/// `C` `[m,n]` at `c[c_off + i * rsc + j * csc]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_view(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: View,
    b: View,
    beta: f64,
    c: &mut [f64],
    c_off: usize,
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let cv = View {
        data: c,
        off: c_off,
        rs: rsc,
        cs: csc,
    };
    assert!(a.fits(m, k) && b.fits(k, n) && cv.fits(m, n), "gemm view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[c_off + i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    // SAFETY: the asserts above keep every addressed element inside its slice,
    // and `c` is a unique borrow distinct from `a` and `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            csc as isize,
        );
    }
}
