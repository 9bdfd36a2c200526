//! Dense row-major `f32` arrays and the handful of kernels the engine is built on.
//!
//! Shapes are explicit `dims` vectors of up to four positive axes. There are no
//! strided views: reshapes and transposes copy. Matrix products go through a
//! packed single-threaded SGEMM.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

pub const MAX_RANK: usize = 4;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOW: usize = 8;
        write!(f, "Tensor{:?} ", self.dims)?;
        if self.data.len() <= SHOW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}...", &self.data[..SHOW])
        }
    }
}

fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return shape_err(format!("rank must be 1..={MAX_RANK}, got {}", dims.len()));
    }
    if dims.iter().any(|&d| d == 0) {
        return shape_err(format!("zero-length axis in {dims:?}"));
    }
    Ok(dims.iter().product())
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f32>) -> Result<Self> {
        let len = check_dims(dims)?;
        if data.len() != len {
            return shape_err(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            ));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Panics on an invalid shape. Meant for shapes the caller controls.
    pub fn full(dims: &[usize], value: f32) -> Self {
        let len = check_dims(dims).expect("invalid tensor dims");
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    /// Builds a tensor from a function of the flat (row-major) index.
    pub fn from_fn(dims: &[usize], f: impl FnMut(usize) -> f32) -> Self {
        let len = check_dims(dims).expect("invalid tensor dims");
        Tensor {
            dims: dims.to_vec(),
            data: (0..len).map(f).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Tensor::new(dims, self.data)
    }

    fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return shape_err(format!(
                "{what}: expected rank {rank}, got {:?}",
                self.dims
            ));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    /// Length of the last axis.
    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, index: &[usize]) -> f32 {
        self.data[self.flat_index(index)]
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.dims.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {index:?} out of bounds for {:?}", self.dims);
                acc * d + i
            })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.dims != other.dims {
            return shape_err(format!(
                "elementwise op on {:?} and {:?}",
                self.dims, other.dims
            ));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f32) -> Tensor {
        self.map(|v| v * s)
    }

    /// Adds `bias` (length = last axis) to every row.
    pub fn add_row_vector(&self, bias: &Tensor) -> Result<Tensor> {
        let mut out = self.clone();
        out.add_row_vector_in_place(bias)?;
        Ok(out)
    }

    pub fn add_row_vector_in_place(&mut self, bias: &Tensor) -> Result<()> {
        let c = self.cols();
        if bias.len() != c {
            return shape_err(format!(
                "bias of length {} for rows of length {c}",
                bias.len()
            ));
        }
        for row in self.data.chunks_exact_mut(c) {
            for (v, b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        Ok(())
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        self.expect_rank(2, "transpose2d")?;
        let (r, c) = (self.dims[0], self.dims[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor::new(&[c, r], data)
    }

    /// Stacks two rank-2 tensors with equal column counts vertically.
    pub fn concat_rows(top: &Tensor, bottom: &Tensor) -> Result<Tensor> {
        top.expect_rank(2, "concat_rows")?;
        bottom.expect_rank(2, "concat_rows")?;
        if top.cols() != bottom.cols() {
            return shape_err(format!(
                "concat_rows of {:?} and {:?}",
                top.dims, bottom.dims
            ));
        }
        let mut data = Vec::with_capacity(top.len() + bottom.len());
        data.extend_from_slice(&top.data);
        data.extend_from_slice(&bottom.data);
        Tensor::new(&[top.rows() + bottom.rows(), top.cols()], data)
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        self.expect_rank(2, "slice_rows")?;
        if start >= end || end > self.rows() {
            return shape_err(format!(
                "row range {start}..{end} out of {}",
                self.rows()
            ));
        }
        let c = self.cols();
        Tensor::new(&[end - start, c], self.data[start * c..end * c].to_vec())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.dims, other.dims, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }
}

/// A read-only matrix view over a flat buffer with arbitrary row/column strides.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn dense(data: &'a [f32], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn of(t: &'a Tensor) -> Self {
        assert_eq!(t.rank(), 2, "MatRef::of needs a rank-2 tensor");
        Self::dense(&t.data, t.dims[0], t.dims[1])
    }

    /// Transposed view of the same storage.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    /// Columns `start..start+width`.
    pub fn cols_range(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        MatRef {
            data: &self.data[start * self.col_stride..],
            rows: self.rows,
            cols: width,
            row_stride: self.row_stride,
            col_stride: self.col_stride,
        }
    }

    fn last_index(&self) -> usize {
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// `c = a·b + beta·c` where `c` is dense row-major with `a.rows × b.cols` entries.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f32, c: &mut [f32]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(a.last_index() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.last_index() < b.data.len(), "gemm rhs view out of bounds");
    // SAFETY: all three views were bounds-checked above and `c` does not alias
    // `a` or `b` (it is a unique borrow).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return shape_err(format!("matmul of {:?} and {:?}", a.dims, b.dims));
    }
    if a.dims[1] != b.dims[0] {
        return shape_err(format!(
            "matmul inner dims disagree: {:?} x {:?}",
            a.dims, b.dims
        ));
    }
    let (m, n) = (a.dims[0], b.dims[1]);
    let mut out = vec![0.0; m * n];
    gemm(MatRef::of(a), MatRef::of(b), 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_transposed(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.dims[1] != b.dims[1] {
        return shape_err(format!(
            "matmul_transposed of {:?} and {:?}",
            a.dims, b.dims
        ));
    }
    let (m, n) = (a.dims[0], b.dims[0]);
    let mut out = vec![0.0; m * n];
    gemm(MatRef::of(a), MatRef::of(b).t(), 0.0, &mut out);
    Tensor::new(&[m, n], out)
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Softmax along the last axis, with max subtraction.
pub fn rowwise_softmax(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let c = out.cols();
    out.data.chunks_exact_mut(c).for_each(softmax_in_place);
    out
}

/// Per-row normalisation with population variance over the last axis.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = x.cols();
    if gamma.len() != d || beta.len() != d {
        return shape_err(format!(
            "layer_norm over {d} features with gamma {:?}, beta {:?}",
            gamma.dims, beta.dims
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::Argument(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut out = x.clone();
    for row in out.data.chunks_exact_mut(d) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + eps as f64).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&gamma.data).zip(&beta.data) {
            *v = ((*v as f64 - mean) * inv) as f32 * g + b;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Avg,
    Max,
}

/// Reduces `axis` to length 1 by mean or maximum.
pub fn axis_pool(x: &Tensor, axis: usize, mode: PoolMode) -> Result<Tensor> {
    if axis >= x.rank() {
        return shape_err(format!("pool axis {axis} for rank {}", x.rank()));
    }
    let outer: usize = x.dims[..axis].iter().product();
    let len = x.dims[axis];
    let inner: usize = x.dims[axis + 1..].iter().product();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        let base = o * len * inner;
        for i in 0..inner {
            let lane = (0..len).map(|t| x.data[base + t * inner + i]);
            out.push(match mode {
                PoolMode::Avg => (lane.map(|v| v as f64).sum::<f64>() / len as f64) as f32,
                PoolMode::Max => lane.fold(f32::NEG_INFINITY, f32::max),
            });
        }
    }
    let mut dims = x.dims.clone();
    dims[axis] = 1;
    Tensor::new(&dims, out)
}

/// Elementwise `x * a`, repeating `a` along its size-1 axes.
pub fn broadcast_mul(x: &Tensor, a: &Tensor) -> Result<Tensor> {
    if x.rank() != a.rank()
        || x
            .dims
            .iter()
            .zip(&a.dims)
            .any(|(&xd, &ad)| ad != 1 && ad != xd)
    {
        return shape_err(format!("cannot broadcast {:?} onto {:?}", a.dims, x.dims));
    }
    // strides of `a` in x's index space, zero on broadcast axes
    let rank = x.rank();
    let mut a_strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        a_strides[ax] = if a.dims[ax] == 1 { 0 } else { s };
        s *= a.dims[ax];
    }
    let mut idx = vec![0usize; rank];
    let mut data = Vec::with_capacity(x.len());
    for &v in &x.data {
        let off: usize = idx.iter().zip(&a_strides).map(|(i, s)| i * s).sum();
        data.push(v * a.data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < x.dims[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::new(&x.dims, data)
}

/// Raised-cosine window family used for the positional score prior.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Hann,
    Hamming,
}

impl WindowKind {
    pub fn coefficients(self, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![1.0];
        }
        let (a0, a1) = match self {
            WindowKind::Hann => (0.5, 0.5),
            WindowKind::Hamming => (0.54, 0.46),
        };
        (0..n)
            .map(|i| {
                let phase = 2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64;
                a0 - a1 * phase.cos()
            })
            .collect()
    }
}

/// Outer product of two 1-D windows.
pub fn window_2d(kind: WindowKind, h: usize, w: usize) -> Tensor {
    let vh = kind.coefficients(h);
    let vw = kind.coefficients(w);
    Tensor::from_fn(&[h, w], |idx| (vh[idx / w] * vw[idx % w]) as f32)
}

pub fn hann_window_2d(h: usize, w: usize) -> Tensor {
    window_2d(WindowKind::Hann, h, w)
}
