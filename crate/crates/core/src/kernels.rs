//! Dense double-precision kernels.
//!
//! Every kernel is a pure function of its inputs with a fixed accumulation
//! order, so repeated calls on equal inputs are bit-identical. Row-wise
//! kernels (softmax, normalization, projections) compute each output row from
//! the corresponding input row only; the decoding paths rely on this to make
//! cached and uncached runs agree exactly.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Matrix::from_vec",
                lhs: (rows, cols),
                rhs: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Copies the listed rows, in the listed order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        Matrix {
            rows: len,
            cols: self.cols,
            data: self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, len);
        for r in 0..self.rows {
            out.row_mut(r)
                .copy_from_slice(&self.row(r)[start..start + len]);
        }
        out
    }

    /// Writes `src` into the column block starting at `start`.
    pub fn set_cols(&mut self, start: usize, src: &Matrix) {
        debug_assert_eq!(src.rows, self.rows);
        for r in 0..self.rows {
            let cols = self.cols;
            self.data[r * cols + start..r * cols + start + src.cols].copy_from_slice(src.row(r));
        }
    }

    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols && p.rows > 0 {
                return Err(Error::ShapeMismatch {
                    op: "vstack",
                    lhs: (rows, cols),
                    rhs: p.shape(),
                });
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn push_row(&mut self, row: &[f64]) {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        assert_eq!(row.len(), self.cols, "push_row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }
}

/// Binary matrix used for attention admission and the training mask `G`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl MaskMatrix {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, true)
    }

    /// Lower-triangular (including the diagonal) pattern.
    pub fn causal(n: usize) -> Self {
        let mut m = Self::new(n, n, false);
        for i in 0..n {
            for j in 0..=i {
                m.data[i * n + j] = true;
            }
        }
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::new(n, n, false);
        for i in 0..n {
            m.data[i * n + i] = true;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn intersect(&self, other: &MaskMatrix) -> Result<MaskMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op: "MaskMatrix::intersect",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        Ok(MaskMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| *a && *b)
                .collect(),
        })
    }

    /// 0/1 real-valued copy, as consumed by the differentiable masked softmax.
    pub fn to_matrix(&self) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for i in 0..n {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out.data[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`.
pub fn matmul_transb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            op: "matmul_transb",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    // Same summation order as `dot` per entry, in axpy form.
    matmul(a, &b.transpose())
}

/// `aᵀ · b`.
pub fn matmul_transa(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Error::ShapeMismatch {
            op: "matmul_transa",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let (n, m) = (a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    for r in 0..a.rows {
        let arow = a.row(r);
        let brow = b.row(r);
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * m..(i + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Softmax of `row` restricted to the admitted entries; others become 0.
///
/// The maximum is taken over admitted entries only, so the result for a row
/// never depends on values outside its admitted set. Returns `false` when no
/// entry is admitted.
pub fn softmax_slice_masked(row: &[f64], admit: &[bool], out: &mut [f64]) -> bool {
    let mut max = f64::NEG_INFINITY;
    for (&x, &a) in row.iter().zip(admit) {
        if a && x > max {
            max = x;
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0;
    for ((o, &x), &a) in out.iter_mut().zip(row).zip(admit) {
        if a {
            let e = libm::exp(x - max);
            *o = e;
            sum += e;
        } else {
            *o = 0.0;
        }
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
    true
}

/// Softmax over a full row (every entry admitted).
pub fn softmax_slice(row: &[f64], out: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &x in row {
        if x > max {
            max = x;
        }
    }
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = libm::exp(x - max);
        *o = e;
        sum += e;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let cols = x.cols;
        softmax_slice(x.row(r), &mut out.data[r * cols..(r + 1) * cols]);
    }
    out
}

/// `exp(x_ij)·g_ij / Σ_k exp(x_ik)·g_ik` for a binary `g`.
pub fn masked_softmax(x: &Matrix, g: &MaskMatrix) -> Result<Matrix> {
    if x.shape() != g.shape() {
        return Err(Error::ShapeMismatch {
            op: "masked_softmax",
            lhs: x.shape(),
            rhs: g.shape(),
        });
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let cols = x.cols;
        if !softmax_slice_masked(x.row(r), g.row(r), &mut out.data[r * cols..(r + 1) * cols]) {
            return Err(Error::EmptyMaskRow { row: r });
        }
    }
    Ok(out)
}

/// Index of the row maximum; ties go to the lower index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

pub fn argmax_lastdim(d: &Matrix) -> Vec<usize> {
    (0..d.rows).map(|r| argmax(d.row(r))).collect()
}

/// Indices of the `k` largest scores, sorted ascending. Equal scores prefer
/// the lower index.
pub fn topk_argmax(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::TopkTooLarge {
            k,
            len: scores.len(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // NaN-free inputs; total_cmp keeps the sort total anyway.
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep = order[..k].to_vec();
    keep.sort_unstable();
    Ok(keep)
}

pub const RMS_EPS: f64 = 1e-6;

/// Row-wise `x / rms(x) * gain`.
pub fn rms_norm(x: &Matrix, gain: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        rms_norm_row(x.row(r), gain, out.row_mut(r));
    }
    out
}

pub fn rms_norm_row(x: &[f64], gain: &[f64], out: &mut [f64]) {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / libm::sqrt(ms + RMS_EPS);
    for ((o, &v), &g) in out.iter_mut().zip(x).zip(gain) {
        *o = v * inv * g;
    }
}

/// Layer normalization without affine terms, row-wise.
pub fn layer_norm(x: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(x.rows, x.cols);
    let n = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + RMS_EPS);
        for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
    }
    out
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_inplace(x: &mut Matrix) {
    for v in x.data_mut() {
        *v = silu(*v);
    }
}

/// Adds `bias` to every row.
pub fn add_row_bias(x: &mut Matrix, bias: &[f64]) {
    for r in 0..x.rows {
        for (v, b) in x.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `x · w + bias`.
pub fn linear(x: &Matrix, w: &Matrix, bias: Option<&[f64]>) -> Result<Matrix> {
    let mut out = matmul(x, w)?;
    if let Some(b) = bias {
        add_row_bias(&mut out, b);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn matmul_identity_and_zero() {
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 4.0, -1.0], [7.0, 8.0, 9.0]]);
        assert_eq!(matmul(&Matrix::identity(3), &x).unwrap(), x);
        let z = matmul(&Matrix::zeros(2, 3), &Matrix::filled(3, 4, 2.5)).unwrap();
        assert_eq!(z, Matrix::zeros(2, 4));
    }

    #[test]
    fn matmul_small_product() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[0.0], [1.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), Matrix::from_rows(&[[2.0], [4.0]]));
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { op: "matmul", .. }));
    }

    #[test]
    fn transposed_products_agree_with_matmul() {
        let a = Matrix::from_rows(&[[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]]);
        let b = Matrix::from_rows(&[[2.0, 1.0, 0.0], [1.0, -1.0, 4.0]]);
        assert_eq!(
            matmul_transb(&a, &b).unwrap(),
            matmul(&a, &b.transpose()).unwrap()
        );
        assert_eq!(
            matmul_transa(&a, &b).unwrap(),
            matmul(&a.transpose(), &b).unwrap()
        );
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0], [1000.0, 1000.0]]));
        assert_eq!(s.row(0), &[0.5, 0.5]);
        assert_eq!(s.row(1), &[0.5, 0.5]);
        let s = softmax_rows(&Matrix::from_rows(&[[libm::log(1.0), libm::log(3.0)]]));
        assert!((s.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn masked_softmax_examples() {
        let x = Matrix::zeros(2, 2);
        let g = MaskMatrix::from_fn(2, 2, |i, j| !(i == 0 && j == 1));
        let s = masked_softmax(&x, &g).unwrap();
        assert_eq!(s, Matrix::from_rows(&[[1.0, 0.0], [0.5, 0.5]]));

        let x = Matrix::from_rows(&[[3.0, -1.0, 2.0], [0.1, 9.0, -4.0], [5.0, 5.0, 5.0]]);
        let s = masked_softmax(&x, &MaskMatrix::identity(3)).unwrap();
        assert_eq!(s, Matrix::identity(3));
        assert_eq!(masked_softmax(&x, &MaskMatrix::ones(3, 3)).unwrap(), softmax_rows(&x));
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let g = MaskMatrix::from_fn(2, 2, |i, _| i == 0);
        assert_eq!(
            masked_softmax(&Matrix::zeros(2, 2), &g).unwrap_err(),
            Error::EmptyMaskRow { row: 1 }
        );
    }

    #[test]
    fn argmax_examples() {
        assert_eq!(argmax_lastdim(&Matrix::from_rows(&[[0.1, 0.9]])), vec![1]);
        assert_eq!(argmax_lastdim(&Matrix::from_rows(&[[0.5, 0.5]])), vec![0]);
        assert_eq!(
            argmax_lastdim(&Matrix::from_rows(&[[2.0, 1.0], [0.0, 3.0]])),
            vec![0, 1]
        );
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_argmax(&[0.9, 0.1, 0.7, 0.3], 2).unwrap(), vec![0, 2]);
        assert_eq!(topk_argmax(&[0.9, 0.1, 0.7, 0.3], 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(topk_argmax(&[0.4; 5], 2).unwrap(), vec![0, 1]);
        assert_eq!(
            topk_argmax(&[1.0, 2.0], 3).unwrap_err(),
            Error::TopkTooLarge { k: 3, len: 2 }
        );
    }

    #[test]
    fn rms_norm_unit_rms() {
        let x = Matrix::from_rows(&[[3.0, 4.0, 0.0, 0.0]]);
        let y = rms_norm(&x, &[1.0; 4]);
        let ms: f64 = y.row(0).iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!((ms - 1.0).abs() < 1e-6);
    }
}
