//! Dense row-major `f64` matrices and the handful of kernels the encoders
//! and the contrastive objective are built from.

use std::fmt;

use crate::error::{MuserError, Result};

/// Direction along which a softmax / cross-entropy is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Softmax across each row; target for row `i` is column `i`.
    Rows,
    /// Softmax down each column; target for column `j` is row `j`.
    Cols,
}

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix {}x{} ", self.rows, self.cols)?;
        f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MuserError::Shape {
                op: "Matrix::new",
                left: format!("{rows}x{cols}"),
                right: format!("{} values", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn scalar(value: f64) -> Self {
        Matrix {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    pub fn row_vector(values: Vec<f64>) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(MuserError::Shape {
                    op: "Matrix::from_rows",
                    left: format!("row 0 has {cols} columns"),
                    right: format!("row {i} has {}", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with the operation name when any entry is NaN or infinite.
    pub fn check_finite(&self, op: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(MuserError::NonFinite(op.to_string()))
        }
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn ensure_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(MuserError::Shape {
                op,
                left: self.shape_str(),
                right: other.shape_str(),
            });
        }
        Ok(())
    }

    pub(crate) fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn matmul_unchecked(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Matrix {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `a · bᵀ` without materialising the transpose.
pub(crate) fn matmul_bt_unchecked(a: &Matrix, b: &Matrix) -> Matrix {
    let (m, n) = (a.rows, b.rows);
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        let ar = a.row(i);
        for j in 0..n {
            out.push(dot(ar, b.row(j)));
        }
    }
    Matrix {
        rows: m,
        cols: n,
        data: out,
    }
}

/// `aᵀ · b` without materialising the transpose.
pub(crate) fn matmul_at_unchecked(a: &Matrix, b: &Matrix) -> Matrix {
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    for p in 0..k {
        let a_row = a.row(p);
        let b_row = b.row(p);
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    Matrix {
        rows: m,
        cols: n,
        data: out,
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product. Errors name both shapes when the inner
/// dimensions disagree.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(MuserError::Shape {
            op: "matmul",
            left: a.shape_str(),
            right: b.shape_str(),
        });
    }
    let out = matmul_unchecked(a, b);
    out.check_finite("matmul")?;
    Ok(out)
}

pub(crate) fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn softmax_rows_unchecked(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    if out.cols > 0 {
        for r in 0..out.rows {
            softmax_slice(out.row_mut(r));
        }
    }
    out
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Matrix) -> Result<Matrix> {
    x.check_finite("softmax_rows input")?;
    Ok(softmax_rows_unchecked(x))
}

/// log-sum-exp of a slice, stable for large magnitudes.
pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = values.map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Mean over `i` of `-log softmax(logits)[i][i]` along the given axis.
pub fn cross_entropy_diag(logits: &Matrix, axis: Axis) -> Result<f64> {
    if logits.rows != logits.cols {
        return Err(MuserError::Shape {
            op: "cross_entropy_diag",
            left: logits.shape_str(),
            right: "square matrix".to_string(),
        });
    }
    logits.check_finite("cross_entropy_diag input")?;
    let n = logits.rows;
    if n == 0 {
        return Err(MuserError::invalid("cross_entropy_diag on an empty matrix"));
    }
    // Sums run over sorted values so the result does not depend on the
    // order of examples in the batch.
    let mut terms = Vec::with_capacity(n);
    let mut line = Vec::with_capacity(n);
    for i in 0..n {
        line.clear();
        match axis {
            Axis::Rows => line.extend_from_slice(logits.row(i)),
            Axis::Cols => line.extend((0..n).map(|r| logits.get(r, i))),
        }
        line.sort_by(f64::total_cmp);
        terms.push(log_sum_exp(line.iter().copied()) - logits.get(i, i));
    }
    terms.sort_by(f64::total_cmp);
    let total: f64 = terms.iter().sum();
    // Rounding can leave a tiny negative value when the diagonal saturates.
    Ok((total / n as f64).max(0.0))
}

pub(crate) fn l2_normalize_rows_unchecked(x: &Matrix, eps: f64) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let norm = dot(row, row).sqrt().max(eps);
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    out
}

/// Divides each row by `max(‖row‖₂, eps)`.
pub fn l2_normalize_rows(x: &Matrix, eps: f64) -> Result<Matrix> {
    if !(eps > 0.0) {
        return Err(MuserError::invalid(format!(
            "l2_normalize_rows requires eps > 0, got {eps}"
        )));
    }
    x.check_finite("l2_normalize_rows input")?;
    Ok(l2_normalize_rows_unchecked(x, eps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a.get(i, p) * b.get(p, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    #[test]
    fn identity_and_zero_products() {
        let b = Matrix::new(2, 3, vec![1.0, -2.0, 3.0, 0.5, 4.0, -6.0]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &b).unwrap(), b);
        assert_eq!(matmul(&Matrix::zeros(2, 2), &b).unwrap(), Matrix::zeros(2, 3));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random(5, 4, &mut rng);
        let b = random(4, 3, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        let slow = naive(&a, &b);
        for (x, y) in fast.data().iter().zip(slow.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let bt = matmul_bt_unchecked(&a, &b.transpose());
        let at = matmul_at_unchecked(&a.transpose(), &b);
        for ((x, y), z) in bt.data().iter().zip(slow.data()).zip(at.data()) {
            assert!((x - y).abs() < 1e-12 && (z - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3"), "{msg}");
        assert!(matches!(err, MuserError::Shape { .. }));
    }

    #[test]
    fn softmax_cases() {
        let eq = softmax_rows(&Matrix::filled(1, 5, 3.3)).unwrap();
        assert!(eq.data().iter().all(|v| (v - 0.2).abs() < 1e-12));

        let sat = softmax_rows(&Matrix::row_vector(vec![0.0, 150.0])).unwrap();
        assert!(sat.get(0, 0) < 1e-9 && (sat.get(0, 1) - 1.0).abs() < 1e-9);

        let s = softmax_rows(&Matrix::row_vector(vec![1.0, 2.0, 3.0])).unwrap();
        let denom: f64 = [1.0f64, 2.0, 3.0].iter().map(|x| (x - 3.0).exp()).sum();
        for (j, x) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((s.get(0, j) - (x - 3.0).exp() / denom).abs() < 1e-12);
        }

        let huge = softmax_rows(&Matrix::row_vector(vec![1e4, -1e4, 9999.0])).unwrap();
        assert!(huge.is_finite());
        assert!((huge.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn softmax_rejects_nan() {
        assert!(softmax_rows(&Matrix::row_vector(vec![f64::NAN, 1.0])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        assert_eq!(cross_entropy_diag(&Matrix::scalar(7.5), Axis::Rows).unwrap(), 0.0);
        for n in [2usize, 3, 8] {
            let l = cross_entropy_diag(&Matrix::filled(n, n, 0.4), Axis::Cols).unwrap();
            assert!((l - (n as f64).ln()).abs() < 1e-9);
        }
        let l = cross_entropy_diag(&Matrix::identity(2), Axis::Rows).unwrap();
        let closed = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((l - closed).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
        assert!(cross_entropy_diag(&Matrix::zeros(2, 3), Axis::Rows).is_err());
    }

    #[test]
    fn cross_entropy_saturates_to_zero() {
        let m = Matrix::from_fn(3, 3, |r, c| if r == c { 1e4 } else { 0.0 });
        assert_eq!(cross_entropy_diag(&m, Axis::Rows).unwrap(), 0.0);
    }

    #[test]
    fn l2_normalize_cases() {
        let n = l2_normalize_rows(&Matrix::row_vector(vec![3.0, 4.0]), 1e-12).unwrap();
        assert!((n.get(0, 0) - 0.6).abs() < 1e-15 && (n.get(0, 1) - 0.8).abs() < 1e-15);
        let z = l2_normalize_rows(&Matrix::zeros(1, 4), 1e-12).unwrap();
        assert_eq!(z, Matrix::zeros(1, 4));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(20, 7, &mut rng);
        let n = l2_normalize_rows(&x, 1e-12).unwrap();
        for r in 0..n.rows() {
            let norm = dot(n.row(r), n.row(r)).sqrt();
            assert!((norm - 1.0).abs() <= 1e-6);
        }
        assert!(l2_normalize_rows(&x, 0.0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matmul_is_associative(seed in any::<u64>(), m in 1usize..6, k in 1usize..6, p in 1usize..6, n in 1usize..6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let a = random(m, k, &mut rng);
                let b = random(k, p, &mut rng);
                let c = random(p, n, &mut rng);
                let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
                let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
                for (x, y) in left.data().iter().zip(right.data()) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }

            #[test]
            fn softmax_rows_sum_to_one(values in proptest::collection::vec(-1e4f64..1e4, 1..40)) {
                let s = softmax_rows(&Matrix::row_vector(values)).unwrap();
                prop_assert!(s.data().iter().all(|&v| v >= 0.0));
                prop_assert!((s.data().iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }

            #[test]
            fn cross_entropy_is_nonnegative(seed in any::<u64>(), n in 1usize..8, scale in 0.0f64..50.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let m = random(n, n, &mut rng).map(|v| v * scale);
                prop_assert!(cross_entropy_diag(&m, Axis::Rows).unwrap() >= 0.0);
                prop_assert!(cross_entropy_diag(&m, Axis::Cols).unwrap() >= 0.0);
            }
        }
    }
}
