//! Dense 2-D arrays of 64-bit reals plus the forward primitives of the
//! network core: affine layers, ReLU, and stabilized softmax cross-entropy.
//!
//! All data is row-major. Every public operation keeps entries finite; the
//! few places where an overflow could realistically occur validate their
//! output and fail loudly instead of propagating NaN.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Dense row-major matrix of `f64`. The universal value carrier for batches,
/// activations, weights and gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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

    /// Identity matrix of size `n`.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidInput(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Build from nested rows; rows must be equally long.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidInput("ragged rows".into()));
        }
        Ok(Matrix {
            rows: r,
            cols: c,
            data: rows.iter().flatten().copied().collect(),
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "add_assign",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    /// `self · other` for self m×k, other k×n.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim(
                "matmul",
                format!(
                    "{}x{} · {}x{} (inner dimensions differ)",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (m, kdim, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let xi = self.row(i);
            let yi = out.row_mut(i);
            for (k, &a) in xi.iter().enumerate().take(kdim) {
                let brow = other.row(k);
                for (y, &b) in yi.iter_mut().zip(brow) {
                    *y += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` for self m×k, other n×k.
    pub fn matmul_bt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim(
                "matmul_bt",
                format!(
                    "{}x{} · ({}x{})ᵀ (column counts differ)",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (m, n) = (self.rows, other.rows);
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            let xi = self.row(i);
            let yi = out.row_mut(i);
            for (j, y) in yi.iter_mut().enumerate() {
                *y = dot(xi, other.row(j));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` for self k×m, other k×n.
    pub fn matmul_at(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(
                "matmul_at",
                format!(
                    "({}x{})ᵀ · {}x{} (row counts differ)",
                    self.rows, self.cols, other.rows, other.cols
                ),
            ));
        }
        let (kdim, m, n) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(m, n);
        for b in 0..kdim {
            let arow = self.row(b);
            let brow = other.row(b);
            for (i, &a) in arow.iter().enumerate() {
                let orow = &mut out.data[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// Element-wise product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "hadamard",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Sum over rows, producing a 1×cols matrix.
    pub fn col_sum(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for (o, v) in out.data.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// Horizontal concatenation `[self | other]`; row counts must agree.
    pub fn concat_cols(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::dim(
                "concat_cols",
                format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, self.cols + other.cols);
        for r in 0..self.rows {
            let dst = out.row_mut(r);
            dst[..self.cols].copy_from_slice(self.row(r));
            dst[self.cols..].copy_from_slice(other.row(r));
        }
        Ok(out)
    }

    /// Split columns at `at`, returning (left, right).
    pub fn split_cols(&self, at: usize) -> Result<(Matrix, Matrix)> {
        if at > self.cols {
            return Err(Error::dim(
                "split_cols",
                format!("split at {} of {}x{}", at, self.rows, self.cols),
            ));
        }
        let mut left = Matrix::zeros(self.rows, at);
        let mut right = Matrix::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            let src = self.row(r);
            left.row_mut(r).copy_from_slice(&src[..at]);
            right.row_mut(r).copy_from_slice(&src[at..]);
        }
        Ok((left, right))
    }

    /// Frobenius norm.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Affine layer: `Y = X·Wᵀ + b` with `W` out×in, `b` 1×out, `X` batch×in.
/// Row i of the result is `X_i·Wᵀ + b`.
pub fn dense_forward(w: &Matrix, b: &Matrix, x: &Matrix) -> Result<Matrix> {
    if x.cols() != w.cols() {
        return Err(Error::dim(
            "dense_forward",
            format!(
                "X is {}x{} but W is {}x{} (X.cols must equal W.cols)",
                x.rows(),
                x.cols(),
                w.rows(),
                w.cols()
            ),
        ));
    }
    if b.rows() != 1 || b.cols() != w.rows() {
        return Err(Error::dim(
            "dense_forward",
            format!(
                "b is {}x{} but W is {}x{} (b must be 1x{})",
                b.rows(),
                b.cols(),
                w.rows(),
                w.cols(),
                w.rows()
            ),
        ));
    }
    let mut y = x.matmul_bt(w)?;
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        for (v, bias) in row.iter_mut().zip(b.row(0)) {
            *v += bias;
        }
    }
    Ok(y)
}

/// Element-wise `max(x, 0)`.
pub fn relu(x: &Matrix) -> Matrix {
    let data = x.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Matrix {
        rows: x.rows(),
        cols: x.cols(),
        data,
    }
}

/// ReLU derivative mask: 1 where x > 0, 0 otherwise (0 at exactly zero).
pub fn relu_mask(x: &Matrix) -> Matrix {
    let data = x.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    Matrix {
        rows: x.rows(),
        cols: x.cols(),
        data,
    }
}

/// Numerically stable element-wise logistic sigmoid.
pub fn sigmoid(x: &Matrix) -> Matrix {
    let data = x
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 {
                1.0 / (1.0 + (-v).exp())
            } else {
                let e = v.exp();
                e / (1.0 + e)
            }
        })
        .collect();
    Matrix {
        rows: x.rows(),
        cols: x.cols(),
        data,
    }
}

/// Softmax cross-entropy over rows of `logits` against integer labels.
///
/// Returns `(loss, dlogits, probs)` where `loss` is the batch mean of
/// `-log p(y)`, `dlogits = (probs - onehot) / batch`, and softmax is
/// stabilized by subtracting each row's maximum.
pub fn softmax_ce(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix, Matrix)> {
    let (batch, classes) = logits.shape();
    if batch == 0 {
        return Err(Error::InvalidInput("softmax_ce: empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::InvalidInput(format!(
            "softmax_ce: {} labels for batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidInput(format!(
            "softmax_ce: label {bad} out of range for {classes} classes"
        )));
    }
    let mut probs = Matrix::zeros(batch, classes);
    let mut loss = 0.0;
    for i in 0..batch {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let prow = probs.row_mut(i);
        for (p, &z) in prow.iter_mut().zip(row) {
            let e = (z - max).exp();
            *p = e;
            sum += e;
        }
        for p in prow.iter_mut() {
            *p /= sum;
        }
        // loss in log-space: -(z_y - max - ln sum)
        loss += -(row[labels[i]] - max - sum.ln());
    }
    loss /= batch as f64;
    if !loss.is_finite() {
        return Err(Error::InvalidInput("softmax_ce: non-finite loss".into()));
    }
    let mut dlogits = probs.clone();
    let inv_b = 1.0 / batch as f64;
    for i in 0..batch {
        let row = dlogits.row_mut(i);
        row[labels[i]] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_b;
        }
    }
    Ok((loss, dlogits, probs))
}

/// Row-wise softmax probabilities (no loss); stabilized like [`softmax_ce`].
pub fn softmax(logits: &Matrix) -> Matrix {
    let (batch, classes) = logits.shape();
    let mut probs = Matrix::zeros(batch, classes);
    for i in 0..batch {
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        let prow = probs.row_mut(i);
        for (p, &z) in prow.iter_mut().zip(row) {
            let e = (z - max).exp();
            *p = e;
            sum += e;
        }
        for p in prow.iter_mut() {
            *p /= sum;
        }
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_forward_identity() {
        let w = Matrix::identity(2);
        let b = Matrix::zeros(1, 2);
        let x = Matrix::from_rows(&[vec![3.0, -2.0]]).unwrap();
        let y = dense_forward(&w, &b, &x).unwrap();
        assert_eq!(y.row(0), &[3.0, -2.0]);
    }

    #[test]
    fn dense_forward_hand_case() {
        // W=[[1,2],[3,4]], b=[1,1], X=[[1,1]] -> [[4,8]]
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let y = dense_forward(&w, &b, &x).unwrap();
        assert_eq!(y.row(0), &[4.0, 8.0]);
    }

    #[test]
    fn dense_forward_zero_weights_broadcasts_bias() {
        let w = Matrix::zeros(2, 3);
        let b = Matrix::from_rows(&[vec![5.0, 5.0]]).unwrap();
        let x = Matrix::from_rows(&[vec![1.0, -7.0, 2.5], vec![0.0, 0.0, 0.0]]).unwrap();
        let y = dense_forward(&w, &b, &x).unwrap();
        for r in 0..2 {
            assert_eq!(y.row(r), &[5.0, 5.0]);
        }
    }

    #[test]
    fn dense_forward_shape_error_names_both_shapes() {
        let w = Matrix::zeros(5, 3);
        let b = Matrix::zeros(1, 5);
        let x = Matrix::zeros(2, 4);
        let err = dense_forward(&w, &b, &x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x4") && msg.contains("5x3"), "{msg}");
    }

    #[test]
    fn relu_and_mask_strict_at_zero() {
        let x = Matrix::from_rows(&[vec![-1.0, 2.0, 0.0]]).unwrap();
        let r = relu(&x);
        let m = relu_mask(&x);
        assert_eq!(r.row(0), &[0.0, 2.0, 0.0]);
        assert_eq!(m.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        let logits = Matrix::zeros(3, 4);
        let (loss, _, probs) = softmax_ce(&logits, &[0, 1, 2]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
        for r in 0..3 {
            for c in 0..4 {
                assert!((probs.get(r, c) - 0.25).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_ce_saturated_correct_class() {
        let mut logits = Matrix::zeros(1, 3);
        logits.set(0, 1, 1000.0);
        let (loss, dl, _) = softmax_ce(&logits, &[1]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(dl.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn softmax_ce_hand_value() {
        // logits [1,0], label 0 -> ln(1+e^-1)
        let logits = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (loss, _, _) = softmax_ce(&logits, &[0]).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn softmax_ce_label_out_of_range() {
        let logits = Matrix::zeros(1, 2);
        assert!(matches!(
            softmax_ce(&logits, &[2]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits =
            Matrix::from_rows(&[vec![3.5, -100.0, 42.0], vec![0.1, 0.2, 0.3]]).unwrap();
        let (loss, _, probs) = softmax_ce(&logits, &[2, 0]).unwrap();
        assert!(loss >= 0.0);
        for r in 0..2 {
            let s: f64 = probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap();
        let c = a.concat_cols(&b).unwrap();
        let (l, r) = c.split_cols(2).unwrap();
        assert_eq!(l, a);
        assert_eq!(r, b);
    }

    #[test]
    fn matmul_transpose_variants_agree() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![7.0, 8.0], vec![9.0, 10.0], vec![11.0, 12.0]]).unwrap();
        let ab = a.matmul(&b).unwrap();
        // a·b == a·(bᵀ)ᵀ
        let bt = {
            let mut t = Matrix::zeros(2, 3);
            for r in 0..3 {
                for c in 0..2 {
                    t.set(c, r, b.get(r, c));
                }
            }
            t
        };
        assert_eq!(ab, a.matmul_bt(&bt).unwrap());
        // (aᵀ)ᵀ·b via matmul_at
        let at = {
            let mut t = Matrix::zeros(3, 2);
            for r in 0..2 {
                for c in 0..3 {
                    t.set(c, r, a.get(r, c));
                }
            }
            t
        };
        assert_eq!(ab, at.matmul_at(&b).unwrap());
    }
}
