//! Dense row-major matrices of `f64`.
//!
//! [`Tensor`] is the value type shared by every module. It carries no
//! differentiation state of its own; attaching a tensor to a
//! [`Tape`](crate::autograd::Tape) yields a [`Var`](crate::autograd::Var).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "{rows}x{cols} tensor needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        let t = Tensor { rows, cols, data };
        t.ensure_finite("Tensor::new")?;
        Ok(t)
    }

    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Tensor::from_parts(rows, cols, vec![value; rows * cols])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(1, 1, vec![value])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Builds a tensor from nested rows. All rows must share a length.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::InvalidArgument("ragged rows".into()));
            }
            data.extend_from_slice(r);
        }
        Tensor::new(rows.len(), cols, data)
    }

    /// A single column vector.
    pub fn column(values: Vec<f64>) -> Result<Self> {
        Tensor::new(values.len(), 1, values)
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

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// Returns the value of a 1x1 tensor.
    pub fn item(&self) -> Result<f64> {
        if self.shape() != (1, 1) {
            return Err(Error::NonScalarLoss(self.rows, self.cols));
        }
        Ok(self.data[0])
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(op))
        }
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor::from_parts(m, n, out))
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::from_parts(self.cols, self.rows, out)
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_bias(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                lhs: self.shape(),
                rhs: bias.shape(),
            });
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(self.cols.max(1)) {
            for (o, b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(Tensor::from_parts(self.rows, self.cols, out))
    }

    /// Column sums as a `1 x cols` row.
    pub fn sum_rows(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for row in self.data.chunks(self.cols.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Tensor::from_parts(1, self.cols, out)
    }

    /// Repeats a `1 x cols` row `rows` times.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Tensor> {
        if self.rows != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: self.shape(),
                rhs: (1, self.cols),
            });
        }
        Ok(Tensor::from_parts(rows, self.cols, self.data.repeat(rows)))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn zip_map(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_parts(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn select_col(&self, col: usize) -> Result<Tensor> {
        if col >= self.cols {
            return Err(Error::InvalidArgument(format!(
                "column {col} out of range for {} columns",
                self.cols
            )));
        }
        let data = (0..self.rows).map(|r| self.get(r, col)).collect();
        Ok(Tensor::from_parts(self.rows, 1, data))
    }

    /// Places a single column at position `col` of an otherwise zero
    /// `rows x width` tensor.
    pub fn pad_col(&self, col: usize, width: usize) -> Result<Tensor> {
        if self.cols != 1 || col >= width {
            return Err(Error::InvalidArgument(format!(
                "cannot pad {}x{} into column {col} of width {width}",
                self.rows, self.cols
            )));
        }
        let mut out = vec![0.0; self.rows * width];
        for r in 0..self.rows {
            out[r * width + col] = self.data[r];
        }
        Ok(Tensor::from_parts(self.rows, width, out))
    }

    /// Replaces column `col` with the single-column tensor `values`.
    pub fn with_col(&self, col: usize, values: &Tensor) -> Result<Tensor> {
        if values.shape() != (self.rows, 1) || col >= self.cols {
            return Err(Error::ShapeMismatch {
                op: "with_col",
                lhs: self.shape(),
                rhs: values.shape(),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            out.data[r * self.cols + col] = values.data[r];
        }
        Ok(out)
    }

    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::InvalidArgument(format!(
                    "row {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Tensor::from_parts(indices.len(), self.cols, data))
    }

    /// Writes the rows of `values` into the rows listed in `indices`.
    pub fn scatter_rows(&mut self, indices: &[usize], values: &Tensor) -> Result<()> {
        if values.rows != indices.len() || values.cols != self.cols {
            return Err(Error::ShapeMismatch {
                op: "scatter_rows",
                lhs: self.shape(),
                rhs: values.shape(),
            });
        }
        let cols = self.cols;
        for (k, &i) in indices.iter().enumerate() {
            if i >= self.rows {
                return Err(Error::InvalidArgument(format!("row {i} out of range")));
            }
            self.data[i * cols..(i + 1) * cols].copy_from_slice(values.row(k));
        }
        Ok(())
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_length() {
        assert!(Tensor::new(1, 2, vec![1.0]).is_err());
        assert!(matches!(
            Tensor::new(1, 1, vec![f64::NAN]),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn transpose_and_gather() {
        let t = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(t.transpose().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert_eq!(
            t.gather_rows(&[1, 1]).unwrap().data(),
            &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0]
        );
        assert!(t.gather_rows(&[2]).is_err());
    }

    #[test]
    fn scatter_writes_rows() {
        let mut t = Tensor::zeros(3, 2);
        let v = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        t.scatter_rows(&[2], &v).unwrap();
        assert_eq!(t.row(2), &[1.0, 2.0]);
        assert_eq!(t.row(0), &[0.0, 0.0]);
    }
}
