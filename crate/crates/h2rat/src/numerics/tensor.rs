//! Dense rank-1/2 tensors, 64-bit floats, row-major storage.
//!
//! Every public operation validates shapes and finiteness; a NaN or Inf
//! is an error, never a silently propagated value.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// A dense matrix (vectors are `n x 1` or `1 x n`).
///
/// ```
/// use h2rat::numerics::Tensor;
/// let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
/// let b = Tensor::from_rows(&[&[5.0], &[6.0]]).unwrap();
/// let c = a.matmul(&b).unwrap();
/// assert_eq!(c.as_slice(), &[17.0, 39.0]);
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Tensor::new",
                lhs: format!("{rows}x{cols}"),
                rhs: format!("data of length {}", data.len()),
            });
        }
        let t = Tensor { rows, cols, data };
        t.check_finite("Tensor::new")?;
        Ok(t)
    }

    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Tensor> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimensionMismatch {
                    op: "Tensor::from_rows",
                    lhs: format!("row of length {c}"),
                    rhs: format!("row of length {}", row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    /// Column vector from a slice.
    pub fn col_vec(values: &[f64]) -> Result<Tensor> {
        Tensor::new(values.len(), 1, values.to_vec())
    }

    pub fn scalar(value: f64) -> Result<Tensor> {
        Tensor::new(1, 1, vec![value])
    }

    /// Entries drawn uniformly from [-scale, scale).
    pub fn uniform_init(rows: usize, cols: usize, scale: f64, rng: &mut RngStream) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.uniform(-scale, scale))
            .collect();
        Tensor { rows, cols, data }
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn check_finite(&self, op: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    /// Matrix product. Summation order is a fixed k-inner loop so results
    /// are identical across runs and platforms.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                lhs: self.shape_str(),
                rhs: other.shape_str(),
            });
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut acc = 0.0;
                for k in 0..self.cols {
                    acc += self.data[i * self.cols + k] * other.data[k * other.cols + j];
                }
                out.data[i * other.cols + j] = acc;
            }
        }
        out.check_finite("matmul")?;
        Ok(out)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul_elem(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "mul_elem", |a, b| a * b)
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch {
                op,
                lhs: self.shape_str(),
                rhs: other.shape_str(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let out = Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        };
        out.check_finite(op)?;
        Ok(out)
    }

    /// Add a column vector to every column of the matrix: the broadcast
    /// sum between an `m x d` matrix and an `m`-vector.
    pub fn broadcast_add_cols(&self, v: &Tensor) -> Result<Tensor> {
        if v.cols != 1 || v.rows != self.rows {
            return Err(Error::DimensionMismatch {
                op: "broadcast_add_cols",
                lhs: self.shape_str(),
                rhs: v.shape_str(),
            });
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[r * self.cols + c] += v.data[r];
            }
        }
        out.check_finite("broadcast_add_cols")?;
        Ok(out)
    }

    pub fn tanh_elem(&self) -> Result<Tensor> {
        self.map("tanh_elem", f64::tanh)
    }

    pub fn sigmoid_elem(&self) -> Result<Tensor> {
        self.map("sigmoid_elem", |x| 1.0 / (1.0 + (-x).exp()))
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        self.map("scale", |x| x * c)
    }

    fn map(&self, op: &'static str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let out = Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        };
        out.check_finite(op)?;
        Ok(out)
    }

    /// Softmax of a column vector, computed with max-subtraction so large
    /// logits cannot overflow.
    pub fn softmax_vec(&self) -> Result<Tensor> {
        if self.cols != 1 {
            return Err(Error::DimensionMismatch {
                op: "softmax_vec",
                lhs: self.shape_str(),
                rhs: "column vector".into(),
            });
        }
        if self.rows == 0 {
            return Err(Error::EmptyInput {
                what: "softmax_vec input",
            });
        }
        let max = self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = self.data.iter().map(|&x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let out = Tensor {
            rows: self.rows,
            cols: 1,
            data: exps.iter().map(|&e| e / sum).collect(),
        };
        out.check_finite("softmax_vec")?;
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn column(&self, j: usize) -> Result<Tensor> {
        if j >= self.cols {
            return Err(Error::IndexOutOfRange {
                what: "column",
                index: j,
                bound: self.cols,
            });
        }
        let data = (0..self.rows).map(|r| self.data[r * self.cols + j]).collect();
        Ok(Tensor {
            rows: self.rows,
            cols: 1,
            data,
        })
    }

    pub fn set_column(&mut self, j: usize, v: &Tensor) -> Result<()> {
        if j >= self.cols || v.rows != self.rows || v.cols != 1 {
            return Err(Error::DimensionMismatch {
                op: "set_column",
                lhs: self.shape_str(),
                rhs: v.shape_str(),
            });
        }
        for r in 0..self.rows {
            self.data[r * self.cols + j] = v.data[r];
        }
        Ok(())
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.data.iter().enumerate() {
            if v > self.data[best] {
                best = i;
            }
        }
        best
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Round every entry through 32-bit precision. Files store f32, so
    /// checkpoints are quantized once up front to make round trips exact.
    pub fn quantize_f32(&self) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x as f32 as f64).collect(),
        }
    }

    /// True when all entries are within `tol` of the other tensor.
    pub fn approx_eq(&self, other: &Tensor, tol: f64) -> bool {
        self.shape() == other.shape()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(&a, &b)| (a - b).abs() <= tol)
    }
}
