//! Dense matrices and the activations/mask that act on them.
//!
//! Vectors follow the column convention: a vector in R^n is an `n x 1`
//! [`Mat`]. Indices are zero-based throughout the Rust API.

use std::fmt;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::scalar::{Backend, Scalar};

#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Mat<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[T]> = self.data.chunks(self.cols.max(1)).collect();
        f.debug_struct("Mat")
            .field("shape", &(self.rows, self.cols))
            .field("rows", &rows)
            .finish()
    }
}

impl<T: Scalar> Mat<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyShape((rows, cols)));
        }
        if data.len() != rows * cols {
            return Err(Error::InvalidParameters(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<T>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidParameters("ragged rows".into()));
        }
        Self::from_vec(r, c, rows.into_iter().flatten().collect())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix shape {rows}x{cols}");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_fn(rows, cols, |_, _| T::zero())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    /// Standard basis matrix with a one at `(i, j)`.
    pub fn basis(rows: usize, cols: usize, i: usize, j: usize) -> Self {
        assert!(i < rows && j < cols, "basis index ({i},{j}) outside {rows}x{cols}");
        Self::from_fn(rows, cols, |a, b| if (a, b) == (i, j) { T::one() } else { T::zero() })
    }

    pub fn column(values: Vec<T>) -> Result<Self> {
        let n = values.len();
        Self::from_vec(n, 1, values)
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

    pub fn get(&self, i: usize, j: usize) -> &T {
        &self.data[i * self.cols + j]
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    pub fn entries(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<T>> {
        self.data.chunks(self.cols).map(<[T]>::to_vec).collect()
    }

    pub fn col(&self, j: usize) -> Mat<T> {
        Mat::from_fn(self.rows, 1, |i, _| self.get(i, j).clone())
    }

    pub fn transpose(&self) -> Mat<T> {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i).clone())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(&T) -> U) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Converts between backends through the exact rational value when possible.
    pub fn convert<U: Scalar>(&self) -> Mat<U>
    where
        T: IntoBackend<U>,
    {
        self.map(|v| v.into_backend())
    }

    pub fn matmul(&self, other: &Mat<T>) -> Result<Mat<T>> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a.is_zero() {
                    continue;
                }
                for j in 0..other.cols {
                    let b = other.get(k, j);
                    if b.is_zero() {
                        continue;
                    }
                    let idx = i * out.cols + j;
                    let prev = std::mem::replace(&mut out.data[idx], T::zero());
                    out.data[idx] = prev + a.clone() * b.clone();
                }
            }
        }
        Ok(out)
    }

    fn zip_with(&self, other: &Mat<T>, op: &'static str, f: impl Fn(&T, &T) -> T) -> Result<Mat<T>> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Mat<T>) -> Result<Mat<T>> {
        self.zip_with(other, "add", |a, b| a.clone() + b.clone())
    }

    pub fn sub(&self, other: &Mat<T>) -> Result<Mat<T>> {
        self.zip_with(other, "sub", |a, b| a.clone() - b.clone())
    }

    pub fn scale(&self, c: &T) -> Mat<T> {
        self.map(|v| c.clone() * v.clone())
    }

    /// Adds the column vector `b` to every column.
    pub fn add_column_broadcast(&self, b: &Mat<T>) -> Result<Mat<T>> {
        if b.cols != 1 || b.rows != self.rows {
            return Err(Error::shape("bias broadcast", self.shape(), b.shape()));
        }
        Ok(Mat::from_fn(self.rows, self.cols, |i, j| {
            self.get(i, j).clone() + b.get(i, 0).clone()
        }))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Mat<T>> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.rows) {
            return Err(Error::IndexOutOfRange {
                what: "row",
                index: bad,
                bound: self.rows,
            });
        }
        Mat::from_vec(
            idx.len(),
            self.cols,
            idx.iter().flat_map(|&i| self.row(i).iter().cloned()).collect(),
        )
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(Scalar::is_zero)
    }
}

/// Backend conversion used by [`Mat::convert`].
pub trait IntoBackend<U> {
    fn into_backend(&self) -> U;
}

impl<T: Scalar> IntoBackend<T> for T {
    fn into_backend(&self) -> T {
        self.clone()
    }
}

impl IntoBackend<f64> for crate::scalar::Rational {
    fn into_backend(&self) -> f64 {
        Scalar::to_f64(self)
    }
}

/// Vertical stacking `(X_1, ..., X_n)`.
pub fn stack_rows<T: Scalar>(parts: &[Mat<T>]) -> Result<Mat<T>> {
    let first = parts.first().ok_or(Error::Empty("stack_rows"))?;
    let cols = first.cols;
    let mut data = Vec::new();
    let mut rows = 0;
    for part in parts {
        if part.cols != cols {
            return Err(Error::shape("stack_rows", first.shape(), part.shape()));
        }
        rows += part.rows;
        data.extend(part.data.iter().cloned());
    }
    Mat::from_vec(rows, cols, data)
}

pub fn relu<T: Scalar>(m: &Mat<T>) -> Mat<T> {
    m.map(Scalar::relu)
}

/// Columnwise SoftMax. `-inf` entries map to exactly zero and are left out of
/// the normalizing sum.
pub fn softmax_columns<T: Scalar>(m: &Mat<T>) -> Result<Mat<T>> {
    if T::BACKEND != Backend::Float {
        return Err(Error::UnsupportedBackend {
            op: "softmax",
            backend: T::BACKEND.name(),
        });
    }
    let mut out = Mat::zeros(m.rows, m.cols);
    for j in 0..m.cols {
        let col: Vec<f64> = (0..m.rows).map(|i| m.get(i, j).to_f64()).collect();
        let max = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateColumn(j));
        }
        let exps: Vec<f64> = col
            .iter()
            .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - max).exp() })
            .collect();
        let total: f64 = exps.iter().sum();
        for (i, e) in exps.into_iter().enumerate() {
            let v = if e == 0.0 { 0.0 } else { e / total };
            out.set(i, j, T::from_f64(v).expect("float backend"));
        }
    }
    Ok(out)
}

/// Entrywise `log(1 + exp(beta x)) / beta`. `beta = +inf` gives ReLU.
pub fn softplus_beta<T: Scalar>(m: &Mat<T>, beta: f64) -> Result<Mat<T>> {
    if beta.is_nan() || beta <= 0.0 {
        return Err(Error::InvalidBeta(beta));
    }
    if T::BACKEND != Backend::Float {
        return Err(Error::UnsupportedBackend {
            op: "softplus",
            backend: T::BACKEND.name(),
        });
    }
    Ok(m.map(|v| T::from_f64(softplus_scalar(v.to_f64(), beta)).expect("float backend")))
}

pub fn softplus_scalar(x: f64, beta: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    if beta == f64::INFINITY {
        return x.max(0.0);
    }
    let y = beta * x;
    if y > 0.0 {
        x + (-y).exp().ln_1p() / beta
    } else {
        y.exp().ln_1p() / beta
    }
}

/// Scores with a causal mask applied.
///
/// On the float backend the strictly-lower triangle holds `-inf`. The
/// rational backend cannot represent `-inf`, so the values are kept and the
/// `structural` flag tells the activation to zero that triangle.
#[derive(Clone, Debug, PartialEq)]
pub struct Masked<T> {
    values: Mat<T>,
    structural: bool,
}

pub fn apply_mask<T: Scalar>(m: &Mat<T>) -> Result<Masked<T>> {
    if m.rows != m.cols {
        return Err(Error::NonSquare(m.shape()));
    }
    match T::neg_infinity() {
        Some(ninf) => {
            let values = Mat::from_fn(m.rows, m.cols, |i, j| {
                if i > j {
                    ninf.clone()
                } else {
                    m.get(i, j).clone()
                }
            });
            Ok(Masked {
                values,
                structural: false,
            })
        }
        None => Ok(Masked {
            values: m.clone(),
            structural: true,
        }),
    }
}

impl<T: Scalar> Masked<T> {
    pub fn is_structural(&self) -> bool {
        self.structural
    }

    /// The underlying matrix; on the float backend this carries the `-inf`s.
    pub fn values(&self) -> &Mat<T> {
        &self.values
    }

    pub fn relu(&self) -> Mat<T> {
        if self.structural {
            Mat::from_fn(self.values.rows, self.values.cols, |i, j| {
                if i > j {
                    T::zero()
                } else {
                    self.values.get(i, j).relu()
                }
            })
        } else {
            relu(&self.values)
        }
    }

    pub fn softmax(&self) -> Result<Mat<T>> {
        if self.structural {
            return Err(Error::UnsupportedBackend {
                op: "softmax",
                backend: T::BACKEND.name(),
            });
        }
        softmax_columns(&self.values)
    }

    pub fn softplus(&self, beta: f64) -> Result<Mat<T>> {
        if self.structural {
            return Err(Error::UnsupportedBackend {
                op: "softplus",
                backend: T::BACKEND.name(),
            });
        }
        softplus_beta(&self.values, beta)
    }
}

impl<T: Scalar> Serialize for Mat<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<Vec<Value>> = self
            .data
            .chunks(self.cols)
            .map(|r| r.iter().map(Scalar::to_json).collect())
            .collect();
        rows.serialize(s)
    }
}

impl<'de, T: Scalar> Deserialize<'de> for Mat<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<Value>> = Vec::deserialize(d)?;
        let parsed = rows
            .iter()
            .map(|r| r.iter().map(T::from_json).collect::<std::result::Result<Vec<T>, String>>())
            .collect::<std::result::Result<Vec<_>, String>>()
            .map_err(D::Error::custom)?;
        Mat::from_rows(parsed).map_err(D::Error::custom)
    }
}
