use serde::{Deserialize, Serialize};

use super::{shape_mismatch, NumericsError, RngStream, Scalar};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(
    serialize = "T: Scalar + Serialize",
    deserialize = "T: Scalar + Deserialize<'de>"
))]
pub struct Matrix<T: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, NumericsError> {
        if rows == 0 || cols == 0 {
            return Err(shape_mismatch("non-empty matrix", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(shape_mismatch(
                format!("{} entries", rows * cols),
                format!("{} entries", data.len()),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    /// Entries drawn i.i.d. from `N(0, std²)`.
    pub fn random_normal(rows: usize, cols: usize, std: f64, rng: &mut RngStream) -> Self {
        let data = rng
            .normal_vec(rows * cols, std)
            .into_iter()
            .map(T::lit)
            .collect();
        Self { rows, cols, data }
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

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// `M · x`.
    pub fn matvec(&self, x: &[T]) -> Result<Vec<T>, NumericsError> {
        if x.len() != self.cols {
            return Err(shape_mismatch(
                format!("vector of length {}", self.cols),
                format!("length {}", x.len()),
            ));
        }
        Ok((0..self.rows).map(|r| super::dot(self.row(r), x)).collect())
    }

    /// `Mᵀ · y`.
    pub fn matvec_t(&self, y: &[T]) -> Result<Vec<T>, NumericsError> {
        if y.len() != self.rows {
            return Err(shape_mismatch(
                format!("vector of length {}", self.rows),
                format!("length {}", y.len()),
            ));
        }
        let mut out = vec![T::zero(); self.cols];
        for (r, &yr) in y.iter().enumerate() {
            super::axpy(&mut out, yr, self.row(r));
        }
        Ok(out)
    }

    /// `M += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: T, u: &[T], v: &[T]) -> Result<(), NumericsError> {
        if u.len() != self.rows || v.len() != self.cols {
            return Err(shape_mismatch(
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", u.len(), v.len()),
            ));
        }
        for (r, &ur) in u.iter().enumerate() {
            let cols = self.cols;
            super::axpy(&mut self.data[r * cols..(r + 1) * cols], alpha * ur, v);
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| U::lit(x.as_f64())).collect(),
        }
    }
}
