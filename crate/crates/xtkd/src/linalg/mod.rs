//! Dense row-major `f64` matrices and the linear-algebra kernels the rest of
//! the crate builds on.
//!
//! Everything here is deliberately small-scale: matrices are owned
//! `Vec<f64>` buffers, products are cache-friendly triple loops, and the SVD
//! (see [`svd`]) is a one-sided Jacobi iteration.  Throughout the crate the
//! matrix norm written `||.||` is the Frobenius norm.
//!
//! Shape conventions: a batch of `b` feature vectors of width `d` is a
//! `b x d` matrix (samples are rows).

mod svd_impl;

pub use svd_impl::{effective_rank, svd, SvdResult};

use crate::error::{Error, Result};
use crate::util::{fmt_f64_exact, Rng};
use rand::Rng as _;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from a row-major buffer.  Validates the buffer length
    /// and that every entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix buffer has {} entries, expected {}x{} = {}",
                data.len(),
                rows,
                cols,
                rows * cols
            )));
        }
        let m = Matrix { rows, cols, data };
        m.check_finite()?;
        Ok(m)
    }

    /// Builds a matrix from nested row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::Contract(format!(
                    "ragged rows: expected {} columns, found {}",
                    c,
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Identity matrix.
    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds entry-wise from a function of `(row, col)`.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Matrix with entries drawn i.i.d. from `U(lo, hi)`.
    pub fn random_uniform(rng: &mut Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
        Matrix { rows, cols, data }
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Row-major backing buffer.
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn check_finite(&self) -> Result<()> {
        for (idx, &x) in self.data.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::Domain(format!(
                    "non-finite entry {x} at ({}, {})",
                    idx / self.cols,
                    idx % self.cols
                )));
            }
        }
        Ok(())
    }

    /// Transposed copy.
    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Matrix product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (m, n, p) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let arow = &self.data[i * n..(i + 1) * n];
            let orow = &mut out[i * p..(i + 1) * p];
            for (k, &aik) in arow.iter().enumerate() {
                let brow = &other.data[k * p..(k + 1) * p];
                for (o, &bkj) in orow.iter_mut().zip(brow) {
                    *o += aik * bkj;
                }
            }
        }
        Ok(Matrix {
            rows: m,
            cols: p,
            data: out,
        })
    }

    /// Element-wise sum.
    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("add", other, |a, b| a + b)
    }

    /// Element-wise difference.
    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("sub", other, |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with("hadamard", other, |a, b| a * b)
    }

    fn zip_with(
        &self,
        op: &'static str,
        other: &Matrix,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    /// Scaled copy `factor * self`.
    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| factor * x).collect(),
        }
    }

    /// In-place `self += factor * other`.  Used by SGD updates and gradient
    /// accumulation.
    pub fn add_scaled_in_place(&mut self, other: &Matrix, factor: f64) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled", self.shape(), other.shape()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
        Ok(())
    }

    /// Frobenius norm: square root of the sum of squared entries.
    pub fn frob_norm(&self) -> f64 {
        self.data.iter().map(|&x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute element-wise difference; panics on shape mismatch
    /// (test helper).
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Text serialization: a `rows cols` header line, then one line per row
    /// of space-separated entries at 17 significant digits (round-trip
    /// exact).
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.rows, self.cols);
        for r in 0..self.rows {
            let line: Vec<String> = self.row(r).iter().map(|&x| fmt_f64_exact(x)).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parses the [`Matrix::to_text`] format.
    pub fn from_text(text: &str) -> Result<Matrix> {
        let mut lines = text.lines();
        Self::parse_from_lines(&mut lines)
    }

    /// Parses one matrix from a line iterator, consuming exactly
    /// `1 + rows` lines.  Shared with the checkpoint reader.
    pub fn parse_from_lines<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Matrix> {
        let header = lines
            .next()
            .ok_or_else(|| parse_err("missing 'rows cols' header line"))?;
        let mut parts = header.split_whitespace();
        let rows: usize = parts
            .next()
            .ok_or_else(|| parse_err("empty header line"))?
            .parse()
            .map_err(|e| parse_err(&format!("bad row count: {e}")))?;
        let cols: usize = parts
            .next()
            .ok_or_else(|| parse_err("header missing column count"))?
            .parse()
            .map_err(|e| parse_err(&format!("bad column count: {e}")))?;
        if parts.next().is_some() {
            return Err(parse_err("header has trailing tokens"));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| parse_err(&format!("missing row {r} of {rows}")))?;
            let mut count = 0;
            for tok in line.split_whitespace() {
                let x: f64 = tok
                    .parse()
                    .map_err(|e| parse_err(&format!("row {r}: bad entry {tok:?}: {e}")))?;
                data.push(x);
                count += 1;
            }
            if count != cols {
                return Err(parse_err(&format!(
                    "row {r} has {count} entries, expected {cols}"
                )));
            }
        }
        Matrix::new(rows, cols, data)
    }
}

fn parse_err(message: &str) -> Error {
    Error::Parse {
        what: "matrix text",
        message: message.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;

    #[test]
    fn matmul_matches_hand_computation() {
        // [[1,2],[3,4]] * [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        let expect = Matrix::from_rows(&[vec![19.0, 22.0], vec![43.0, 50.0]]).unwrap();
        assert_eq!(c, expect);
    }

    #[test]
    fn matmul_rejects_mismatched_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "got: {msg}");
    }

    #[test]
    fn construction_rejects_non_finite_entries() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 2, vec![f64::INFINITY, 0.0]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, 2.0]).is_ok());
    }

    #[test]
    fn frob_norm_of_three_four_is_five() {
        let m = Matrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(m.frob_norm(), 5.0);
    }

    #[test]
    fn frob_norm_of_zero_matrix_is_zero() {
        assert_eq!(Matrix::zeros(3, 2).frob_norm(), 0.0);
    }

    #[test]
    fn transpose_round_trips() {
        let mut rng = seeded_rng(11);
        let a = Matrix::random_uniform(&mut rng, 3, 5, -1.0, 1.0);
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().shape(), (5, 3));
        assert_eq!(a.get(1, 4), a.transpose().get(4, 1));
    }

    #[test]
    fn text_round_trip_is_bitwise_exact() {
        let mut rng = seeded_rng(5);
        let a = Matrix::random_uniform(&mut rng, 4, 3, -10.0, 10.0);
        let b = Matrix::from_text(&a.to_text()).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn text_parse_reports_bad_input() {
        assert!(Matrix::from_text("").is_err());
        assert!(Matrix::from_text("2 2\n1 2\n3").is_err());
        assert!(Matrix::from_text("1 2\n1 x").is_err());
    }

    #[test]
    fn hadamard_and_scale_match_hand_values() {
        let a = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap();
        let b = Matrix::from_rows(&[vec![2.0, 4.0], vec![-1.0, 8.0]]).unwrap();
        let h = a.hadamard(&b).unwrap();
        assert_eq!(
            h,
            Matrix::from_rows(&[vec![2.0, -8.0], vec![-3.0, 4.0]]).unwrap()
        );
        assert_eq!(
            a.scale(2.0),
            Matrix::from_rows(&[vec![2.0, -4.0], vec![6.0, 1.0]]).unwrap()
        );
    }
}
