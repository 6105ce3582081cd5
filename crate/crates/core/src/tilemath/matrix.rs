use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix given {} elements",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Entries drawn uniformly from `[-1, 1)`.
    pub fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    /// Copies out a sub-block.
    pub fn block(&self, rows: Range<usize>, cols: Range<usize>) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for r in rows.clone() {
            data.extend_from_slice(&self.data[r * self.cols + cols.start..r * self.cols + cols.end]);
        }
        Matrix {
            rows: rows.len(),
            cols: cols.len(),
            data,
        }
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn hconcat(parts: &[Matrix]) -> Result<Matrix> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Shape("hconcat of matrices with different row counts".into()));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
            }
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// GEMM tile sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileSpec {
    pub bm: usize,
    pub bn: usize,
    pub bk: usize,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            bm: 16,
            bn: 16,
            bk: 16,
        }
    }
}

impl TileSpec {
    pub fn new(bm: usize, bn: usize, bk: usize) -> Result<Self> {
        let spec = Self { bm, bn, bk };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bm == 0 || self.bn == 0 || self.bk == 0 {
            return Err(Error::Config(format!("tile sizes must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Splits `0..len` into consecutive ranges of at most `size`; the last one is
/// clamped.
pub fn tile_ranges(len: usize, size: usize) -> impl Iterator<Item = Range<usize>> {
    let size = size.max(1);
    (0..len).step_by(size).map(move |s| s..(s + size).min(len))
}

/// `acc += a * b` for row-major tiles. For every output element the products
/// are added one at a time in ascending `k`, so splitting `k` into blocks and
/// calling this once per block gives bit-identical results to one call over
/// the whole range.
pub fn gemm_acc(a: &Matrix, b: &Matrix, acc: &mut Matrix) -> Result<()> {
    if a.cols != b.rows || acc.rows != a.rows || acc.cols != b.cols {
        return Err(Error::Shape(format!(
            "gemm_acc: a {}x{}, b {}x{}, acc {}x{}",
            a.rows, a.cols, b.rows, b.cols, acc.rows, acc.cols
        )));
    }
    let n = b.cols;
    for i in 0..a.rows {
        let acc_row = &mut acc.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            let b_row = &b.data[k * n..(k + 1) * n];
            for (c, &bkj) in acc_row.iter_mut().zip(b_row) {
                *c += aik * bkj;
            }
        }
    }
    Ok(())
}
